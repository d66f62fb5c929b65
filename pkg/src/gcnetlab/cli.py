"""Command-line front end: nominal solves, dataset generation, training, evaluation.

Every subcommand writes a run manifest next to its artifacts; given identical
manifest inputs the outputs are reproducible (timestamps aside). Exit codes:
0 success, 2 usage, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import PRESET_NAMES, load_scenario
from .errors import ConfigError, GcnetLabError, SolverFailure, UsageError
from .evaluation import ERROR_KINDS, default_error_model, evaluate_nominal, run_mc
from .expert import ExtremalSolution, BundleSpec, bgoe_generate, default_bundles, solve_nominal
from .network import actor_spec, init_params, load_checkpoint, save_checkpoint
from .bc import BcConfig, train_bc
from .rl import PpoConfig, train_rl
from .propagation import propagate, constant_law, terminal_event
from .dynamics import COAST

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

DEFAULT_SEED = 0


def _write_manifest(outdir: Path, command: str, args: argparse.Namespace,
                    extra: dict | None = None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "tool_version": __version__,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "output_directory": str(outdir),
    }
    if extra:
        doc.update(extra)
    (outdir / "manifest.json").write_text(json.dumps(doc, indent=2, default=str))


def _scenario(args):
    overrides = {}
    return load_scenario(args.config if getattr(args, "config", None) else args.scenario,
                         overrides)


def cmd_solve_nominal(args) -> int:
    cfg = _scenario(args)
    sol = solve_nominal(cfg, seed=args.seed, attempts=args.attempts)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    sol.save(outdir / "extremal.json")
    t = cfg.unit_scales.time
    summary = {
        "scenario": cfg.name,
        "objective": sol.objective,
        "tof_seconds": sol.tof_nd * t,
        "tof_days": sol.tof_nd * t / 86400.0,
        "tof_years": sol.tof_nd * t / (365.25 * 86400.0),
        "tof_hours": sol.tof_nd * t / 3600.0,
        "m_f_fraction": sol.m_f,
        "residual": sol.residual,
        "hamiltonian_tf": sol.hamiltonian_tf,
    }
    (outdir / "nominal.json").write_text(json.dumps(summary, indent=2))
    from .expert import integrate_forward
    import numpy as _np
    tau = _np.linspace(0.0, 1.0, 400)
    y0 = _np.concatenate([sol.initial_state_nd, sol.initial_costate])
    stack = integrate_forward(cfg, sol.objective, sol.eps, y0[None, :], [sol.tof_nd],
                              t_eval_tau=tau)[:, 0, :]
    from .expert import control_table
    from .propagation import TrajectoryRecord, Termination
    rec = TrajectoryRecord(tau * sol.tof_nd, stack[:, 0:7],
                           control_table(cfg, stack[:, 0:7], stack[:, 7:14],
                                         sol.objective, sol.eps),
                           Termination("time_limit", sol.tof_nd))
    rec.to_csv(outdir / "trajectory.csv", cfg)
    _write_manifest(outdir, "solve-nominal", args, {"summary": summary})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_gen_experts(args) -> int:
    cfg = _scenario(args)
    nominal = (ExtremalSolution.load(args.nominal) if args.nominal
               else solve_nominal(cfg, seed=args.seed, attempts=args.attempts))
    if args.bundles:
        bundles = []
        for part in args.bundles.split(","):
            count, mag = part.split("@")
            bundles.append(BundleSpec(int(count), float(mag)))
    else:
        bundles = default_bundles(cfg.name, scale=args.scale)
    dataset = bgoe_generate(cfg, nominal, bundles, seed=args.seed,
                            samples_per_traj=args.samples_per_traj)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset.save(outdir / "experts")
    nominal.save(outdir / "extremal.json")
    if args.csv:
        dataset.to_csv(outdir / "experts.csv")
    _write_manifest(outdir, "gen-experts", args, {
        "n_samples": dataset.n_samples,
        "n_trajectories": dataset.n_trajectories,
        "discarded": dataset.discarded,
    })
    print(f"wrote {dataset.n_samples} samples "
          f"({dataset.n_trajectories} trajectories, {dataset.discarded} discarded)")
    return EXIT_OK


def cmd_train_bc(args) -> int:
    from .expert import ExpertDataset
    cfg = _scenario(args)
    dataset = ExpertDataset.load(args.dataset)
    bc_cfg = BcConfig.for_scenario(cfg.name, seed=args.seed)
    if args.epochs:
        bc_cfg.epochs = args.epochs
    if args.lr:
        bc_cfg.lr = args.lr
    spec = actor_spec(cfg.objective, trainer="bc", omega0=args.omega0)
    result = train_bc(dataset, spec, bc_cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outdir / "policy", spec, result.params, seed=args.seed,
                    normalization={"length": cfg.unit_scales.length,
                                   "time": cfg.unit_scales.time,
                                   "mass": cfg.unit_scales.mass},
                    metadata={"trainer": "bc", "scenario": cfg.name,
                              "best_epoch": result.best_epoch,
                              "best_val_loss": float(result.val_loss[result.best_epoch])})
    result.history_csv(outdir / "loss.csv")
    _write_manifest(outdir, "train-bc", args, {
        "best_epoch": result.best_epoch,
        "best_val_loss": float(result.val_loss[result.best_epoch]),
    })
    print(f"best validation loss {result.val_loss[result.best_epoch]:.3e} "
          f"at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    cfg = _scenario(args)
    ppo = PpoConfig(seed=args.seed)
    if args.batch_episodes:
        ppo.batch_episodes = args.batch_episodes
    result = train_rl(cfg, ppo, budget_steps=args.budget, verbose=args.verbose)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outdir / "policy", result.actor_spec, result.actor_params,
                    seed=args.seed,
                    normalization={"length": cfg.unit_scales.length,
                                   "time": cfg.unit_scales.time,
                                   "mass": cfg.unit_scales.mass},
                    metadata={"trainer": "rl", "scenario": cfg.name,
                              "env_steps": result.env_steps})
    save_checkpoint(outdir / "critic", result.critic_spec, result.critic_params,
                    seed=args.seed, metadata={"role": "critic"})
    result.log_csv(outdir / "training.csv")
    _write_manifest(outdir, "train-rl", args, {
        "env_steps": result.env_steps,
        "best_eval": None if result.best_eval is None else vars(result.best_eval),
    })
    if result.best_eval is not None:
        print(f"best deterministic evaluation: {result.best_eval.pct_full:.1f}% "
              f"full convergence after {result.best_eval.env_steps} steps")
    return EXIT_OK


def cmd_eval_nominal(args) -> int:
    cfg = _scenario(args)
    spec, params, _ = load_checkpoint(args.checkpoint)
    reference = ExtremalSolution.load(args.reference) if args.reference else None
    mode = "zoh" if args.zoh else "continuous"
    report = evaluate_nominal(cfg, spec, params, mode=mode, zoh_dt=args.zoh,
                              reference=reference)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report.save(outdir / "nominal_report.json")
    _write_manifest(outdir, "eval-nominal", args, {"report": report.to_dict()})
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_eval_mc(args) -> int:
    cfg = _scenario(args)
    spec, params, _ = load_checkpoint(args.checkpoint)
    model = default_error_model(cfg.name)
    if args.error_scale != 1.0:
        model = model.scaled(args.error_scale)
    report = run_mc(cfg, spec, params, args.errors, model=model, n=args.n,
                    seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report.to_json(outdir / "mc_report.json")
    report.samples_csv(outdir / "mc_samples.csv")
    report.scatter_csv(outdir / "mc_terminal_states.csv")
    _write_manifest(outdir, "eval-mc", args, {"aggregates": report.aggregates()})
    print(json.dumps(report.aggregates(), indent=2))
    return EXIT_OK


def cmd_propagate(args) -> int:
    cfg = _scenario(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        from .evaluation import propagate_policy
        spec, params, _ = load_checkpoint(args.checkpoint)
        rec = propagate_policy(cfg, spec, params)
    else:
        horizon = cfg.tof_limit_nd if np.isfinite(cfg.tof_limit) else cfg.eval_horizon_nd
        rec = propagate(cfg, cfg.initial_state_nd, constant_law(COAST),
                        [terminal_event(cfg)], (0.0, horizon))
    rec.to_csv(outdir / "trajectory.csv", cfg)
    _write_manifest(outdir, "propagate", args, {"termination": rec.termination.kind})
    print(f"terminated: {rec.termination.kind} at t = {rec.t_final * cfg.unit_scales.time:.6g} s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcnetlab",
        description="Train and evaluate neural guidance policies on "
                    "continuous-thrust spacecraft scenarios.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help=f"preset ({', '.join(PRESET_NAMES)}) or config file")
            p.add_argument("--config", help="JSON scenario config overriding the preset")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--out", default="runs/latest", help="output directory")

    p = sub.add_parser("solve-nominal", help="solve the nominal optimal-control problem")
    add_common(p)
    p.add_argument("--attempts", type=int, default=24)
    p.set_defaults(func=cmd_solve_nominal)

    p = sub.add_parser("gen-experts", help="generate expert bundles backward from a nominal")
    add_common(p)
    p.add_argument("--nominal", help="extremal.json from solve-nominal")
    p.add_argument("--bundles", help="explicit spec, e.g. '1000@1e-3,1000@1e-2'")
    p.add_argument("--scale", type=int, default=100,
                   help="desk-scale divisor of the published bundle sizes")
    p.add_argument("--samples-per-traj", type=int, default=100)
    p.add_argument("--attempts", type=int, default=24)
    p.add_argument("--csv", action="store_true", help="also dump a CSV copy")
    p.set_defaults(func=cmd_gen_experts)

    p = sub.add_parser("train-bc", help="behavioural cloning from an expert dataset")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--omega0", type=float, default=30.0)
    p.set_defaults(func=cmd_train_bc)

    p = sub.add_parser("train-rl", help="on-policy training with reward redistribution")
    add_common(p)
    p.add_argument("--budget", type=int, required=True, help="environment-step budget")
    p.add_argument("--batch-episodes", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval-nominal", help="deterministic evaluation of a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--zoh", type=float, help="hold duration in seconds")
    p.add_argument("--reference", help="extremal.json for optimality residuals")
    p.set_defaults(func=cmd_eval_nominal)

    p = sub.add_parser("eval-mc", help="Monte Carlo campaign with injected errors")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--errors", required=True, choices=ERROR_KINDS)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--error-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_eval_mc)

    p = sub.add_parser("propagate", help="dump one trajectory as CSV")
    add_common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_propagate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GcnetLabError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
