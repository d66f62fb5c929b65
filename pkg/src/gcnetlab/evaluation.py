"""Nominal and Monte Carlo evaluation of trained policies with error injection.

Error realizations are pre-generated per (seed, sample index) before any
propagation, so two different checkpoints evaluated with the same seed
consume bitwise-identical streams, and zero-magnitude models reproduce the
nominal run exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dynamics import (
    DAY_S,
    OBJECTIVE_TIME,
    ScenarioConfig,
    SpacecraftState,
)
from .errors import ConfigError
from .expert import ExtremalSolution
from .network import MlpSpec, make_policy_fn, map_raw_to_command
from .propagation import (
    TERM_DIVERGENCE,
    TERM_EVENT,
    TrajectoryRecord,
    check_convergence,
    network_law,
    propagate,
    raw_law,
    stitch_records,
    terminal_event,
)

ERROR_KINDS = ("ic", "zoh", "od", "ex")

# How the thrust-execution "uniform spherical" error is realized; recorded
# in every report.
EX_INTERPRETATION = ("direction tilted about a uniform random axis perpendicular "
                     "to the thrust by an angle uniform in [0, dT rad]; magnitude "
                     "scaled by uniform [1-dT, 1+dT]")


@dataclass(frozen=True)
class ErrorModel:
    """Injected uncertainty magnitudes (SI), per error family."""

    ic_dr: float = 0.0          # m, uniform half-width per component
    ic_dv: float = 0.0          # m/s
    ic_dm: float = 0.0          # fraction of m0
    zoh_dt: float = 0.0         # s, control hold duration
    zoh_p: float = 0.0          # missed-thrust probability per hold step
    zoh_outage: float = 0.0     # s, outage duration
    od_dr: float = 0.0          # m, state-knowledge error half-width
    od_dv: float = 0.0          # m/s
    od_dt: float = 0.0          # s, redraw cadence
    ex_frac: float = 0.0        # fractional thrust error
    ex_dt: float = 0.0          # s, redraw cadence

    def __post_init__(self):
        if not 0.0 <= self.zoh_p <= 1.0:
            raise ConfigError("missed-thrust probability must lie in [0, 1]")
        for name in ("ic_dr", "ic_dv", "ic_dm", "zoh_outage", "od_dr", "od_dv", "ex_frac"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be nonnegative")

    def scaled(self, factor: float) -> "ErrorModel":
        """Scale every magnitude (cadences and hold durations unchanged)."""
        return ErrorModel(
            ic_dr=self.ic_dr * factor, ic_dv=self.ic_dv * factor,
            ic_dm=self.ic_dm * factor, zoh_dt=self.zoh_dt,
            zoh_p=self.zoh_p * factor, zoh_outage=self.zoh_outage,
            od_dr=self.od_dr * factor, od_dv=self.od_dv * factor, od_dt=self.od_dt,
            ex_frac=self.ex_frac * factor, ex_dt=self.ex_dt,
        )


_ERROR_TABLE = {
    "gtoc11": ErrorModel(ic_dr=5.0e8, ic_dv=250.0, ic_dm=0.0,
                         zoh_dt=1.0 * DAY_S, zoh_p=1.0 / 365.25, zoh_outage=7.0 * DAY_S,
                         od_dr=5.0e7, od_dv=25.0, od_dt=28.0 * DAY_S,
                         ex_frac=0.10, ex_dt=28.0 * DAY_S),
    "earth-mars": ErrorModel(ic_dr=1.0e8, ic_dv=50.0, ic_dm=0.0,
                             zoh_dt=1.0 * DAY_S, zoh_p=1.0 / 365.25, zoh_outage=7.0 * DAY_S,
                             od_dr=1.0e7, od_dv=5.0, od_dt=28.0 * DAY_S,
                             ex_frac=0.10, ex_dt=28.0 * DAY_S),
    "psyche": ErrorModel(ic_dr=165.0, ic_dv=8.5, ic_dm=0.10,
                         zoh_dt=15.0, zoh_p=1.0 / 15.0, zoh_outage=60.0,
                         od_dr=25.0, od_dv=1.0, od_dt=60.0,
                         ex_frac=0.05, ex_dt=60.0),
    "67p": ErrorModel(ic_dr=4500.0, ic_dv=0.5, ic_dm=0.05,
                      zoh_dt=60.0, zoh_p=1.0 / 90.0, zoh_outage=300.0,
                      od_dr=5.0, od_dv=0.1, od_dt=300.0,
                      ex_frac=0.05, ex_dt=300.0),
}


def default_error_model(scenario_name: str) -> ErrorModel:
    try:
        return _ERROR_TABLE[scenario_name]
    except KeyError:
        raise ConfigError(f"no default error model for scenario {scenario_name!r}") from None


def perturb_initial_state(cfg: ScenarioConfig, model: ErrorModel,
                          rng: np.random.Generator) -> np.ndarray:
    """Nominal start plus uniform per-component IC errors (nondimensional)."""
    s = cfg.unit_scales
    x = cfg.initial_state_nd.as_vector().copy()
    x[0:3] += rng.uniform(-1.0, 1.0, 3) * (model.ic_dr / s.length)
    x[3:6] += rng.uniform(-1.0, 1.0, 3) * (model.ic_dv / s.velocity)
    x[6] *= 1.0 + rng.uniform(-1.0, 1.0) * model.ic_dm
    return x


# ---------------------------------------------------------------------------
# Nominal evaluation
# ---------------------------------------------------------------------------

@dataclass
class NominalReport:
    scenario: str
    mode: str
    tof: float                      # s
    m_f_fraction: float
    e_r: float                      # m
    e_v: float                      # m/s
    position_converged: bool
    full_converged: bool
    termination: str
    optimality_residual: float = math.nan     # s (time) or kg (fuel), vs reference
    optimality_residual_pct: float = math.nan

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _policy_law(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray):
    policy = make_policy_fn(spec, params)
    x0 = cfg.initial_state_nd.as_vector()
    toward = cfg.target_r_nd - x0[0:3]
    fb = toward / np.linalg.norm(toward)
    return network_law(policy, cfg.objective, fallback_direction=fb), policy


def _horizon(cfg: ScenarioConfig) -> float:
    if math.isfinite(cfg.tof_limit):
        return cfg.tof_limit_nd
    if cfg.eval_horizon > 0:
        return cfg.eval_horizon_nd
    raise ConfigError("scenario needs a finite tof limit or eval horizon")


def propagate_policy(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray,
                     rtol: float = 1e-12, atol: float = 1e-12,
                     initial_state: np.ndarray | None = None) -> TrajectoryRecord:
    """Continuous propagation with the policy evaluated inside the dynamics."""
    law, _ = _policy_law(cfg, spec, params)
    x0 = cfg.initial_state_nd if initial_state is None \
        else SpacecraftState.from_vector(initial_state)
    return propagate(cfg, x0, law, [terminal_event(cfg)], (0.0, _horizon(cfg)),
                     rtol=rtol, atol=atol)


def propagate_policy_zoh(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray,
                         zoh_dt: float, rtol: float = 1e-12, atol: float = 1e-12,
                         initial_state: np.ndarray | None = None,
                         schedule: "_Schedule | None" = None,
                         error_kind: str | None = None,
                         model: ErrorModel | None = None) -> TrajectoryRecord:
    """Segmented propagation holding the policy output over each segment.

    With a realization schedule, injects missed-thrust outages (zoh),
    state-knowledge corruption of the policy input (od), or thrust
    execution errors (ex).
    """
    policy = make_policy_fn(spec, params)
    s = cfg.unit_scales
    dt = zoh_dt / s.time
    horizon = _horizon(cfg)
    events = [terminal_event(cfg)]
    x = (cfg.initial_state_nd.as_vector() if initial_state is None
         else np.asarray(initial_state, dtype=float).copy())
    t = 0.0
    fb = None
    pieces = []
    seg = 0
    outage_until = -1.0
    od_offset = np.zeros(6)
    od_every = max(1, int(round(model.od_dt / zoh_dt))) if model and model.od_dt else 1
    ex_every = max(1, int(round(model.ex_dt / zoh_dt))) if model and model.ex_dt else 1

    while t < horizon - 1e-12 and seg < 2_000_000:
        if schedule is not None and error_kind == "od" and seg % od_every == 0:
            od_offset = schedule.od_offsets[seg // od_every]
        known = x.copy()
        if schedule is not None and error_kind == "od":
            known[0:3] += od_offset[0:3] * (model.od_dr / s.length)
            known[3:6] += od_offset[3:6] * (model.od_dv / s.velocity)
        features = known[0:6] if cfg.objective == OBJECTIVE_TIME else known[0:7]
        raw = policy(features)
        if fb is None:
            toward = cfg.target_r_nd - x[0:3]
            fb = toward / np.linalg.norm(toward)
        direction, throttle = map_raw_to_command(raw, cfg.objective, fallback_direction=fb)
        fb = direction

        if schedule is not None and error_kind == "zoh":
            if schedule.zoh_fires[seg]:
                outage_until = t + model.zoh_outage / s.time
            if t < outage_until:
                throttle = 0.0
        if schedule is not None and error_kind == "ex" and model.ex_frac > 0.0:
            psi, tilt, scale = schedule.ex_draws[seg // ex_every]
            direction = _tilt(direction, psi, tilt * model.ex_frac)
            throttle = throttle * (1.0 + (2.0 * scale - 1.0) * model.ex_frac)

        t_end = min(t + dt, horizon)
        rec = propagate(cfg, SpacecraftState.from_vector(x), raw_law(direction, throttle),
                        events, (t, t_end), rtol=rtol, atol=atol)
        pieces.append(rec)
        x = rec.states[-1].copy()
        t = rec.t_final
        seg += 1
        if rec.termination.kind in (TERM_EVENT, TERM_DIVERGENCE):
            break
    return stitch_records(pieces)


def _tilt(direction: np.ndarray, psi: float, angle: float) -> np.ndarray:
    """Rotate ``direction`` by ``angle`` about a perpendicular axis at phase psi."""
    d = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    axis = math.cos(psi) * e1 + math.sin(psi) * e2
    # Rodrigues rotation
    return (d * math.cos(angle) + np.cross(axis, d) * math.sin(angle)
            + axis * float(axis @ d) * (1.0 - math.cos(angle)))


def evaluate_nominal(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray,
                     mode: str = "continuous", zoh_dt: float | None = None,
                     reference: ExtremalSolution | None = None,
                     rtol: float = 1e-12) -> NominalReport:
    """Deterministic propagation from the nominal start, with event termination."""
    if mode == "continuous":
        rec = propagate_policy(cfg, spec, params, rtol=rtol, atol=rtol)
    elif mode == "zoh":
        if zoh_dt is None or zoh_dt <= 0.0:
            raise ConfigError("zoh mode needs a positive hold duration")
        rec = propagate_policy_zoh(cfg, spec, params, zoh_dt, rtol=rtol, atol=rtol)
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    return summarize_record(cfg, rec, mode=mode, reference=reference)


def summarize_record(cfg: ScenarioConfig, rec: TrajectoryRecord, mode: str = "continuous",
                     reference: ExtremalSolution | None = None) -> NominalReport:
    conv = check_convergence(rec, cfg)
    s = cfg.unit_scales
    tof = rec.t_final * s.time
    m_f = float(rec.states[-1, 6])
    report = NominalReport(
        scenario=cfg.name, mode=mode, tof=tof, m_f_fraction=m_f,
        e_r=conv.e_r, e_v=conv.e_v,
        position_converged=conv.position_converged,
        full_converged=conv.full_converged,
        termination=rec.termination.kind,
    )
    if reference is not None:
        if cfg.objective == OBJECTIVE_TIME:
            ref = reference.tof_nd * s.time
            report.optimality_residual = tof - ref
            report.optimality_residual_pct = 100.0 * (tof - ref) / ref
        else:
            ref_mass = reference.m_f * s.mass
            report.optimality_residual = ref_mass - m_f * s.mass
            report.optimality_residual_pct = 100.0 * (ref_mass - m_f * s.mass) / ref_mass
    return report


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass
class _Schedule:
    """Pre-generated error realizations for one sample; policy-independent."""

    ic_dr_u: np.ndarray          # (3,) in [-1, 1]
    ic_dv_u: np.ndarray
    ic_dm_u: float
    zoh_fires: np.ndarray        # (n_seg,) bool
    od_offsets: np.ndarray       # (n_od, 6) in [-1, 1]
    ex_draws: np.ndarray         # (n_ex, 3): psi, tilt fraction, scale u


def _make_schedule(cfg: ScenarioConfig, model: ErrorModel, seed: int,
                   sample_idx: int) -> _Schedule:
    rng = np.random.default_rng([seed, sample_idx])
    horizon = _horizon(cfg) * cfg.unit_scales.time
    dt = model.zoh_dt if model.zoh_dt > 0 else horizon
    n_seg = int(math.ceil(horizon / dt)) + 2
    n_od = n_seg if not model.od_dt else int(math.ceil(horizon / model.od_dt)) + 2
    n_ex = n_seg if not model.ex_dt else int(math.ceil(horizon / model.ex_dt)) + 2
    return _Schedule(
        ic_dr_u=rng.uniform(-1.0, 1.0, 3),
        ic_dv_u=rng.uniform(-1.0, 1.0, 3),
        ic_dm_u=float(rng.uniform(-1.0, 1.0)),
        zoh_fires=rng.random(n_seg) < model.zoh_p,
        od_offsets=rng.uniform(-1.0, 1.0, (n_od, 6)),
        ex_draws=np.column_stack([
            rng.uniform(0.0, 2.0 * math.pi, n_ex),
            rng.uniform(0.0, 1.0, n_ex),
            rng.random(n_ex),
        ]),
    )


@dataclass
class McReport:
    scenario: str
    error_kind: str
    n_samples: int
    seed: int
    model: dict
    converged_r: np.ndarray
    converged_x: np.ndarray
    e_r: np.ndarray              # m
    e_v: np.ndarray              # m/s
    objective: np.ndarray        # tof s (time) or m_f fraction (fuel)
    termination: list
    terminal_r: np.ndarray       # (n, 3) m
    terminal_v: np.ndarray       # (n, 3) m/s
    ex_interpretation: str = EX_INTERPRETATION

    @property
    def pct_position(self) -> float:
        return 100.0 * float(np.mean(self.converged_r))

    @property
    def pct_full(self) -> float:
        return 100.0 * float(np.mean(self.converged_x))

    def aggregates(self) -> dict:
        return {
            "pct_position_converged": self.pct_position,
            "pct_full_converged": self.pct_full,
            "objective_mean": float(np.mean(self.objective)),
            "objective_std": float(np.std(self.objective)),
            "objective_min": float(np.min(self.objective)),
            "objective_max": float(np.max(self.objective)),
            "e_r_mean": float(np.mean(self.e_r)),
            "e_v_mean": float(np.mean(self.e_v)),
        }

    def to_json(self, path) -> None:
        doc = {
            "scenario": self.scenario,
            "error_kind": self.error_kind,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "model": self.model,
            "ex_interpretation": self.ex_interpretation,
            "aggregates": self.aggregates(),
            "samples": {
                "converged_r": self.converged_r.tolist(),
                "converged_x": self.converged_x.tolist(),
                "e_r": self.e_r.tolist(),
                "e_v": self.e_v.tolist(),
                "objective": self.objective.tolist(),
                "termination": self.termination,
            },
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    def samples_csv(self, path) -> None:
        header = "sample,converged_r,converged_x,e_r,e_v,objective,termination"
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(self.n_samples):
                fh.write(f"{i},{int(self.converged_r[i])},{int(self.converged_x[i])},"
                         f"{self.e_r[i]},{self.e_v[i]},{self.objective[i]},"
                         f"{self.termination[i]}\n")

    def scatter_csv(self, path) -> None:
        """Terminal-state dump for dispersion plots (SI)."""
        header = "sample,rx,ry,rz,vx,vy,vz"
        data = np.column_stack([np.arange(self.n_samples), self.terminal_r, self.terminal_v])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


def run_mc(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray, error_kind: str,
           model: ErrorModel | None = None, n: int = 200, seed: int = 0,
           rtol: float = 1e-10) -> McReport:
    """Monte Carlo dispersion campaign for one error family.

    Per-sample realizations are keyed by (seed, sample index) only, so
    reports are reproducible and different policies see identical error
    streams. Failed propagations count as non-converged.
    """
    if error_kind not in ERROR_KINDS:
        raise ConfigError(f"unknown error kind {error_kind!r}; use one of {ERROR_KINDS}")
    if model is None:
        model = default_error_model(cfg.name)
    s = cfg.unit_scales
    conv_r = np.zeros(n, dtype=bool)
    conv_x = np.zeros(n, dtype=bool)
    e_r = np.zeros(n)
    e_v = np.zeros(n)
    objective = np.zeros(n)
    terminal_r = np.zeros((n, 3))
    terminal_v = np.zeros((n, 3))
    terminations = []

    for i in range(n):
        sched = _make_schedule(cfg, model, seed, i)
        x0 = cfg.initial_state_nd.as_vector().copy()
        if error_kind == "ic":
            x0[0:3] += sched.ic_dr_u * (model.ic_dr / s.length)
            x0[3:6] += sched.ic_dv_u * (model.ic_dv / s.velocity)
            x0[6] *= 1.0 + sched.ic_dm_u * model.ic_dm
            rec = propagate_policy(cfg, spec, params, rtol=rtol, atol=rtol,
                                   initial_state=x0)
        else:
            rec = propagate_policy_zoh(cfg, spec, params, model.zoh_dt, rtol=rtol,
                                       atol=rtol, initial_state=x0, schedule=sched,
                                       error_kind=error_kind, model=model)
        conv = check_convergence(rec, cfg)
        conv_r[i] = conv.position_converged
        conv_x[i] = conv.full_converged
        e_r[i] = conv.e_r
        e_v[i] = conv.e_v
        objective[i] = (rec.t_final * s.time if cfg.objective == OBJECTIVE_TIME
                        else float(rec.states[-1, 6]))
        terminal_r[i] = rec.states[-1, 0:3] * s.length
        terminal_v[i] = rec.states[-1, 3:6] * s.velocity
        terminations.append(rec.termination.kind)

    return McReport(
        scenario=cfg.name, error_kind=error_kind, n_samples=n, seed=seed,
        model=asdict(model), converged_r=conv_r, converged_x=conv_x,
        e_r=e_r, e_v=e_v, objective=objective, termination=terminations,
        terminal_r=terminal_r, terminal_v=terminal_v,
    )
