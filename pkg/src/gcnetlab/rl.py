"""On-policy training: noisy network-in-the-dynamics rollouts, terminal rewards,
time-proportional reward redistribution, and clipped-surrogate updates.

Per rollout step a raw-space Gaussian perturbation is drawn once and held
over the step, while the policy mean is re-evaluated at integrator
frequency inside the right-hand side, decoupling control frequency from
action frequency. Terminal rewards are redistributed across retained
steps in proportion to each step's time span, making returns a function
of elapsed time rather than step count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    OBJECTIVE_FUEL,
    OBJECTIVE_TIME,
    ScenarioConfig,
    SpacecraftState,
)
from .errors import GcnetLabError
from . import lambert as lambert_mod
from .network import MlpSpec, backward, forward, init_params, make_policy_fn, split_params
from .propagation import (
    TERM_DIVERGENCE,
    TERM_EVENT,
    network_law,
    propagate,
    terminal_event,
)
from .bc import Adam

FAILURE_PENALTY = -10.0
_ER_RATIO_CAP = 1e12
_LOG2PI = math.log(2.0 * math.pi)


@dataclass
class PpoConfig:
    lr: float = 3e-4
    critic_lr: float = 3e-4
    clip: float = 0.2
    sigma0: float = 0.1
    batch_episodes: int = 25
    epochs_per_update: int = 10
    grad_clip: float = 0.5
    normalize_advantages: bool = True
    return_mode: str = "redistributed"    # | 'discounted'
    gamma: float = 0.99                   # discounted mode only
    eval_every: int = 10
    eval_samples: int = 8
    train_ic_noise: bool = True
    rtol: float = 1e-9
    atol: float = 1e-9
    seed: int = 0


@dataclass
class RolloutStep:
    t: float
    dt: float
    state: np.ndarray                 # x_i at the step start
    noise: np.ndarray                 # 4-vector, held over the step
    action: np.ndarray                # mean(x_i) + noise on the active dims
    mean: np.ndarray                  # raw head outputs at x_i
    log_prob: float
    reward: float = 0.0               # post-redistribution
    ret: float = 0.0
    value: float = 0.0


@dataclass
class Episode:
    steps: list
    states: np.ndarray                # (n_steps + 1, 7) boundary states
    times: np.ndarray                 # (n_steps + 1,)
    termination: str                  # 'event' | 'budget' | 'time_limit' | 'divergence'
    n_retained: int = 0
    r_x: float = 0.0
    r_o: float = 0.0
    e_r: float = 0.0                  # nondimensional diagnostics at truncation
    e_v: float = 0.0
    m_f: float = 1.0
    t_n: float = 0.0
    lambert_fallback: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def retained(self) -> list:
        return self.steps[: self.n_retained]


# ---------------------------------------------------------------------------
# Terminal rewards
# ---------------------------------------------------------------------------

def reward_time(e_r: float, e_v: float, cfg: ScenarioConfig,
                dimensionless: bool = True) -> float:
    """Log-barrier terminal reward; 0 once both errors are inside the box.

    The velocity tolerance is loosened linearly with the position error so
    the position constraint dominates far from the target.
    """
    c_r = cfg.c_r_nd if dimensionless else cfg.c_r
    c_v = cfg.c_v_nd if dimensionless else cfg.c_v
    if e_r <= c_r and e_v <= c_v:
        return 0.0
    term1 = -math.log(max(e_r / c_r, 1.0))
    ratio = (e_v / c_v) * min(c_r / max(e_r, 1e-300), _ER_RATIO_CAP)
    term2 = -math.log(max(ratio, 1.0))
    return term1 + term2


def objective_time(t_n: float, t_ref: float) -> float:
    """Elapsed-time penalty -t_N/t_ref against a fixed per-scenario reference."""
    return -t_n / t_ref


def objective_fuel(m_f: float, vex: float) -> float:
    """Continuous-thrust delta-v spent, negated: -vex*|ln(m_f/m_0)| (m_0 = 1)."""
    return -vex * abs(math.log(m_f))


def reward_fuel(cfg: ScenarioConfig, end_state: np.ndarray, alpha_l: float = 0.1):
    """Terminal constraint reward in delta-v units via a short connecting arc.

    Picks the arc duration from :func:`lambert.dt_grid` minimizing |r_x|.
    Falls back to the time reward scaled into velocity units when every
    grid point fails; the flag is reported. Returns (r_x, used_fallback,
    dt_l).
    """
    y = np.asarray(end_state, dtype=float)
    r, v, m_f = y[0:3], y[3:6], float(y[6])
    omega = cfg.omega_nd
    target_r = cfg.target_r_nd
    target_v = cfg.target_v_nd
    if cfg.frame == "rotating" and omega != 0.0:
        # Inertial-equivalent states at the termination epoch (two-body
        # dynamics are rotation-invariant, so the t=0 alignment suffices).
        v = v + omega * np.array([-r[1], r[0], 0.0])
        target_v = target_v + omega * np.array([-target_r[1], target_r[0], 0.0])
    vex = cfg.vex_nd
    thrust = cfg.thrust_nd
    grid = lambert_mod.dt_grid(cfg.c_v_nd, m_f, thrust, alpha_l=alpha_l)
    best = None
    for dt_l in grid:
        try:
            dv1, dv2 = lambert_mod.lambert_dvs(r, v, m_f, target_r, target_v,
                                               float(dt_l), cfg.mu_nd)
        except GcnetLabError:
            continue
        except ValueError:
            continue
        m2 = m_f * math.exp(-dv1 / vex) if math.isfinite(vex) else m_f
        dv1_max = thrust / m_f * dt_l
        dv2_max = thrust / m2 * dt_l
        rx = -(1.0 + math.log(max(dv1 / dv1_max, 1.0))) * dv1 \
             - (1.0 + math.log(max(dv2 / dv2_max, 1.0))) * dv2
        if best is None or abs(rx) < abs(best[0]):
            best = (rx, float(dt_l))
    if best is not None:
        return best[0], False, best[1]
    e_r = float(np.linalg.norm(np.asarray(end_state[0:3]) - cfg.target_r_nd))
    e_v = float(np.linalg.norm(np.asarray(end_state[3:6]) - cfg.target_v_nd))
    return reward_time(e_r, e_v, cfg) * cfg.c_v_nd, True, 0.0


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def _log_prob(action, mean, sigma):
    z = (action - mean) / sigma
    return float(-0.5 * np.sum(z * z) - np.sum(np.log(sigma)) - 0.5 * z.size * _LOG2PI)


def rollout_episode(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray,
                    rng: np.random.Generator, noise_scale: float = 1.0,
                    initial_state: np.ndarray | None = None,
                    max_steps: int | None = None, dt: float | None = None,
                    rtol: float = 1e-9, atol: float = 1e-9) -> Episode:
    """Roll one episode with per-step raw-space noise held over each step.

    ``noise_scale = 0`` reproduces the deterministic segmented propagation
    bitwise (the zero offset leaves every right-hand-side evaluation
    unchanged).
    """
    objective = cfg.objective
    policy = make_policy_fn(spec, params)
    _, log_std = split_params(spec, params)
    if log_std.size:
        sigma4 = np.exp(log_std.copy())
    else:
        sigma4 = np.full(4, 0.1)
    act_dim = spec.output_dim
    dt = cfg.rl_dt_nd if dt is None else dt
    max_steps = cfg.rl_max_steps if max_steps is None else max_steps
    if dt <= 0.0 or max_steps < 1:
        raise GcnetLabError("scenario has no rollout step configuration")
    t_cap = cfg.tof_limit_nd if math.isfinite(cfg.tof_limit) else math.inf
    events = [terminal_event(cfg)]

    x = cfg.initial_state_nd.as_vector() if initial_state is None \
        else np.asarray(initial_state, dtype=float).copy()
    t = 0.0
    steps = []
    bounds_t = [0.0]
    bounds_x = [x.copy()]
    termination = "budget"

    for _ in range(max_steps):
        noise4 = rng.normal(size=4) * sigma4 * noise_scale
        features = x[0:6] if objective == OBJECTIVE_TIME else x[0:7]
        mean = policy(features)
        action = mean + noise4[:act_dim]
        logp = _log_prob(action, mean, sigma4[:act_dim] if noise_scale > 0 else
                         np.maximum(sigma4[:act_dim], 1e-12))
        to_target = cfg.target_r_nd - x[0:3]
        nrm = np.linalg.norm(to_target)
        fallback = to_target / nrm if nrm > 0 else None
        law = network_law(policy, objective, offset=noise4, fallback_direction=fallback)
        t_end = min(t + dt, t_cap) if math.isfinite(t_cap) else t + dt
        rec = propagate(cfg, SpacecraftState.from_vector(x), law, events,
                        (t, t_end), rtol=rtol, atol=atol)
        dt_actual = rec.t_final - t
        steps.append(RolloutStep(t=t, dt=dt_actual, state=x.copy(), noise=noise4,
                                 action=action, mean=mean, log_prob=logp))
        x = rec.states[-1].copy()
        t = rec.t_final
        bounds_t.append(t)
        bounds_x.append(x.copy())
        if rec.termination.kind == TERM_EVENT:
            termination = "event"
            break
        if rec.termination.kind == TERM_DIVERGENCE:
            termination = "divergence"
            break
        if math.isfinite(t_cap) and t >= t_cap - 1e-12:
            termination = "time_limit"
            break

    return Episode(steps=steps, states=np.asarray(bounds_x), times=np.asarray(bounds_t),
                   termination=termination)


# ---------------------------------------------------------------------------
# Truncation and redistribution
# ---------------------------------------------------------------------------

def truncate_and_redistribute(episode: Episode, cfg: ScenarioConfig,
                              mode: str = "redistributed", gamma: float = 1.0) -> Episode:
    """Retroactively terminate at the closest approach and spread the reward.

    Step i < N receives r_o*dt_i/t_N; step N receives r_x plus its own r_o
    share, so the redistributed rewards sum to exactly r_x + r_o and the
    return at a step depends only on its start time.
    """
    if episode.n_steps == 0:
        raise GcnetLabError("empty episode")
    if episode.termination in ("event", "divergence"):
        n = episode.n_steps
    else:
        e_r_bounds = np.linalg.norm(episode.states[1:, 0:3] - cfg.target_r_nd[None, :], axis=1)
        n = int(np.argmin(e_r_bounds)) + 1
    end = episode.states[n]
    t_n = float(episode.times[n])
    if t_n <= 0.0:
        raise GcnetLabError("degenerate episode: zero elapsed time")

    e_r = float(np.linalg.norm(end[0:3] - cfg.target_r_nd))
    e_v = float(np.linalg.norm(end[3:6] - cfg.target_v_nd))
    m_f = float(end[6])
    fallback = False
    if cfg.objective == OBJECTIVE_TIME:
        r_x = reward_time(e_r, e_v, cfg)
        r_o = objective_time(t_n, cfg.t_ref_nd)
    else:
        r_x, fallback, _ = reward_fuel(cfg, end)
        r_o = objective_fuel(m_f, cfg.vex_nd)
    if episode.termination == "divergence":
        r_x += FAILURE_PENALTY

    episode.n_retained = n
    episode.r_x, episode.r_o = r_x, r_o
    episode.e_r, episode.e_v, episode.m_f, episode.t_n = e_r, e_v, m_f, t_n
    episode.lambert_fallback = fallback

    retained = episode.steps[:n]
    if mode == "redistributed":
        for i, step in enumerate(retained):
            step.reward = r_o * step.dt / t_n
            if i == n - 1:
                step.reward += r_x
            step.ret = r_x + r_o * (t_n - step.t) / t_n
    elif mode == "discounted":
        for step in retained:
            step.reward = 0.0
        retained[-1].reward = r_x + r_o
        acc = 0.0
        for step in reversed(retained):
            acc = step.reward + gamma * acc
            step.ret = acc
    else:
        raise GcnetLabError(f"unknown return mode {mode!r}")
    return episode


# ---------------------------------------------------------------------------
# Clipped-surrogate update
# ---------------------------------------------------------------------------

@dataclass
class UpdateDiagnostics:
    policy_loss: float
    value_loss: float
    mean_return: float
    mean_ratio: float
    clip_fraction: float
    rejected: bool = False


def ppo_update(episodes: list, actor_sp: MlpSpec, actor_params: np.ndarray,
               critic_sp: MlpSpec, critic_params: np.ndarray, cfg: PpoConfig,
               actor_opt: Adam, critic_opt: Adam):
    """One clipped-surrogate update over a batch of redistributed episodes.

    Returns (actor_params, critic_params, diagnostics). A batch containing
    non-finite ratios or advantages is rejected untouched.
    """
    xs, actions, old_logp, rets = [], [], [], []
    for ep in episodes:
        for step in ep.retained:
            feat = step.state[0:6] if actor_sp.input_dim == 6 else step.state[0:7]
            xs.append(feat)
            actions.append(step.action)
            old_logp.append(step.log_prob)
            rets.append(step.ret)
    x = np.asarray(xs)
    a = np.asarray(actions)
    old_logp = np.asarray(old_logp)
    rets = np.asarray(rets)
    n, act_dim = a.shape

    values = forward(critic_sp, critic_params, x)[:, 0]
    adv = rets - values
    if not (np.all(np.isfinite(adv)) and np.all(np.isfinite(old_logp))):
        return actor_params, critic_params, UpdateDiagnostics(
            math.nan, math.nan, float(np.mean(rets)), math.nan, math.nan, rejected=True)
    if cfg.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    diag = None
    for _ in range(cfg.epochs_per_update):
        mean = forward(actor_sp, actor_params, x)
        _, log_std = split_params(actor_sp, actor_params)
        sigma = np.exp(log_std[:act_dim])
        z = (a - mean) / sigma
        logp = -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(sigma)) - 0.5 * act_dim * _LOG2PI
        ratio = np.exp(np.clip(logp - old_logp, -30.0, 30.0))
        if not np.all(np.isfinite(ratio)):
            return actor_params, critic_params, UpdateDiagnostics(
                math.nan, math.nan, float(np.mean(rets)), math.nan, math.nan, rejected=True)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
        surrogate = np.minimum(unclipped, clipped)
        policy_loss = -float(np.mean(surrogate))
        # Gradient flows through the ratio only where the unclipped branch
        # is selected by the min.
        active = unclipped <= clipped
        g = np.where(active, ratio * adv, 0.0) / n
        cot_mean = -g[:, None] * (z / sigma)
        grad_actor = backward(actor_sp, actor_params, x, cot_mean)
        if actor_sp.log_std_dim:
            dlogp_dlogstd = z * z - 1.0
            g_logstd = -np.sum(g[:, None] * dlogp_dlogstd, axis=0)
            tail = np.zeros(actor_sp.log_std_dim)
            tail[:act_dim] = g_logstd
            grad_actor[-actor_sp.log_std_dim:] = tail
        grad_actor = _clip_global_norm(grad_actor, cfg.grad_clip)
        actor_params = actor_opt.step(actor_params, grad_actor)

        v = forward(critic_sp, critic_params, x)[:, 0]
        value_loss = float(np.mean((v - rets) ** 2))
        cot_v = (2.0 * (v - rets) / n)[:, None]
        grad_critic = backward(critic_sp, critic_params, x, cot_v)
        grad_critic = _clip_global_norm(grad_critic, cfg.grad_clip)
        critic_params = critic_opt.step(critic_params, grad_critic)

        diag = UpdateDiagnostics(
            policy_loss=policy_loss,
            value_loss=value_loss,
            mean_return=float(np.mean(rets)),
            mean_ratio=float(np.mean(ratio)),
            clip_fraction=float(np.mean(~active)),
        )
    return actor_params, critic_params, diag


def _clip_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------

@dataclass
class EvalPoint:
    update: int
    env_steps: int
    pct_position: float
    pct_full: float
    mean_e_r: float
    mean_e_v: float
    mean_objective: float


@dataclass
class RlResult:
    actor_spec: MlpSpec
    actor_params: np.ndarray          # best deterministic-evaluation parameters
    final_actor_params: np.ndarray
    critic_spec: MlpSpec
    critic_params: np.ndarray
    log: list                         # per-update dict rows
    evals: list                       # EvalPoint rows
    env_steps: int
    best_eval: EvalPoint | None

    def log_csv(self, path) -> None:
        keys = ["update", "env_steps", "mean_return", "policy_loss", "value_loss",
                "clip_fraction", "sigma_mean", "eval_pct_full", "eval_e_r", "eval_e_v",
                "eval_objective"]
        rows = [",".join(str(row.get(k, "")) for k in keys) for row in self.log]
        Path_text = ",".join(keys) + "\n" + "\n".join(rows) + "\n"
        with open(path, "w") as fh:
            fh.write(Path_text)


def _eval_initial_states(cfg: ScenarioConfig, n: int, seed: int,
                         error_model=None) -> list:
    """Nominal state plus a fixed, seeded spread of perturbed starts."""
    from .evaluation import perturb_initial_state
    states = [cfg.initial_state_nd.as_vector()]
    if error_model is not None:
        for i in range(max(0, n - 1)):
            rng = np.random.default_rng([seed, 900_000 + i])
            states.append(perturb_initial_state(cfg, error_model, rng))
    return states


def deterministic_evaluation(cfg: ScenarioConfig, spec: MlpSpec, params: np.ndarray,
                             initial_states: list, update: int, env_steps: int,
                             rtol: float = 1e-9) -> EvalPoint:
    """Mean-action rollouts over a fixed set of starts."""
    rng = np.random.default_rng(0)
    n_pos = n_full = 0
    e_rs, e_vs, objs = [], [], []
    for x0 in initial_states:
        ep = rollout_episode(cfg, spec, params, rng, noise_scale=0.0,
                             initial_state=x0, rtol=rtol, atol=rtol)
        ep = truncate_and_redistribute(ep, cfg)
        pos = ep.e_r <= cfg.c_r_nd
        full = pos and ep.e_v <= cfg.c_v_nd
        n_pos += pos
        n_full += full
        e_rs.append(ep.e_r)
        e_vs.append(ep.e_v)
        objs.append(ep.t_n if cfg.objective == OBJECTIVE_TIME else ep.m_f)
    k = len(initial_states)
    return EvalPoint(update=update, env_steps=env_steps,
                     pct_position=100.0 * n_pos / k, pct_full=100.0 * n_full / k,
                     mean_e_r=float(np.mean(e_rs)), mean_e_v=float(np.mean(e_vs)),
                     mean_objective=float(np.mean(objs)))


def train_rl(cfg: ScenarioConfig, ppo: PpoConfig, budget_steps: int,
             actor_params0: np.ndarray | None = None,
             stop_at_eval_pct: float | None = None,
             verbose: bool = False) -> RlResult:
    """PPO loop: rollout batch -> redistribute -> update, with periodic
    deterministic evaluation and best-checkpoint retention."""
    from .evaluation import default_error_model
    from .network import actor_spec as make_actor_spec, critic_spec as make_critic_spec

    a_spec = make_actor_spec(cfg.objective, trainer="rl")
    a_spec = MlpSpec(**{**a_spec.to_dict(), "log_std_init": math.log(ppo.sigma0)})
    c_spec = make_critic_spec(cfg.objective)
    actor = init_params(a_spec, ppo.seed) if actor_params0 is None else actor_params0.copy()
    critic = init_params(c_spec, ppo.seed + 1)
    actor_opt = Adam(actor.size, ppo.lr)
    critic_opt = Adam(critic.size, ppo.critic_lr)

    err_model = default_error_model(cfg.name) if ppo.train_ic_noise else None
    eval_states = _eval_initial_states(cfg, ppo.eval_samples, ppo.seed, err_model)
    from .evaluation import perturb_initial_state

    env_steps = 0
    episode_counter = 0
    update = 0
    log_rows = []
    evals = []
    best = None
    best_params = actor.copy()

    while env_steps < budget_steps:
        episodes = []
        for _ in range(ppo.batch_episodes):
            rng = np.random.default_rng([ppo.seed, episode_counter])
            episode_counter += 1
            if err_model is not None:
                x0 = perturb_initial_state(cfg, err_model, rng)
            else:
                x0 = cfg.initial_state_nd.as_vector()
            ep = rollout_episode(cfg, a_spec, actor, rng, initial_state=x0,
                                 rtol=ppo.rtol, atol=ppo.atol)
            env_steps += ep.n_steps
            try:
                ep = truncate_and_redistribute(ep, cfg, mode=ppo.return_mode,
                                               gamma=ppo.gamma)
            except GcnetLabError:
                continue
            episodes.append(ep)
        if not episodes:
            continue
        actor, critic, diag = ppo_update(episodes, a_spec, actor, c_spec, critic,
                                         ppo, actor_opt, critic_opt)
        update += 1
        _, log_std = split_params(a_spec, actor)
        row = {
            "update": update,
            "env_steps": env_steps,
            "mean_return": diag.mean_return,
            "policy_loss": diag.policy_loss,
            "value_loss": diag.value_loss,
            "clip_fraction": diag.clip_fraction,
            "sigma_mean": float(np.mean(np.exp(log_std))) if log_std.size else 0.0,
        }

        if update % ppo.eval_every == 0:
            point = deterministic_evaluation(cfg, a_spec, actor, eval_states,
                                             update, env_steps, rtol=ppo.rtol)
            evals.append(point)
            row.update(eval_pct_full=point.pct_full, eval_e_r=point.mean_e_r,
                       eval_e_v=point.mean_e_v, eval_objective=point.mean_objective)
            better = best is None or (point.pct_full, -point.mean_e_r) > \
                (best.pct_full, -best.mean_e_r)
            if better:
                best = point
                best_params = actor.copy()
            if verbose:
                print(f"update {update:4d}  steps {env_steps:8d}  "
                      f"return {diag.mean_return:8.3f}  full {point.pct_full:5.1f}%  "
                      f"e_r {point.mean_e_r:.3e}")
            if stop_at_eval_pct is not None and point.pct_full >= stop_at_eval_pct:
                log_rows.append(row)
                break
        log_rows.append(row)

    return RlResult(actor_spec=a_spec, actor_params=best_params,
                    final_actor_params=actor, critic_spec=c_spec,
                    critic_params=critic, log=log_rows, evals=evals,
                    env_steps=env_steps, best_eval=best)
