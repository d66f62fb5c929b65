"""Adaptive propagation of the controlled dynamics with event detection.

Everything here runs in the scenario's nondimensional units (see
``dynamics``). The integrator is an embedded Runge-Kutta 8(7) with dense
output; terminal events are located by bracketing on the dense output
followed by a safeguarded secant iteration.

Control laws are callables ``law(t, y) -> (direction, throttle)`` with
``y = [rx, ry, rz, vx, vy, vz, m]``. In network-feedback mode the policy
is therefore re-evaluated at every internal integrator stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import DOP853

from .dynamics import (
    FRAME_ROTATING,
    OBJECTIVE_TIME,
    ControlCommand,
    ScenarioConfig,
    SpacecraftState,
)
from .errors import ConfigError

DEFAULT_RTOL = 1e-12
DEFAULT_ATOL = 1e-12
EVENT_ROOT_TOL = 1e-10
ROOT_MAX_ITER = 80

# Divergence guards (dimensionless): see propagation design notes.
DIVERGENCE_RADIUS = 100.0
DIVERGENCE_MASS_FRACTION = 0.01

TERM_EVENT = "event"
TERM_TIME_LIMIT = "time_limit"
TERM_DIVERGENCE = "divergence"


# ---------------------------------------------------------------------------
# Control laws
# ---------------------------------------------------------------------------

def constant_law(cmd: ControlCommand):
    """Hold one command over the whole span."""
    direction = np.asarray(cmd.direction, dtype=float)
    throttle = float(cmd.throttle)

    def law(t, y):
        return direction, throttle

    return law


def raw_law(direction, throttle):
    """Constant control without ControlCommand validation (internal use)."""
    direction = np.asarray(direction, dtype=float)
    throttle = float(throttle)

    def law(t, y):
        return direction, throttle

    return law


@dataclass(frozen=True)
class ZohSchedule:
    """Piecewise-constant control: cmds[i] holds on [times[i], times[i+1])."""

    times: np.ndarray
    commands: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if len(t) != len(self.commands):
            raise ConfigError("schedule times and commands must align")
        if np.any(np.diff(t) <= 0.0):
            raise ConfigError("schedule times must be strictly increasing")


def network_law(policy_fn, objective: str, offset: np.ndarray | None = None,
                fallback_direction: np.ndarray | None = None):
    """Feedback law mapping the state through a policy at integrator frequency.

    ``policy_fn(x)`` returns the raw head outputs for a single normalized
    state (6- or 7-dim per the objective). ``offset`` is an additive raw-space
    perturbation (4-vector; throttle slot unused for the time objective) held
    fixed over the current propagation span. The mapped command clamps the
    throttle after offsetting.
    """
    from .network import map_raw_to_command  # local import to avoid a cycle

    off = None if offset is None else np.asarray(offset, dtype=float)
    fb = {"dir": None if fallback_direction is None else np.asarray(fallback_direction, float)}
    time_objective = objective == OBJECTIVE_TIME

    def law(t, y):
        x = y[0:6] if time_objective else y[0:7]
        raw = policy_fn(x)
        if off is not None:
            raw = raw + off[: raw.shape[0]]
        direction, throttle = map_raw_to_command(raw, objective, fallback_direction=fb["dir"])
        fb["dir"] = direction
        return direction, throttle

    return law


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    """Scalar event g(t, y) with a trigger direction and terminal flag."""

    name: str
    fn: object                    # callable (t, y) -> float
    direction: int = 0            # -1 decreasing, +1 increasing, 0 any
    terminal: bool = True


def target_sphere_event(cfg: ScenarioConfig, radius_nd: float | None = None) -> EventSpec:
    """Sphere of radius c_r about the target position."""
    target = cfg.target_r_nd
    radius = cfg.c_r_nd if radius_nd is None else radius_nd

    def g(t, y):
        d = y[0:3] - target
        return math.sqrt(d @ d) - radius

    return EventSpec(name="target_sphere", fn=g, direction=-1, terminal=True)


def body_sphere_event(cfg: ScenarioConfig) -> EventSpec:
    """Sphere of radius ||r_t|| + c_nn about the body center."""
    radius = float(np.linalg.norm(cfg.target_r_nd)) + cfg.c_nn_nd

    def g(t, y):
        r = y[0:3]
        return math.sqrt(r @ r) - radius

    return EventSpec(name="body_sphere", fn=g, direction=-1, terminal=True)


def ellipsoid_event(cfg: ScenarioConfig) -> EventSpec:
    """Triaxial ellipsoid level set (altitude trigger at c_nn above it)."""
    axes = cfg.ellipsoid_axes_nd
    if axes.shape != (3,):
        raise ConfigError("ellipsoid event requires three semi-axes")
    # Offset the level set outward by c_nn along the mean axis scale.
    level = (1.0 + cfg.c_nn_nd / float(np.mean(axes))) ** 2

    def g(t, y):
        r = y[0:3]
        return float(np.sum((r / axes) ** 2)) - level

    return EventSpec(name="ellipsoid", fn=g, direction=-1, terminal=True)


def altitude_event(field_fn, level: float, name: str = "altitude",
                   direction: int = -1, terminal: bool = True) -> EventSpec:
    """User-supplied differentiable scalar field h(r) with trigger level."""

    def g(t, y):
        return float(field_fn(y[0:3])) - level

    return EventSpec(name=name, fn=g, direction=direction, terminal=terminal)


def terminal_event(cfg: ScenarioConfig) -> EventSpec:
    """The scenario's configured termination manifold."""
    if cfg.event_kind == "target_sphere":
        return target_sphere_event(cfg)
    if cfg.event_kind == "body_sphere":
        return body_sphere_event(cfg)
    if cfg.event_kind == "ellipsoid":
        return ellipsoid_event(cfg)
    raise ConfigError(f"unknown event kind {cfg.event_kind!r}")


# ---------------------------------------------------------------------------
# Trajectory record
# ---------------------------------------------------------------------------

@dataclass
class Termination:
    kind: str                     # 'event' | 'time_limit' | 'divergence'
    t: float
    event_name: str = ""
    detail: str = ""


@dataclass
class TrajectoryRecord:
    """Time-stamped states and controls from one propagation (nondimensional)."""

    times: np.ndarray             # (n,)
    states: np.ndarray            # (n, 7) rows [r, v, m]
    controls: np.ndarray          # (n, 4) rows [ux, uy, uz, alpha]
    termination: Termination

    @property
    def final_state(self) -> SpacecraftState:
        return SpacecraftState.from_vector(self.states[-1])

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    def to_csv(self, path, cfg: ScenarioConfig | None = None) -> None:
        """Plot-ready dump; SI units when a scenario is given."""
        if cfg is None:
            scale = np.ones(8)
        else:
            s = cfg.unit_scales
            scale = np.array([s.time, s.length, s.length, s.length,
                              s.velocity, s.velocity, s.velocity, s.mass])
        header = "t,rx,ry,rz,vx,vy,vz,m,ux,uy,uz,alpha"
        data = np.column_stack([self.times[:, None] * scale[0],
                                self.states * scale[1:][None, :],
                                self.controls])
        np.savetxt(path, data, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# Propagation core
# ---------------------------------------------------------------------------

def _make_rhs(cfg: ScenarioConfig, law):
    mu = cfg.mu_nd
    omega = cfg.omega_nd
    thrust = cfg.thrust_nd
    vex = cfg.vex_nd
    floor = cfg.singularity_floor
    rotating = cfg.frame == FRAME_ROTATING and omega != 0.0
    mass_flow = 0.0 if math.isinf(vex) else thrust / vex

    def rhs(t, y):
        r = y[0:3]
        v = y[3:6]
        m = y[6]
        rn = math.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
        if rn < floor:
            raise _Diverged(f"singularity: r = {rn:.3e}")
        direction, throttle = law(t, y)
        a = (-mu / rn**3) * r + (thrust / m * throttle) * direction
        out = np.empty(7)
        out[0:3] = v
        out[3:6] = a
        if rotating:
            w2 = omega * omega
            out[3] += 2.0 * omega * v[1] + w2 * r[0]
            out[4] += -2.0 * omega * v[0] + w2 * r[1]
        out[6] = -mass_flow * throttle
        return out

    return rhs


class _Diverged(Exception):
    pass


def _refine_event_root(g, t_lo, t_hi, g_lo, g_hi, gtol=EVENT_ROOT_TOL,
                       max_iter=ROOT_MAX_ITER):
    """Bracketing bisection plus safeguarded secant on a sign change."""
    a, b, ga, gb = t_lo, t_hi, g_lo, g_hi
    t_best, g_best = (a, ga) if abs(ga) < abs(gb) else (b, gb)
    for i in range(max_iter):
        if abs(g_best) <= gtol or (b - a) <= 1e-15 * max(1.0, abs(b)):
            break
        if i < 8 or abs(gb - ga) < 1e-300:
            t_mid = 0.5 * (a + b)
        else:
            t_mid = b - gb * (b - a) / (gb - ga)
            if not (a < t_mid < b):
                t_mid = 0.5 * (a + b)
        g_mid = g(t_mid)
        if abs(g_mid) < abs(g_best):
            t_best, g_best = t_mid, g_mid
        if (ga <= 0.0) == (g_mid <= 0.0):
            a, ga = t_mid, g_mid
        else:
            b, gb = t_mid, g_mid
    return t_best, g_best


def _crossed(direction: int, g_prev: float, g_new: float, guard: float) -> bool:
    if direction <= 0 and g_prev > guard and g_new <= 0.0:
        return True
    if direction >= 0 and g_prev < -guard and g_new >= 0.0:
        return True
    return False


def propagate(cfg: ScenarioConfig, state0: SpacecraftState, law,
              events: list[EventSpec] | None = None,
              t_span: tuple[float, float] = (0.0, 1.0),
              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
              max_step: float = math.inf) -> TrajectoryRecord:
    """Propagate a nondimensional state under a control law.

    Terminal events stop integration at the located root; the final record
    row is the event state. Divergence (non-finite state, runaway radius,
    mass depletion, step-size underflow) terminates with kind 'divergence'.
    """
    if not (0.0 < rtol <= 1e-2 and 0.0 < atol <= 1e-2):
        raise ConfigError("tolerances must lie in (0, 1e-2]")
    if isinstance(law, ZohSchedule):
        return _propagate_schedule(cfg, state0, law, events, t_span, rtol, atol)

    events = list(events or [])
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not math.isfinite(t1):
        raise ConfigError("t_span must be finite (apply a time limit)")
    y0 = state0.as_vector()
    rhs = _make_rhs(cfg, law)
    m_floor = DIVERGENCE_MASS_FRACTION * y0[6]

    times = [t0]
    states = [y0.copy()]

    def control_at(t, y):
        d, a = law(t, y)
        return np.array([d[0], d[1], d[2], a])

    controls = [control_at(t0, y0)]
    g_prev = [e.fn(t0, y0) for e in events]
    guard = 10.0 * EVENT_ROOT_TOL

    try:
        solver = DOP853(rhs, t0, y0, t1, rtol=rtol, atol=atol, max_step=max_step)
    except _Diverged as exc:
        return TrajectoryRecord(np.array(times), np.array(states), np.array(controls),
                                Termination(TERM_DIVERGENCE, t0, detail=str(exc)))

    termination = None
    while solver.status == "running":
        try:
            message = solver.step()
        except _Diverged as exc:
            termination = Termination(TERM_DIVERGENCE, float(solver.t), detail=str(exc))
            break
        if solver.status == "failed":
            termination = Termination(TERM_DIVERGENCE, float(solver.t),
                                      detail=message or "step size underflow")
            break
        t_new, y_new = float(solver.t), solver.y
        if not np.all(np.isfinite(y_new)):
            termination = Termination(TERM_DIVERGENCE, t_new, detail="non-finite state")
            break
        rn = float(np.linalg.norm(y_new[0:3]))
        if rn > DIVERGENCE_RADIUS or y_new[6] < m_floor:
            termination = Termination(TERM_DIVERGENCE, t_new, detail="divergence guard")
            break

        dense = solver.dense_output()
        fired = None
        for k, ev in enumerate(events):
            g_new = ev.fn(t_new, y_new)
            if _crossed(ev.direction, g_prev[k], g_new, guard):
                def g_of_t(tt, _ev=ev):
                    return _ev.fn(tt, dense(tt))
                t_star, _ = _refine_event_root(g_of_t, times[-1], t_new, g_prev[k], g_new)
                if fired is None or t_star < fired[0]:
                    fired = (t_star, ev)
            g_prev[k] = g_new
        if fired is not None and fired[1].terminal:
            t_star, ev = fired
            y_star = dense(t_star)
            times.append(t_star)
            states.append(y_star)
            controls.append(control_at(t_star, y_star))
            termination = Termination(TERM_EVENT, t_star, event_name=ev.name)
            break

        times.append(t_new)
        states.append(y_new.copy())
        controls.append(control_at(t_new, y_new))

    if termination is None:
        termination = Termination(TERM_TIME_LIMIT, float(times[-1]))

    return TrajectoryRecord(np.asarray(times), np.asarray(states),
                            np.asarray(controls), termination)


def _propagate_schedule(cfg, state0, schedule: ZohSchedule, events, t_span, rtol, atol):
    """Zero-order-hold schedule: chain constant-law segments."""
    t0, t1 = float(t_span[0]), float(t_span[1])
    bounds = [t for t in schedule.times if t0 < t < t1]
    edges = [t0] + bounds + [t1]
    state = state0
    pieces = []
    for a, b in zip(edges[:-1], edges[1:]):
        idx = int(np.searchsorted(schedule.times, a, side="right") - 1)
        idx = max(idx, 0)
        cmd = schedule.commands[idx]
        rec = propagate(cfg, state, constant_law(cmd), events, (a, b), rtol, atol)
        pieces.append(rec)
        state = rec.final_state
        if rec.termination.kind != TERM_TIME_LIMIT:
            break
    return stitch_records(pieces)


def stitch_records(pieces: list[TrajectoryRecord]) -> TrajectoryRecord:
    """Concatenate segment records, dropping duplicated joint rows."""
    if not pieces:
        raise ValueError("no segments to stitch")
    times = [pieces[0].times]
    states = [pieces[0].states]
    controls = [pieces[0].controls]
    for rec in pieces[1:]:
        times.append(rec.times[1:])
        states.append(rec.states[1:])
        controls.append(rec.controls[1:])
    return TrajectoryRecord(np.concatenate(times), np.vstack(states),
                            np.vstack(controls), pieces[-1].termination)


# ---------------------------------------------------------------------------
# Convergence check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    position_converged: bool
    full_converged: bool
    e_r: float                    # m
    e_v: float                    # m/s


def check_convergence(record: TrajectoryRecord, cfg: ScenarioConfig) -> ConvergenceReport:
    """Position/velocity errors at termination against the scenario thresholds (SI)."""
    if record.times.size == 0:
        raise ValueError("empty trajectory record")
    y = record.states[-1]
    s = cfg.unit_scales
    e_r = float(np.linalg.norm(y[0:3] - cfg.target_r_nd)) * s.length
    e_v = float(np.linalg.norm(y[3:6] - cfg.target_v_nd)) * s.velocity
    pos = e_r <= cfg.c_r
    full = pos and e_v <= cfg.c_v
    return ConvergenceReport(position_converged=pos, full_converged=full, e_r=e_r, e_v=e_v)
