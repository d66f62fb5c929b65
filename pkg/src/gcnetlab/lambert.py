"""Zero-revolution Lambert solver and the reward-shaping helpers built on it.

Universal-variable formulation iterated on z with bracketing bisection and
a secant polish; short-way transfers only. The shaping helpers convert a
terminal state error into the pair of impulsive delta-v's of a short
connecting arc, with the arc duration grid-searched around the time the
spacecraft's own thrust would need to accrue the velocity threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, LambertError

MAX_ITERATIONS = 60
_TIME_TOL = 1e-13
_MIN_PLANE_SIN = 1e-8


@dataclass(frozen=True)
class LambertSolution:
    v1: np.ndarray
    v2: np.ndarray
    dt: float
    revs: int = 0


def _stumpff(z: float):
    if z > 1e-7:
        sz = math.sqrt(z)
        c2 = (1.0 - math.cos(sz)) / z
        c3 = (sz - math.sin(sz)) / (sz * z)
    elif z < -1e-7:
        sz = math.sqrt(-z)
        c2 = (math.cosh(sz) - 1.0) / (-z)
        c3 = (math.sinh(sz) - sz) / (-z * sz)
    else:
        c2 = 0.5 - z / 24.0 + z * z / 720.0
        c3 = 1.0 / 6.0 - z / 120.0 + z * z / 5040.0
    return c2, c3


def solve_lambert(r1, r2, dt: float, mu: float, prograde_normal=None) -> LambertSolution:
    """Solve the zero-revolution boundary-value problem between r1 and r2.

    The short-way branch is taken; when ``prograde_normal`` is given the
    transfer angle is measured so the motion is prograde about it.

    Raises DegenerateGeometryError near 180-degree geometry and
    LambertError when the iteration does not converge in 60 iterations.
    """
    if dt <= 0.0:
        raise ValueError(f"transfer time must be positive, got {dt}")
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateGeometryError("endpoint at the gravity singularity")

    cos_dnu = float(np.dot(r1, r2) / (n1 * n2))
    cos_dnu = max(-1.0, min(1.0, cos_dnu))
    cross = np.cross(r1, r2)
    sin_mag = float(np.linalg.norm(cross)) / (n1 * n2)
    if sin_mag < _MIN_PLANE_SIN and cos_dnu < 0.0:
        raise DegenerateGeometryError("transfer plane undefined (near-180 degree geometry)")

    sign = 1.0
    if prograde_normal is not None and float(np.dot(cross, prograde_normal)) < 0.0:
        sign = -1.0
    sin_dnu = sign * sin_mag
    # Short way by default: A > 0 for transfer angle < 180 deg.
    a_coef = sin_dnu * math.sqrt(n1 * n2 / max(1.0 - cos_dnu, 1e-300))
    if abs(a_coef) < 1e-14 * math.sqrt(n1 * n2):
        raise DegenerateGeometryError("degenerate chord geometry")

    sqrt_mu = math.sqrt(mu)

    def time_of(z: float):
        c2, c3 = _stumpff(z)
        y = n1 + n2 + a_coef * (z * c3 - 1.0) / math.sqrt(c2)
        if y < 0.0:
            return None, y
        x = math.sqrt(y / c2)
        return (x**3 * c3 + a_coef * math.sqrt(y)) / sqrt_mu, y

    # Bracket on z: time_of is increasing in z on the zero-rev branch.
    z_lo, z_hi = -4.0 * math.pi**2, 4.0 * math.pi**2 - 1e-10
    t_lo, _ = time_of(z_lo)
    n_expand = 0
    while t_lo is None or t_lo > dt:
        z_lo *= 2.0
        t_lo, _ = time_of(z_lo)
        n_expand += 1
        if n_expand > 50:
            raise LambertError("could not bracket the transfer time from below")
    t_hi, _ = time_of(z_hi)

    z = 0.0
    t_z, y = time_of(z)
    converged = False
    for _ in range(MAX_ITERATIONS):
        if t_z is not None and abs(t_z - dt) <= _TIME_TOL * max(1.0, dt):
            converged = True
            break
        if t_z is None or t_z < dt:
            z_lo = z
            if t_z is not None:
                t_lo = t_z
        else:
            z_hi, t_hi = z, t_z
        # Secant toward the root, bisection fallback keeps the bracket.
        if t_z is not None and t_hi is not None and t_hi != t_lo and t_lo is not None:
            z_new = z_lo + (dt - t_lo) * (z_hi - z_lo) / (t_hi - t_lo)
            if not (z_lo < z_new < z_hi):
                z_new = 0.5 * (z_lo + z_hi)
        else:
            z_new = 0.5 * (z_lo + z_hi)
        z = z_new
        t_z, y = time_of(z)
    if not converged:
        raise LambertError(f"no convergence in {MAX_ITERATIONS} iterations",
                           residual=None if t_z is None else abs(t_z - dt))

    f = 1.0 - y / n1
    g = a_coef * math.sqrt(y / mu)
    gdot = 1.0 - y / n2
    v1 = (r2 - f * r1) / g
    v2 = (gdot * r2 - r1) / g
    return LambertSolution(v1=v1, v2=v2, dt=dt, revs=0)


def lambert_dvs(r, v, m_unused, target_r, target_v, dt_l: float, mu: float):
    """Impulse pair closing a terminal state error through a short arc.

    dv1 matches the arc departure velocity from the current velocity; dv2
    matches the target velocity at arrival.
    """
    sol = solve_lambert(r, target_r, dt_l, mu, prograde_normal=np.cross(r, v))
    dv1 = float(np.linalg.norm(sol.v1 - v))
    dv2 = float(np.linalg.norm(np.asarray(target_v, dtype=float) - sol.v2))
    return dv1, dv2


def dt_grid(c_v: float, m_i: float, t_max: float, alpha_l: float = 0.1,
            n: int = 5, span=(0.2, 5.0)) -> np.ndarray:
    """Candidate arc durations around alpha_l * c_v * m_i / T_max.

    The base value is the time the spacecraft's maximum thrust needs to
    accrue a delta-v of c_v, scaled by alpha_l; the grid spans it
    logarithmically and is sorted ascending.
    """
    if m_i <= 0.0:
        raise ValueError("mass must be positive")
    base = alpha_l * c_v * m_i / t_max
    return base * np.logspace(math.log10(span[0]), math.log10(span[1]), n)
