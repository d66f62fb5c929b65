"""Small feed-forward policy/critic networks with analytic forward/backward.

Two hidden-activation families: sinusoidal layers sin(omega0*(Wx+b)) with
the matching initialization scheme, and overflow-safe softplus layers. The
head is linear or tanh; a separate mapping turns raw head outputs into a
unit thrust direction and a throttle.

Parameters live in one flat float64 vector, laid out per layer as weights
(row-major) then biases, optionally followed by state-independent log-std
entries for stochastic actors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dynamics import OBJECTIVE_TIME, ControlCommand
from .errors import ConfigError

ACT_SINE = "sine"
ACT_SOFTPLUS = "softplus"
HEAD_LINEAR = "linear"
HEAD_TANH = "tanh"

DEGENERATE_DIRECTION_NORM = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Layer specification for an actor or critic network."""

    input_dim: int
    output_dim: int
    hidden: tuple = (32, 32, 32)
    activation: str = ACT_SINE
    head: str = HEAD_LINEAR
    omega0: float = 30.0
    log_std_dim: int = 0
    log_std_init: float = math.log(0.1)

    def __post_init__(self):
        if self.activation not in (ACT_SINE, ACT_SOFTPLUS):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.head not in (HEAD_LINEAR, HEAD_TANH):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("network dims must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        n = sum(fi * fo + fo for fi, fo in self.layer_dims)
        return n + self.log_std_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "MlpSpec":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return MlpSpec(**d)


def actor_spec(objective: str, trainer: str = "bc", omega0: float = 30.0) -> MlpSpec:
    """The policy architecture for an objective/trainer pair.

    Time-optimal policies map 6 state features to a thrust direction;
    fuel-optimal policies map 7 features (mass included) to direction plus
    throttle. Cloning uses sinusoidal hidden layers with a linear head; the
    on-policy trainer uses softplus with a tanh head and learnable log-std.
    """
    input_dim = 6 if objective == OBJECTIVE_TIME else 7
    output_dim = 3 if objective == OBJECTIVE_TIME else 4
    if trainer == "bc":
        return MlpSpec(input_dim, output_dim, activation=ACT_SINE,
                       head=HEAD_LINEAR, omega0=omega0)
    if trainer == "rl":
        return MlpSpec(input_dim, output_dim, activation=ACT_SOFTPLUS,
                       head=HEAD_TANH, log_std_dim=4)
    raise ConfigError(f"unknown trainer {trainer!r}")


def critic_spec(objective: str) -> MlpSpec:
    input_dim = 6 if objective == OBJECTIVE_TIME else 7
    return MlpSpec(input_dim, 1, activation=ACT_SOFTPLUS, head=HEAD_LINEAR)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def split_params(spec: MlpSpec, params: np.ndarray):
    """View the flat vector as per-layer (W, b) plus the log-std tail."""
    params = np.asarray(params)
    if params.shape != (spec.param_count,):
        raise ConfigError(f"expected {spec.param_count} parameters, got {params.shape}")
    layers = []
    idx = 0
    for fi, fo in spec.layer_dims:
        w = params[idx:idx + fi * fo].reshape(fo, fi)
        idx += fi * fo
        b = params[idx:idx + fo]
        idx += fo
        layers.append((w, b))
    log_std = params[idx:idx + spec.log_std_dim]
    return layers, log_std


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Deterministic initialization per activation family.

    Sine nets: first layer U(-1/fan_in, 1/fan_in), later layers
    U(-sqrt(6/fan_in)/omega0, +...). Softplus nets: Glorot uniform.
    Biases start at zero; log-std entries at ``log_std_init``.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for layer_idx, (fi, fo) in enumerate(spec.layer_dims):
        if spec.activation == ACT_SINE:
            if layer_idx == 0:
                bound = 1.0 / fi
            else:
                bound = math.sqrt(6.0 / fi) / spec.omega0
        else:
            bound = math.sqrt(6.0 / (fi + fo))
        chunks.append(rng.uniform(-bound, bound, size=fi * fo))
        chunks.append(np.zeros(fo))
    if spec.log_std_dim:
        chunks.append(np.full(spec.log_std_dim, spec.log_std_init))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Raw head outputs for one state (1-d input) or a batch (2-d input)."""
    raw, _ = _forward_cached(spec, params, x)
    return raw


def _forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != spec.input_dim:
        raise ConfigError(f"expected input dim {spec.input_dim}, got {h.shape[1]}")
    layers, _ = split_params(spec, params)
    cache = {"inputs": [h], "z": []}
    n_hidden = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        cache["z"].append(z)
        if i < n_hidden:
            h = np.sin(spec.omega0 * z) if spec.activation == ACT_SINE else _softplus(z)
        else:
            h = np.tanh(z) if spec.head == HEAD_TANH else z
        cache["inputs"].append(h)
    raw = h[0] if single else h
    return raw, cache


def backward(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
             cotangent: np.ndarray, with_input_grad: bool = False):
    """Exact reverse-mode gradient of the raw outputs.

    ``cotangent`` matches the forward output shape; batched cotangents are
    summed into one flat parameter gradient. Log-std entries (not part of
    the deterministic forward map) receive zero gradient here.

    Returns ``grad_params`` or ``(grad_params, grad_x)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    raw, cache = _forward_cached(spec, params, x)
    layers, _ = split_params(spec, params)
    cot = np.asarray(cotangent, dtype=float)
    delta = cot[None, :] if single else cot.copy()

    grads = [None] * len(layers)
    n_hidden = len(layers) - 1
    for i in range(len(layers) - 1, -1, -1):
        w, b = layers[i]
        z = cache["z"][i]
        if i == n_hidden:
            dz = delta * (1.0 - np.tanh(z) ** 2) if spec.head == HEAD_TANH else delta
        else:
            if spec.activation == ACT_SINE:
                dz = delta * (spec.omega0 * np.cos(spec.omega0 * z))
            else:
                dz = delta * _sigmoid(z)
        h_in = cache["inputs"][i]
        grads[i] = (dz.T @ h_in, dz.sum(axis=0))
        delta = dz @ w

    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    if spec.log_std_dim:
        flat = np.concatenate([flat, np.zeros(spec.log_std_dim)])
    if with_input_grad:
        grad_x = delta[0] if single else delta
        return flat, grad_x
    return flat


def make_policy_fn(spec: MlpSpec, params: np.ndarray):
    """Fast single-state closure used inside propagation right-hand sides."""
    layers, _ = split_params(spec, params)
    omega0 = spec.omega0
    sine = spec.activation == ACT_SINE
    tanh_head = spec.head == HEAD_TANH
    n_hidden = len(layers) - 1

    def policy(x):
        h = x
        for i, (w, b) in enumerate(layers):
            z = w @ h + b
            if i < n_hidden:
                h = np.sin(omega0 * z) if sine else np.logaddexp(0.0, z)
            else:
                h = np.tanh(z) if tanh_head else z
        return h

    return policy


# ---------------------------------------------------------------------------
# Head mapping
# ---------------------------------------------------------------------------

def map_raw_to_command(raw: np.ndarray, objective: str,
                       fallback_direction: np.ndarray | None = None):
    """Map raw head outputs to (unit direction, throttle).

    The thrust direction is the normalized leading 3-vector; near-zero raw
    vectors fall back to the previous direction (or +x if none is known
    yet; callers seed the toward-target direction at t0). The throttle is
    a logistic squash of the fourth output for the fuel objective and 1
    for the time objective.
    """
    raw = np.asarray(raw, dtype=float)
    d = raw[0:3]
    n = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    if n < DEGENERATE_DIRECTION_NORM or not math.isfinite(n):
        if fallback_direction is None:
            direction = np.array([1.0, 0.0, 0.0])
        else:
            direction = fallback_direction
    else:
        direction = d / n
    if objective == OBJECTIVE_TIME or raw.shape[0] < 4:
        throttle = 1.0
    else:
        throttle = float(_sigmoid(raw[3]))
    return direction, throttle


def map_head(raw: np.ndarray, objective: str,
             fallback_direction: np.ndarray | None = None) -> ControlCommand:
    direction, throttle = map_raw_to_command(raw, objective, fallback_direction)
    return ControlCommand(direction=direction, throttle=throttle)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, spec: MlpSpec, params: np.ndarray, seed: int | None = None,
                    normalization: dict | None = None, metadata: dict | None = None) -> Path:
    """Write `<path>.bin` (flat little-endian float64) plus `<path>.json`.

    The round trip is bit-exact.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base.with_suffix(".bin")
    params = np.ascontiguousarray(params, dtype="<f8")
    bin_path.write_bytes(params.tobytes())
    manifest = {
        "format": "gcnetlab-checkpoint-v1",
        "spec": spec.to_dict(),
        "seed": seed,
        "normalization": normalization or {},
        "metadata": metadata or {},
        "param_count": int(params.size),
    }
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    return bin_path


def load_checkpoint(path):
    """Return (spec, params, manifest) from a checkpoint base path."""
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    manifest = json.loads(base.with_suffix(".json").read_text())
    spec = MlpSpec.from_dict(manifest["spec"])
    params = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f8").copy()
    if params.size != spec.param_count:
        raise ConfigError("checkpoint parameter count does not match its spec")
    return spec, params, manifest
