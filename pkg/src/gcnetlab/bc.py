"""Behavioural cloning of expert state-action pairs.

Cosine loss on the thrust direction, plus throttle mean-squared error for
fuel problems. Adam with decoupled weight decay, a reduce-on-plateau
learning-rate schedule driven by the validation loss, and a deterministic
80/20 split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import OBJECTIVE_FUEL, OBJECTIVE_TIME
from .errors import LossError
from .expert import ExpertDataset
from .network import MlpSpec, backward, forward, init_params

_NORM_FLOOR = 1e-12


@dataclass
class BcConfig:
    batch_size: int = 4096
    lr: float = 5e-5
    weight_decay: float = 2.5e-5
    epochs: int = 500
    val_fraction: float = 0.2
    scheduler_factor: float = 0.9
    scheduler_patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    @staticmethod
    def for_scenario(name: str, **overrides) -> "BcConfig":
        # Landing scenarios train shorter with no weight decay.
        table = {
            "gtoc11": dict(weight_decay=2.5e-5, epochs=500),
            "earth-mars": dict(weight_decay=2.5e-5, epochs=500),
            "psyche": dict(weight_decay=0.0, epochs=200),
            "67p": dict(weight_decay=0.0, epochs=200),
        }
        kwargs = table.get(name, {})
        kwargs.update(overrides)
        return BcConfig(**kwargs)


class Adam:
    """Adam with optional decoupled weight decay."""

    def __init__(self, n_params: int, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        out = params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            out = out - self.lr * self.weight_decay * params
        return out


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` consecutive non-improving epochs."""

    def __init__(self, factor: float = 0.9, patience: int = 10):
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, loss: float, lr: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
            return lr
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return lr * self.factor
        return lr


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cosine_loss(pred_dir: np.ndarray, true_dir: np.ndarray) -> float:
    """1 - cos(angle) between predicted and expert thrust directions.

    Batched inputs average over rows. Value in [0, 2]; zero iff parallel.
    """
    value, _ = _cosine_loss_grad(pred_dir, true_dir)
    return value


def _cosine_loss_grad(pred_dir, true_dir):
    p = np.atleast_2d(np.asarray(pred_dir, dtype=float))
    q = np.atleast_2d(np.asarray(true_dir, dtype=float))
    pn = np.linalg.norm(p, axis=1)
    qn = np.linalg.norm(q, axis=1)
    if np.any(pn < _NORM_FLOOR) or np.any(qn < _NORM_FLOOR):
        raise LossError("zero-norm direction in cosine loss")
    phat = p / pn[:, None]
    qhat = q / qn[:, None]
    cos = np.einsum("ij,ij->i", phat, qhat)
    value = float(np.mean(1.0 - cos))
    # d/dp of -p.qhat/|p| = -(qhat - cos*phat)/|p|
    grad = -(qhat - cos[:, None] * phat) / pn[:, None] / p.shape[0]
    return value, grad


def fuel_loss(pred_dir, pred_throttle, true_dir, true_throttle) -> float:
    """Throttle mean-squared error plus the direction cosine loss."""
    value, _, _ = _fuel_loss_grad(pred_dir, np.asarray(pred_throttle, dtype=float),
                                  true_dir, np.asarray(true_throttle, dtype=float))
    return value


def _fuel_loss_grad(pred_dir, pred_throttle, true_dir, true_throttle):
    cos_value, cos_grad = _cosine_loss_grad(pred_dir, true_dir)
    a = np.atleast_1d(pred_throttle)
    a_true = np.atleast_1d(true_throttle)
    err = a - a_true
    mse = float(np.mean(err**2))
    grad_throttle = 2.0 * err / a.shape[0]
    return mse + cos_value, cos_grad, grad_throttle


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _loss_and_raw_grad(objective: str, raw: np.ndarray, labels: np.ndarray):
    """Loss plus its gradient with respect to the raw head outputs."""
    if objective == OBJECTIVE_TIME:
        value, grad_dir = _cosine_loss_grad(raw, labels)
        return value, grad_dir
    alpha = _sigmoid(raw[:, 3])
    value, grad_dir, grad_alpha = _fuel_loss_grad(raw[:, 0:3], alpha,
                                                  labels[:, 0:3], labels[:, 3])
    grad_raw = np.empty_like(raw)
    grad_raw[:, 0:3] = grad_dir
    grad_raw[:, 3] = grad_alpha * alpha * (1.0 - alpha)
    return value, grad_raw


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class BcResult:
    params: np.ndarray            # best-validation parameters
    final_params: np.ndarray
    train_loss: np.ndarray        # per epoch
    val_loss: np.ndarray
    lr_trace: np.ndarray
    best_epoch: int
    train_indices: np.ndarray
    val_indices: np.ndarray

    def history_csv(self, path) -> None:
        data = np.column_stack([np.arange(len(self.train_loss)),
                                self.train_loss, self.val_loss, self.lr_trace])
        np.savetxt(path, data, delimiter=",", header="epoch,train_loss,val_loss,lr",
                   comments="")


def split_indices(n: int, val_fraction: float, seed: int):
    """Deterministic shuffled train/validation index sets."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def train_bc(dataset: ExpertDataset, spec: MlpSpec, cfg: BcConfig,
             params0: np.ndarray | None = None, log_every: int = 0) -> BcResult:
    """Clone the expert actions; returns loss curves and the best checkpoint.

    Raises LossError on a non-finite loss (with the offending epoch in the
    message).
    """
    features = dataset.features()
    labels = dataset.labels()
    if features.shape[0] == 0:
        raise LossError("empty dataset")
    if features.shape[1] != spec.input_dim:
        raise LossError(f"dataset features ({features.shape[1]}) do not match "
                        f"network input dim ({spec.input_dim})")
    objective = dataset.objective

    train_idx, val_idx = split_indices(features.shape[0], cfg.val_fraction, cfg.seed)
    x_val, y_val = features[val_idx], labels[val_idx]

    params = init_params(spec, cfg.seed) if params0 is None else params0.copy()
    opt = Adam(params.size, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
               cfg.adam_eps, cfg.weight_decay)
    sched = PlateauScheduler(cfg.scheduler_factor, cfg.scheduler_patience)
    rng = np.random.default_rng(cfg.seed + 1)

    train_hist, val_hist, lr_hist = [], [], []
    best = (math.inf, params.copy(), -1)

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            raw = forward(spec, params, features[batch])
            value, grad_raw = _loss_and_raw_grad(objective, raw, labels[batch])
            if not math.isfinite(value):
                raise LossError(f"non-finite training loss at epoch {epoch}")
            grad = backward(spec, params, features[batch], grad_raw)
            params = opt.step(params, grad)
            losses.append(value)

        raw_val = forward(spec, params, x_val)
        val_value, _ = _loss_and_raw_grad(objective, raw_val, y_val)
        if not math.isfinite(val_value):
            raise LossError(f"non-finite validation loss at epoch {epoch}")
        train_hist.append(float(np.mean(losses)))
        val_hist.append(val_value)
        lr_hist.append(opt.lr)
        opt.lr = sched.update(val_value, opt.lr)
        if val_value < best[0]:
            best = (val_value, params.copy(), epoch)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch:4d}  train {train_hist[-1]:.3e}  "
                  f"val {val_hist[-1]:.3e}  lr {lr_hist[-1]:.2e}")

    return BcResult(
        params=best[1],
        final_params=params,
        train_loss=np.asarray(train_hist),
        val_loss=np.asarray(val_hist),
        lr_trace=np.asarray(lr_hist),
        best_epoch=best[2],
        train_indices=train_idx,
        val_indices=val_idx,
    )
