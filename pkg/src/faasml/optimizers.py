"""Local update rules and aggregation semantics for the distributed algorithms.

Aggregations are pure functions; per-worker mutable state lives in
OptimizerState. Batching is deterministic (sequential slices), so a worker's
trajectory is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError

ALGO_GA_SGD = "ga_sgd"
ALGO_MA_SGD = "ma_sgd"
ALGO_ADMM = "admm"
ALGO_KMEANS_EM = "kmeans_em"

ALGORITHMS = (ALGO_GA_SGD, ALGO_MA_SGD, ALGO_ADMM, ALGO_KMEANS_EM)

SCHEDULE_CONSTANT = "constant"
SCHEDULE_INV_SQRT = "inv_sqrt"


@dataclass
class OptimizerState:
    """Per-worker optimizer state; never shared between workers.

    dual and consensus hold the ADMM vectors u_i and z; the other algorithms
    leave them None. epoch counts completed data passes and drives decaying
    learning-rate schedules.
    """

    algorithm: str
    lr: float
    batch_size: int
    local_epochs: int = 1
    rho: float = 1.0
    dual: np.ndarray | None = None       # ADMM u_i
    consensus: np.ndarray | None = None  # ADMM z
    epoch: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.lr <= 0.0 or self.rho <= 0.0:
            raise ConfigError("learning rate and rho must be positive")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("batch size and local epochs must be >= 1")

    def check_dims(self, model_dim: int) -> None:
        for name, vec in (("dual", self.dual), ("consensus", self.consensus)):
            if vec is not None and vec.shape != (model_dim,):
                raise ConfigError(f"{name} dim {vec.shape} does not match "
                                  f"model dim {model_dim}")


def sgd_step(w: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if w.shape != grad.shape:
        raise ConfigError("gradient dim does not match model dim")
    return w - lr * grad


def lr_schedule(base_lr: float, epoch: int, mode: str = SCHEDULE_CONSTANT) -> float:
    if mode == SCHEDULE_CONSTANT:
        return base_lr
    if mode == SCHEDULE_INV_SQRT:
        return base_lr / np.sqrt(epoch + 1.0)
    raise ConfigError(f"unknown schedule {mode!r}")


def _weighted_mean(vectors, weights) -> np.ndarray:
    vectors = list(vectors)
    weights = np.asarray(list(weights), dtype=np.float64)
    if len(vectors) == 0:
        raise ConfigError("nothing to aggregate")
    if len(vectors) != len(weights):
        raise ConfigError("one weight per vector required")
    total = float(np.sum(weights))
    if total <= 0.0:
        raise ConfigError("total aggregation weight must be positive")
    out = np.zeros_like(vectors[0])
    for v, wt in zip(vectors, weights):
        if v.shape != out.shape:
            raise ConfigError("aggregated vectors must share one dim")
        out += (wt / total) * v
    return out


def ga_aggregate(grads, weights) -> np.ndarray:
    """Size-weighted mean of per-worker gradients."""
    return _weighted_mean(grads, weights)


def ma_aggregate(models, weights) -> np.ndarray:
    """Size-weighted mean of per-worker models; same contract as ga_aggregate."""
    return _weighted_mean(models, weights)


def batch_slices(n_rows: int, batch_size: int):
    """Deterministic sequential mini-batch slices covering [0, n_rows)."""
    for start in range(0, n_rows, batch_size):
        yield slice(start, min(start + batch_size, n_rows))


def local_sgd_epochs(loss_grad, X, y, w0: np.ndarray, lr: float, batch_size: int,
                     epochs: int, extra_grad=None) -> np.ndarray:
    """Run `epochs` deterministic passes of mini-batch SGD from w0.

    extra_grad(w), when given, is added to every batch gradient (used for the
    ADMM proximal penalty). Raises DivergenceError on non-finite iterates.
    """
    w = w0.copy()
    for _ in range(epochs):
        for sl in batch_slices(X.shape[0], batch_size):
            _, grad = loss_grad(w, X[sl], y[sl])
            if extra_grad is not None:
                grad = grad + extra_grad(w)
            w = w - lr * grad
        if not np.isfinite(w).all():
            raise DivergenceError(
                f"non-finite iterate during local SGD; learning rate {lr} too large")
    return w


def admm_local_solve(loss_grad, X, y, z: np.ndarray, u: np.ndarray, rho: float,
                     lr: float, epochs: int, batch_size: int) -> np.ndarray:
    """Approximately minimize f_i(w) + (rho/2)||w - z + u||^2, warm-started at z."""
    if z.shape != u.shape:
        raise ConfigError("consensus and dual dims differ")
    offset = z - u
    return local_sgd_epochs(loss_grad, X, y, z, lr, batch_size, epochs,
                            extra_grad=lambda w: rho * (w - offset))


def admm_global_update(ws, us, rho: float, l2: float) -> np.ndarray:
    """Consensus update z = rho * sum_i(w_i + u_i) / (n*rho + l2)."""
    ws, us = list(ws), list(us)
    if len(ws) != len(us) or not ws:
        raise ConfigError("need one dual per local model")
    acc = np.zeros_like(ws[0])
    for w, u in zip(ws, us):
        acc += w + u
    return (rho * acc) / (len(ws) * rho + l2)


def admm_dual_update(u: np.ndarray, w: np.ndarray, z: np.ndarray) -> np.ndarray:
    return u + w - z


def kmeans_merge(stats_list, prev_centroids: np.ndarray, k: int, d: int) -> np.ndarray:
    """New centroids from summed cluster stats; empty clusters keep the old value."""
    sums = np.zeros((k, d))
    counts = np.zeros(k)
    for st in stats_list:
        if st.sums.shape != (k, d):
            raise ConfigError("cluster stats shape mismatch")
        sums += st.sums
        counts += st.counts
    prev = prev_centroids.reshape(k, d)
    out = prev.copy()
    nonzero = counts > 0
    out[nonzero] = sums[nonzero] / counts[nonzero, None]
    return out.ravel()
