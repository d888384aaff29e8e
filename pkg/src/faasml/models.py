"""Loss functions, gradients, and evaluation for the supported model kinds.

All loss/gradient functions take plain arrays (a batch view) and return the
batch-mean loss and batch-mean gradient, so a mini-batch value is an unbiased
estimate of the partition value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError

MODEL_LR = "lr"
MODEL_SVM = "svm"
MODEL_KMEANS = "kmeans"

MODEL_KINDS = (MODEL_LR, MODEL_SVM, MODEL_KMEANS)


def _check_dims(w: np.ndarray, X: np.ndarray) -> None:
    if w.shape != (X.shape[1],):
        raise ConfigError(f"model dim {w.shape} does not match features {X.shape}")


def lr_loss_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean logistic loss and gradient over the batch, stable for large margins."""
    _check_dims(w, X)
    z = y * (X @ w)
    # log(1 + exp(-z)) via logaddexp avoids overflow for z << 0.
    loss = float(np.mean(np.logaddexp(0.0, -z)))
    # d/dw = mean_i -y_i * sigmoid(-z_i) * x_i
    sig = 0.5 * (1.0 - np.tanh(0.5 * z))
    grad = -(X.T @ (y * sig)) / X.shape[0]
    return loss, grad


def svm_loss_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean hinge loss and a subgradient (zero contribution at margin == 1)."""
    _check_dims(w, X)
    margin = y * (X @ w)
    active = margin < 1.0
    loss = float(np.mean(np.maximum(0.0, 1.0 - margin)))
    grad = -(X.T @ (y * active)) / X.shape[0]
    return loss, grad


LOSS_GRAD = {MODEL_LR: lr_loss_grad, MODEL_SVM: svm_loss_grad}


@dataclass
class ClusterStats:
    """Mergeable sufficient statistics of one assignment pass.

    sums: k x d per-cluster coordinate sums; counts: k row counts;
    sse: summed within-cluster squared distance. All fields are additive,
    so stats from disjoint row sets merge by summation.
    """

    sums: np.ndarray
    counts: np.ndarray
    sse: float

    @property
    def k(self) -> int:
        return self.sums.shape[0]

    def to_vector(self) -> np.ndarray:
        """Flatten to [sums..., counts..., sse] for collective reduction."""
        return np.concatenate([self.sums.ravel(), self.counts.astype(np.float64),
                               [self.sse]])

    @staticmethod
    def from_vector(vec: np.ndarray, k: int, d: int) -> "ClusterStats":
        if vec.shape != (k * d + k + 1,):
            raise ConfigError("cluster stats vector has wrong length")
        sums = vec[: k * d].reshape(k, d).copy()
        counts = vec[k * d : k * d + k].copy()
        return ClusterStats(sums, counts, float(vec[-1]))


def kmeans_assign_stats(centroids: np.ndarray, X: np.ndarray, k: int) -> ClusterStats:
    """Assign each row to its nearest centroid (ties to the lowest index)."""
    d = X.shape[1]
    if centroids.shape != (k * d,):
        raise ConfigError(f"centroid vector must have length k*d={k * d}")
    centers = centroids.reshape(k, d)
    # argmin over squared distances; np.argmin returns the first (lowest) index.
    sq = (np.sum(X * X, axis=1)[:, None] - 2.0 * X @ centers.T
          + np.sum(centers * centers, axis=1)[None, :])
    assign = np.argmin(sq, axis=1)
    sums = np.zeros((k, d))
    counts = np.zeros(k)
    np.add.at(sums, assign, X)
    np.add.at(counts, assign, 1.0)
    diffs = X - centers[assign]
    sse = float(np.sum(diffs * diffs))
    return ClusterStats(sums, counts, sse)


@dataclass(frozen=True)
class EvalResult:
    loss: float
    metric: float  # classification accuracy, or total SSE for k-means


def evaluate(model: np.ndarray, dataset: Dataset, model_kind: str,
             k: int = 0) -> EvalResult:
    """Full-dataset loss plus accuracy (classifiers) or SSE (k-means).

    For k-means the loss is SSE divided by the row count so thresholds are
    comparable across dataset sizes; the metric carries the raw SSE.
    """
    X, y = dataset.features, dataset.labels
    if model_kind == MODEL_LR:
        loss, _ = lr_loss_grad(model, X, y)
        acc = float(np.mean(np.where(X @ model >= 0.0, 1.0, -1.0) == y))
        return EvalResult(loss, acc)
    if model_kind == MODEL_SVM:
        loss, _ = svm_loss_grad(model, X, y)
        acc = float(np.mean(np.where(X @ model >= 0.0, 1.0, -1.0) == y))
        return EvalResult(loss, acc)
    if model_kind == MODEL_KMEANS:
        stats = kmeans_assign_stats(model, X, k)
        return EvalResult(stats.sse / dataset.n_rows, stats.sse)
    raise ConfigError(f"unknown model kind {model_kind!r}")


def model_dim(model_kind: str, n_features: int, k: int = 0) -> int:
    if model_kind == MODEL_KMEANS:
        if k < 1:
            raise ConfigError("k-means requires k >= 1")
        return k * n_features
    return n_features
