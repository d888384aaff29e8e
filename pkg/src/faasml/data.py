"""Datasets, row partitions, and loaders.

Features are dense row-major float64 matrices. Classification labels are
normalized to {-1.0, +1.0}; clustering labels hold the generating cluster
index and are ignored by k-means.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DatasetParseError

CLASSIFICATION = "classification"
CLUSTERING = "clustering"


@dataclass(frozen=True)
class Dataset:
    """Immutable dense dataset: N x d features plus a length-N label vector."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if feats.ndim != 2:
            raise ConfigError("features must be a 2-d matrix")
        if labels.shape != (feats.shape[0],):
            raise ConfigError("labels length must equal the number of rows")
        if not np.isfinite(feats).all() or not np.isfinite(labels).all():
            raise ConfigError("dataset contains non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def nbytes(self) -> int:
        return self.features.nbytes + self.labels.nbytes


@dataclass(frozen=True)
class Partition:
    """Contiguous row range of a dataset owned by one worker."""

    dataset: Dataset
    start: int
    stop: int
    partition_id: int
    owner_worker: int

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.start : self.stop]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.start : self.stop]

    @property
    def n_rows(self) -> int:
        return self.stop - self.start


def generate_synthetic(n: int, d: int, task: str, seed: int, k: int = 3,
                       noise: float = 0.1) -> Dataset:
    """Deterministic synthetic data.

    Classification: rows drawn around a hidden random hyperplane, labels
    in {-1, +1} with `noise` fraction flipped. Clustering: rows drawn from
    `k` well-separated unit Gaussians; labels carry the cluster index.
    """
    if n < 1 or d < 1:
        raise ConfigError(f"n and d must be >= 1, got n={n}, d={d}")
    if task not in (CLASSIFICATION, CLUSTERING):
        raise ConfigError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    if task == CLASSIFICATION:
        plane = rng.standard_normal(d)
        plane /= np.linalg.norm(plane)
        feats = rng.standard_normal((n, d))
        labels = np.where(feats @ plane >= 0.0, 1.0, -1.0)
        flip = rng.random(n) < noise
        labels[flip] *= -1.0
        return Dataset(feats, labels)
    # Clusters sit 10 sigma apart along a random direction: separation far
    # exceeds the unit within-cluster spread for any d and k.
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    centers = np.outer(10.0 * np.arange(k), direction)
    assign = rng.integers(0, k, size=n)
    feats = centers[assign] + rng.standard_normal((n, d))
    return Dataset(feats, assign.astype(np.float64))


def synthetic_cluster_centers(d: int, seed: int, k: int = 3) -> np.ndarray:
    """The generating centers of generate_synthetic(..., clustering, seed, k)."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    return np.outer(10.0 * np.arange(k), direction)


def load_libsvm(path, d: int) -> Dataset:
    """Parse a libsvm-format text file into a dense Dataset.

    Indices are 1-based and must not exceed d; missing indices are zero.
    Labels given as 0/1 are remapped to -1/+1.
    """
    rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError:
                raise DatasetParseError(f"bad label {parts[0]!r}", lineno) from None
            if label in (1.0,):
                label = 1.0
            elif label in (0.0, -1.0):
                label = -1.0
            else:
                raise DatasetParseError(f"label must be 0/1 or -1/+1, got {label}", lineno)
            row = np.zeros(d)
            for tok in parts[1:]:
                idx_s, _, val_s = tok.partition(":")
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DatasetParseError(f"bad feature token {tok!r}", lineno) from None
                if idx < 1 or idx > d:
                    raise DatasetParseError(
                        f"feature index {idx} out of range 1..{d}", lineno)
                row[idx - 1] = val
            rows.append(row)
            labels.append(label)
    if not rows:
        raise DatasetParseError("file contains no data rows", 1)
    return Dataset(np.asarray(rows), np.asarray(labels))


def partition_dataset(dataset: Dataset, n_parts: int) -> list[Partition]:
    """Split rows into n_parts contiguous partitions with sizes differing by <= 1."""
    if n_parts < 1:
        raise ConfigError("need at least one partition")
    n = dataset.n_rows
    base, extra = divmod(n, n_parts)
    parts = []
    start = 0
    for i in range(n_parts):
        size = base + (1 if i < extra else 0)
        parts.append(Partition(dataset, start, start + size, i, i))
        start += size
    return parts


def dataset_to_bytes(features: np.ndarray, labels: np.ndarray) -> bytes:
    """Serialize (features, labels) deterministically for blob storage."""
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(features, dtype=np.float64))
    np.save(buf, np.ascontiguousarray(labels, dtype=np.float64))
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> Dataset:
    buf = io.BytesIO(blob)
    features = np.load(buf)
    labels = np.load(buf)
    return Dataset(features, labels)
