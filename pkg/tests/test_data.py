import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faasml import models, optimizers
from faasml.data import (Dataset, dataset_from_bytes, dataset_to_bytes,
                         generate_synthetic, load_libsvm, partition_dataset,
                         synthetic_cluster_centers)
from faasml.errors import ConfigError, DatasetParseError


def test_generate_deterministic():
    a = generate_synthetic(4, 2, "classification", seed=7)
    b = generate_synthetic(4, 2, "classification", seed=7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_generate_both_labels_present():
    ds = generate_synthetic(1000, 10, "classification", seed=1)
    assert set(np.unique(ds.labels)) == {-1.0, 1.0}


def test_generate_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        generate_synthetic(0, 3, "classification", seed=0)
    with pytest.raises(ConfigError):
        generate_synthetic(3, 0, "classification", seed=0)


def test_clustering_quality_against_generating_centers():
    # Oracle: the SSE of the generating centers, computed by direct assignment.
    ds = generate_synthetic(1000, 2, "clustering", seed=3, k=3)
    true_centers = synthetic_cluster_centers(2, seed=3, k=3).ravel()
    oracle_sse = models.kmeans_assign_stats(true_centers, ds.features, 3).sse
    centroids = true_centers.copy()
    for _ in range(50):
        stats = models.kmeans_assign_stats(centroids, ds.features, 3)
        centroids = optimizers.kmeans_merge([stats], centroids, 3, 2)
    final_sse = models.kmeans_assign_stats(centroids, ds.features, 3).sse
    assert final_sse <= 1.1 * oracle_sse


def test_libsvm_basic_row(tmp_path):
    path = tmp_path / "data.txt"
    path.write_text("1 1:0.5 3:2.0\n")
    ds = load_libsvm(path, d=3)
    assert np.allclose(ds.features[0], [0.5, 0.0, 2.0])
    assert ds.labels[0] == 1.0


def test_libsvm_zero_label_remap(tmp_path):
    path = tmp_path / "data.txt"
    path.write_text("0 2:1.0\n")
    ds = load_libsvm(path, d=2)
    assert ds.labels[0] == -1.0
    assert np.allclose(ds.features[0], [0.0, 1.0])


def test_libsvm_index_out_of_range_names_line(tmp_path):
    path = tmp_path / "data.txt"
    path.write_text("1 5:1.0\n")
    with pytest.raises(DatasetParseError) as err:
        load_libsvm(path, d=3)
    assert err.value.line == 1
    assert "line 1" in str(err.value)


def test_libsvm_malformed_token_names_line(tmp_path):
    path = tmp_path / "data.txt"
    path.write_text("1 1:0.5\n1 2:oops\n")
    with pytest.raises(DatasetParseError) as err:
        load_libsvm(path, d=3)
    assert err.value.line == 2


@settings(deadline=None)
@given(n=st.integers(1, 200), w=st.integers(1, 17))
def test_partitions_disjoint_cover_balanced(n, w):
    ds = Dataset(np.arange(n, dtype=float).reshape(n, 1), np.ones(n))
    parts = partition_dataset(ds, w)
    assert len(parts) == w
    rows = [r for p in parts for r in range(p.start, p.stop)]
    assert rows == list(range(n))
    sizes = [p.n_rows for p in parts]
    assert max(sizes) - min(sizes) <= 1


def test_dataset_rejects_nonfinite():
    with pytest.raises(ConfigError):
        Dataset(np.array([[np.inf]]), np.array([1.0]))


def test_dataset_bytes_roundtrip():
    ds = generate_synthetic(37, 5, "classification", seed=11)
    blob = dataset_to_bytes(ds.features, ds.labels)
    back = dataset_from_bytes(blob)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
