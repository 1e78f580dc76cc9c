import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddc.data import (
    IDXFormatError,
    Dataset,
    balanced_subsample,
    kmeans,
    kmeans_pp_init,
    load_dense_csv,
    load_idx,
    load_mnist_dir,
    lloyd,
    make_blobs,
    make_circle_ring,
    read_idx,
    write_dense_csv,
    write_idx,
)
from ddc.metrics import acc


def hand_idx(path, magic, dims, payload: bytes):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    path.write_bytes(header + payload)


def test_circle_ring_construction():
    d = make_circle_ring(500, seed=0)
    assert d.n == 1000 and d.sample_shape == (2,)
    assert np.bincount(d.labels).tolist() == [500, 500]
    ring = make_circle_ring(200, noise_std=0.0, seed=1)
    r = np.linalg.norm(ring.features[ring.labels == 1], axis=1)
    np.testing.assert_allclose(r, 4.0, rtol=1e-6)


def test_circle_ring_separation_rate():
    separated = 0
    for seed in range(200):
        d = make_circle_ring(500, seed=seed)
        r = np.linalg.norm(d.features, axis=1)
        separated += r[d.labels == 1].min() > r[d.labels == 0].max()
    assert separated >= 0.99 * 200


def test_idx_hand_built_fixture(tmp_path):
    pixels = bytes(range(2 * 3 * 2))
    hand_idx(tmp_path / "img", 0x803, (2, 3, 2), pixels)
    hand_idx(tmp_path / "lab", 0x801, (2,), bytes([7, 3]))
    imgs = read_idx(tmp_path / "img", 0x803)
    assert imgs.shape == (2, 3, 2) and imgs.dtype == np.uint8
    assert imgs[1, 2, 1] == 11
    d = load_idx(tmp_path / "img", tmp_path / "lab")
    assert d.features.shape == (2, 1, 3, 2)
    assert d.features.max() == pytest.approx(11 / 255)
    assert d.labels.tolist() == [7, 3]


def test_idx_errors(tmp_path):
    hand_idx(tmp_path / "bad", 0x804, (1, 1, 1), b"\x00")
    with pytest.raises(IDXFormatError, match="magic"):
        read_idx(tmp_path / "bad", 0x803)
    hand_idx(tmp_path / "short", 0x803, (2, 2, 2), b"\x00" * 5)
    with pytest.raises(IDXFormatError, match="truncated"):
        read_idx(tmp_path / "short", 0x803)
    hand_idx(tmp_path / "img", 0x803, (2, 1, 1), b"\x00\x01")
    hand_idx(tmp_path / "lab", 0x801, (3,), b"\x00\x01\x02")
    with pytest.raises(IDXFormatError, match="labels"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_write_read_round_trip_gz(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    write_idx(tmp_path / "x-images-idx3-ubyte.gz", arr)
    with gzip.open(tmp_path / "x-images-idx3-ubyte.gz") as fh:
        assert fh.read(4) == b"\x00\x00\x08\x03"
    np.testing.assert_array_equal(read_idx(tmp_path / "x-images-idx3-ubyte.gz", 0x803), arr)


def test_balanced_subsample():
    labels = np.repeat(np.arange(4), [10, 12, 9, 15])
    idx = balanced_subsample(labels, [0, 1, 3], 5, seed=3)
    assert np.bincount(labels[idx], minlength=4).tolist() == [5, 5, 0, 5]
    np.testing.assert_array_equal(idx, balanced_subsample(labels, [0, 1, 3], 5, seed=3))
    with pytest.raises(ValueError):
        balanced_subsample(labels, [2], 10, seed=0)


def test_mnist_dir_filter(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 6).astype(np.uint8)
    write_idx(tmp_path / "t-images-idx3-ubyte", rng.integers(0, 256, size=(18, 28, 28), dtype=np.uint8))
    write_idx(tmp_path / "t-labels-idx1-ubyte", labels)
    d = load_mnist_dir(tmp_path, [0, 2], 4, seed=0)
    assert d.n == 8 and sorted(set(d.labels.tolist())) == [0, 2]
    assert d.features.shape[1:] == (1, 28, 28)
    assert 0.0 <= d.features.min() and d.features.max() <= 1.0
    with pytest.raises(FileNotFoundError):
        load_mnist_dir(tmp_path / "missing")


def test_csv_examples(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2,3,0\n4,5,6,1\n7,8,9,0\n")
    d = load_dense_csv(p, has_labels=True)
    assert d.n == 3 and d.sample_shape == (3,) and d.labels.tolist() == [0, 1, 0]
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ValueError, match="empty"):
        load_dense_csv(tmp_path / "empty.csv")
    (tmp_path / "ragged.csv").write_text("1,2\n3\n")
    with pytest.raises(ValueError, match="ragged"):
        load_dense_csv(tmp_path / "ragged.csv")
    (tmp_path / "text.csv").write_text("1,a\n")
    with pytest.raises(ValueError, match="non-numeric"):
        load_dense_csv(tmp_path / "text.csv")


@given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 2**31))
def test_csv_round_trip(n, dim, seed):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    d = Dataset(rng.normal(size=(n, dim)).astype(np.float32), rng.integers(0, 3, size=n))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.csv"
        write_dense_csv(path, d)
        back = load_dense_csv(path, has_labels=True)
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.labels, d.labels)


def test_synthetic_exports_to_csv(tmp_path):
    d = make_circle_ring(20, seed=0)
    write_dense_csv(tmp_path / "rings.csv", d)
    back = load_dense_csv(tmp_path / "rings.csv", has_labels=True)
    np.testing.assert_array_equal(back.features, d.features)


def test_kmeans_blobs_perfect():
    d = make_blobs(100, [[0, 0], [10, 10]], std=0.5, seed=0)
    assert acc(d.labels, kmeans(d.flat(), 2, seed=0)) == 1.0


def test_kmeans_splits_ring():
    d = make_circle_ring(500, seed=0)
    assert acc(d.labels, kmeans(d.flat(), 2, seed=0)) < 0.9


def test_kmeans_k_equals_n():
    x = np.random.default_rng(0).normal(size=(6, 2))
    labels = kmeans(x, 6, restarts=2, seed=0)
    assert sorted(labels.tolist()) == list(range(6))


@given(st.integers(0, 2**31), st.integers(2, 6))
def test_lloyd_objective_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 3))
    _, _, history = lloyd(x, kmeans_pp_init(x, k, rng))
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_lloyd_reseeds_empty_cluster():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels, centers, _ = lloyd(x, np.array([[0.05], [100.0], [10.05]]))
    assert len(set(labels.tolist())) == 3
