"""Datasets: synthetic geometry, MNIST IDX files, dense CSV vectors, and a
k-means++ baseline."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    """Malformed or inconsistent IDX file."""


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) or (n, c, h, w)
    labels: np.ndarray | None = None
    name: str = ""
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.labels)} labels for {len(self.features)} points")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.features.ndim == 4

    def flat(self) -> np.ndarray:
        return self.features.reshape(len(self.features), -1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.name, dict(self.normalization))


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------

def make_circle_ring(
    n_per_class: int = 500,
    inner_radius: float = 1.0,
    ring_radius: float = 4.0,
    noise_std: float = 0.15,
    seed: int = 0,
) -> Dataset:
    """A Gaussian disc at the origin (class 0) inside a noisy ring (class 1).

    The disc has per-axis standard deviation ``inner_radius / 2``.
    """
    if inner_radius <= 0 or ring_radius <= 0:
        raise ValueError("radii must be positive")
    if ring_radius <= inner_radius:
        raise ValueError("ring_radius must exceed inner_radius")
    rng = np.random.default_rng(seed)
    disc = rng.normal(0.0, inner_radius / 2.0, size=(n_per_class, 2))
    theta = rng.uniform(0.0, 2 * np.pi, size=n_per_class)
    r = ring_radius + rng.normal(0.0, noise_std, size=n_per_class) if noise_std > 0 else np.full(n_per_class, ring_radius)
    ring = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x = np.concatenate([disc, ring]).astype(np.float32)
    y = np.repeat([0, 1], n_per_class)
    return Dataset(x, y, "circle_ring", {"scaling": "none"})


def make_blobs(n_per_class: int, centers, std: float = 0.5, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    x = np.concatenate([rng.normal(c, std, size=(n_per_class, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per_class)
    return Dataset(x.astype(np.float32), y, "blobs", {"scaling": "none"})


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (big-endian header)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise IDXFormatError(f"{path}: truncated data ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write unsigned-byte data in IDX format (gzip if the path ends in .gz)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def balanced_subsample(labels: np.ndarray, classes, per_class_cap: int | None, seed: int) -> np.ndarray:
    """Indices of ``per_class_cap`` points from each listed class (all points if no cap)."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if per_class_cap is not None:
            if len(idx) < per_class_cap:
                raise ValueError(f"class {c} has {len(idx)} points, fewer than the cap {per_class_cap}")
            idx = np.sort(rng.choice(idx, size=per_class_cap, replace=False))
        picked.append(idx)
    return np.concatenate(picked)


def load_idx(
    images_path,
    labels_path,
    classes_filter=None,
    per_class_cap: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Load IDX images/labels, scale pixels to [0, 1], optionally keep a
    balanced subset of the listed classes."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.ndim != 3:
        raise IDXFormatError(f"{images_path}: expected (n, rows, cols) images, got {images.shape}")
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    if classes_filter is not None or per_class_cap is not None:
        classes = sorted(set(classes_filter)) if classes_filter is not None else sorted(set(labels.tolist()))
        idx = balanced_subsample(labels, classes, per_class_cap, seed)
        images, labels = images[idx], labels[idx]
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels, Path(images_path).name, {"scaling": "pixels/255"})


def load_mnist_dir(
    directory,
    classes_filter=None,
    per_class_cap: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Load every ``*-images-idx3-ubyte[.gz]`` / ``*-labels-idx1-ubyte[.gz]`` pair in a directory."""
    directory = Path(directory)
    pairs = []
    for img in sorted(directory.glob("*images-idx3-ubyte*")):
        lab = directory / img.name.replace("images-idx3", "labels-idx1")
        if not lab.exists():
            raise FileNotFoundError(f"no label file for {img}")
        pairs.append((img, lab))
    if not pairs:
        raise FileNotFoundError(f"no IDX image files in {directory}")
    parts = [load_idx(i, l) for i, l in pairs]
    x = np.concatenate([p.features for p in parts])
    y = np.concatenate([p.labels for p in parts])
    if classes_filter is not None or per_class_cap is not None:
        classes = sorted(set(classes_filter)) if classes_filter is not None else sorted(set(y.tolist()))
        idx = balanced_subsample(y, classes, per_class_cap, seed)
        x, y = x[idx], y[idx]
    return Dataset(x, y, directory.name, {"scaling": "pixels/255"})


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_dense_csv(path, has_labels: bool = False) -> Dataset:
    """Rectangular numeric CSV; with ``has_labels`` the last column is an integer class."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if len(rows[-1]) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: ragged row ({len(rows[-1])} vs {len(rows[0])} columns)")
    if not rows:
        raise ValueError(f"{path}: empty file")
    arr = np.asarray(rows, dtype=np.float64)
    labels = None
    if has_labels:
        if arr.shape[1] < 2:
            raise ValueError(f"{path}: need at least one feature column plus the label column")
        lab = arr[:, -1]
        if not np.all(lab == np.round(lab)):
            raise ValueError(f"{path}: label column is not integer")
        labels = lab.astype(np.int64)
        arr = arr[:, :-1]
    return Dataset(arr.astype(np.float32), labels, Path(path).stem, {"scaling": "none"})


def write_dense_csv(path, dataset: Dataset) -> None:
    x = dataset.flat().astype(np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(x):
            cells = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                cells.append(str(int(dataset.labels[i])))
            w.writerow(cells)


# ---------------------------------------------------------------------------
# k-means baseline
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * x @ centers.T
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i : i + 1])[:, 0])
    return centers


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations until the assignment stops changing. Returns labels,
    centers and the objective after each assignment step."""
    centers = centers.copy()
    k = len(centers)
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = d.argmin(1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = int(d[np.arange(len(x)), labels].argmax())
                centers[c] = x[far]
                labels[far] = c
    return labels, centers, history


def kmeans(data, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """Best-of-``restarts`` k-means++/Lloyd by within-cluster sum of squares."""
    x = data.flat() if isinstance(data, Dataset) else np.asarray(data)
    x = x.reshape(len(x), -1).astype(np.float64)
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    best, best_obj = None, np.inf
    for _ in range(max(1, restarts)):
        labels, centers, _ = lloyd(x, kmeans_pp_init(x, k, rng), max_iter)
        obj = float(((x - centers[labels]) ** 2).sum())
        if obj < best_obj:
            best, best_obj = labels, obj
    return best
