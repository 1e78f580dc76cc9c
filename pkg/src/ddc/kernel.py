"""Gaussian kernel over hidden representations, with the median bandwidth rule."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIGMA_FRACTION = 0.15
SIGMA_FLOOR = 1e-9


@dataclass
class KernelMatrix:
    values: Tensor
    sigma: float

    @property
    def data(self) -> np.ndarray:
        return self.values.data


def pairwise_sq_dist(h) -> Tensor:
    """Squared Euclidean distances between the rows of ``h``.

    Uses the Gram expansion; the result is symmetrised, clamped at zero and
    its diagonal forced to zero.
    """
    h = ad.as_tensor(h)
    if h.ndim != 2 or h.shape[0] < 2:
        raise ValueError(f"pairwise_sq_dist needs a (batch>=2, d) matrix, got {h.shape}")
    n = h.shape[0]
    sq = (h * h).sum(axis=1, keepdims=True)
    gram = h @ h.T
    d = sq + sq.T - gram * 2.0
    d = (d + d.T) * 0.5
    off = Tensor(1.0 - np.eye(n, dtype=h.dtype))
    return ad.clamp_min(d, 0.0) * off


def _median_distance(d: np.ndarray) -> float:
    iu = np.triu_indices(d.shape[0], k=1)
    dist = np.sqrt(np.maximum(np.asarray(d, dtype=np.float64)[iu], 0.0))
    return float(np.median(dist))


def sigma_rule(d) -> float:
    """15% of the median pairwise (non-squared) distance, floored at 1e-9."""
    arr = d.data if isinstance(d, Tensor) else np.asarray(d)
    sigma = SIGMA_FRACTION * _median_distance(arr)
    return sigma if sigma > 0 else SIGMA_FLOOR


def gaussian_kernel(d, sigma: float) -> KernelMatrix:
    """exp(-d / (2 sigma^2)); ``sigma`` is a constant, no gradient flows to it."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = ad.as_tensor(d)
    scale = -1.0 / (2.0 * float(sigma) ** 2)
    return KernelMatrix(ad.exp(d * scale), float(sigma))


def hidden_kernel(h) -> KernelMatrix:
    """Distances, bandwidth and kernel for one batch of hidden features."""
    d = pairwise_sq_dist(h)
    return gaussian_kernel(d, sigma_rule(d))


def sort_by_labels(k: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(np.asarray(labels), kind="stable")
    return k[np.ix_(order, order)], order


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM (P5). ``image`` must already be in [0, 255]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pos += 1
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def export_kernel(k: np.ndarray, labels, csv_path, pgm_path) -> np.ndarray:
    """Write the label-sorted kernel matrix as CSV and as a PGM (255 * k_ij)."""
    sorted_k, _ = sort_by_labels(np.asarray(k, dtype=np.float64), labels)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(csv_path, sorted_k, delimiter=",", fmt="%.9g")
    write_pgm(pgm_path, 255.0 * sorted_k)
    return sorted_k


def block_contrast(k: np.ndarray, labels) -> tuple[float, float]:
    """Mean within-class and mean between-class off-diagonal kernel entries."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = k[same & off]
    between = k[~same]
    return float(within.mean()) if within.size else float("nan"), float(between.mean()) if between.size else float("nan")
