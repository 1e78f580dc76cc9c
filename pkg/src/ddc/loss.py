"""Divergence-based clustering loss and its three terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernel import KernelMatrix

EPS = 1e-9

TERM_NAMES = ("l1", "l2", "l3")


@dataclass
class LossBreakdown:
    """l1: divergence over soft assignments, l2: normalised triu(A A^T),
    l3: divergence over corner similarities. ``total`` carries the graph."""

    l1: Tensor
    l2: Tensor
    l3: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"l1": self.l1.item(), "l2": self.l2.item(), "l3": self.l3.item(), "total": self.total.item()}


def _kernel_values(k) -> Tensor:
    return k.values if isinstance(k, KernelMatrix) else ad.as_tensor(k)


def _strict_upper(n: int, dtype) -> Tensor:
    return Tensor(np.triu(np.ones((n, n), dtype=dtype), k=1))


def cs_term(k, a) -> Tensor:
    """(1/k) sum_{i<j} a_i^T K a_j / sqrt(a_i^T K a_i * a_j^T K a_j + eps) over columns of ``a``."""
    kv = _kernel_values(k)
    a = ad.as_tensor(a)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError(f"need at least 2 clusters, got assignment shape {a.shape}")
    if kv.shape != (a.shape[0], a.shape[0]):
        raise ValueError(f"kernel {kv.shape} does not match batch of {a.shape[0]}")
    ncl = a.shape[1]
    g = a.T @ kv @ a  # (k, k) cluster cross-similarities
    eye = Tensor(np.eye(ncl, dtype=g.dtype))
    diag = (g * eye).sum(axis=1)
    denom = ad.sqrt(diag.reshape(ncl, 1) * diag.reshape(1, ncl) + EPS)
    ratios = g / denom
    return (ratios * _strict_upper(ncl, g.dtype)).sum() * (1.0 / ncl)


def cs_ratios(k, a) -> np.ndarray:
    """Pairwise ratios of :func:`cs_term` as a plain array (diagnostics)."""
    kv = _kernel_values(k).data
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    g = a.T @ kv @ a
    d = np.diag(g)
    r = g / np.sqrt(np.outer(d, d) + EPS)
    return r[np.triu_indices(a.shape[1], k=1)]


def triu_term(a) -> Tensor:
    """Strictly-upper-triangular sum of A A^T, divided by the number of pairs."""
    a = ad.as_tensor(a)
    m = a.shape[0]
    if m < 2:
        raise ValueError("triu term needs a batch of at least 2")
    s = a @ a.T
    return (s * _strict_upper(m, s.dtype)).sum() * (2.0 / (m * (m - 1)))


def corner_transform(a) -> Tensor:
    """m_{q,i} = exp(-||a_q - e_i||^2) = exp(-(||a_q||^2 - 2 a_qi + 1))."""
    a = ad.as_tensor(a)
    sq = (a * a).sum(axis=1, keepdims=True)
    return ad.exp((sq - a * 2.0 + 1.0) * -1.0)


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def ddc_loss(k, a, terms=TERM_NAMES) -> LossBreakdown:
    """Sum of the enabled terms; disabled terms are reported as exact zeros."""
    a = ad.as_tensor(a)
    enabled = set(terms)
    unknown = enabled - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    if not enabled:
        raise ValueError("at least one loss term must be enabled")
    l1 = cs_term(k, a) if "l1" in enabled else _zero(a.dtype)
    l2 = triu_term(a) if "l2" in enabled else _zero(a.dtype)
    l3 = cs_term(k, corner_transform(a)) if "l3" in enabled else _zero(a.dtype)
    parts = [t for name, t in zip(TERM_NAMES, (l1, l2, l3)) if name in enabled]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return LossBreakdown(l1, l2, l3, total)
