"""Mini-batch training with Adam, best-of-N run selection and the voting ensemble."""
from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .kernel import hidden_kernel
from .loss import TERM_NAMES, ddc_loss
from .metrics import hungarian
from .network import Network, build_arch, init_he, save_checkpoint

log = logging.getLogger(__name__)

PAPER_ITERATIONS = 70000
PAPER_RUNS = 20
DESK_ITERATIONS = 3000
DESK_RUNS = 5
DEFAULT_LR = {"conv": 1e-3, "mlp": 1e-5}


@dataclass
class TrainConfig:
    arch: str = "mlp"
    k: int = 2
    batch_size: int = 100
    learning_rate: float | None = None  # None -> per-architecture default
    iterations: int = DESK_ITERATIONS
    seed: int = 0
    runs: int = DESK_RUNS
    vote_top: int = 3
    terms: tuple[str, ...] = TERM_NAMES

    def __post_init__(self):
        if self.arch not in DEFAULT_LR:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1 or self.runs < 1 or self.vote_top < 1:
            raise ValueError("iterations, runs and vote_top must be positive")
        self.terms = tuple(t for t in TERM_NAMES if t in set(self.terms))
        if not self.terms:
            raise ValueError("at least one loss term must be enabled")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.arch]

    def resolved(self) -> "TrainConfig":
        d = asdict(self)
        d["learning_rate"] = self.lr
        return TrainConfig(**d)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(iterations=PAPER_ITERATIONS, runs=PAPER_RUNS)
        base.update(overrides)
        return cls(**base)


@dataclass
class RunResult:
    run: int
    seed: int
    final_loss: dict[str, float]  # l1, l2, l3, total averaged over the last epoch
    assignments: np.ndarray | None
    loss_trace: np.ndarray
    network: Network | None = None
    checkpoint: str | None = None
    failed: bool = False
    error: str = ""

    def summary(self) -> dict:
        return {
            "run": self.run,
            "seed": self.seed,
            "final_loss": self.final_loss,
            "failed": self.failed,
            "error": self.error,
            "checkpoint": self.checkpoint,
            "iterations": int(len(self.loss_trace)),
        }


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        arrays = {n: (p.data if isinstance(p, ad.Tensor) else np.asarray(p)) for n, p in params.items()}
        return cls({n: np.zeros_like(a) for n, a in arrays.items()}, {n: np.zeros_like(a) for n, a in arrays.items()})


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on each parameter array."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        arr = p.data if isinstance(p, ad.Tensor) else p
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {arr.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(arr.dtype, copy=False)
        arr -= update


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

def subseed(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


class EpochBatches:
    """Reshuffled every epoch; the trailing partial batch is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < batch_size:
            raise ValueError(f"dataset of {n} points is smaller than batch size {batch_size}")
        self.n = n
        self.batch_size = batch_size
        self.per_epoch = n // batch_size
        self.rng = rng
        self._perm = None
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        if self._pos == 0:
            self._perm = self.rng.permutation(self.n)
        start = self._pos * self.batch_size
        batch = self._perm[start : start + self.batch_size]
        self._pos = (self._pos + 1) % self.per_epoch
        return batch


def network_inputs(data: Dataset, arch: str) -> np.ndarray:
    """Features shaped for ``arch``: flattened for the MLP, (n, c, h, w) for conv."""
    x = data.features.astype(np.float32, copy=False)
    if arch == "mlp":
        return x.reshape(len(x), -1)
    if x.ndim == 3:
        return x[:, None]
    if x.ndim != 4:
        raise ValueError(f"conv architecture needs image data, got features of shape {x.shape}")
    return x


def loss_step(net: Network, batch: np.ndarray, terms=TERM_NAMES):
    """Forward pass plus loss for one batch; returns (LossBreakdown, sigma)."""
    a, h = net(batch)
    kmat = hidden_kernel(h)
    return ddc_loss(kmat, a, terms), kmat.sigma


def train_once(
    data: Dataset,
    cfg: TrainConfig,
    seed: int | None = None,
    run: int = 0,
    logger: Callable[[dict], None] | None = None,
    keep_network: bool = True,
) -> RunResult:
    """One training run. A non-finite loss marks the run as failed."""
    seed = cfg.seed if seed is None else seed
    x = network_inputs(data, cfg.arch)
    net = build_arch(cfg.arch, x.shape[1:], cfg.k)
    init_he(net, int(subseed(seed, "init").integers(2**31)))
    net.train()
    batches = EpochBatches(len(x), cfg.batch_size, subseed(seed, "batches"))
    state = AdamState.for_params(net.params)
    lr = cfg.lr
    trace = np.empty(cfg.iterations)
    window = min(batches.per_epoch, cfg.iterations)
    tail = np.zeros((window, 4))
    for it in range(cfg.iterations):
        idx = next(batches)
        net.zero_grad()
        loss, sigma = loss_step(net, x[idx], cfg.terms)
        vals = loss.values()
        if not all(math.isfinite(v) for v in vals.values()):
            msg = f"non-finite loss at iteration {it}: {vals}"
            log.warning("run %d failed: %s", run, msg)
            return RunResult(run, seed, {"l1": math.nan, "l2": math.nan, "l3": math.nan, "total": math.inf},
                             None, trace[:it], None, failed=True, error=msg)
        ad.backward(loss.total)
        adam_step(net.params, {n: p.grad for n, p in net.params.items()}, state, lr)
        trace[it] = vals["total"]
        tail[it % window] = [vals["l1"], vals["l2"], vals["l3"], vals["total"]]
        if logger is not None:
            logger({"run": run, "iter": it, **vals, "sigma": sigma})
    mean = tail.mean(axis=0)
    probs, _ = net.predict(x)
    return RunResult(
        run,
        seed,
        {"l1": float(mean[0]), "l2": float(mean[1]), "l3": float(mean[2]), "total": float(mean[3])},
        probs.argmax(axis=1),
        trace,
        net if keep_network else None,
    )


# ---------------------------------------------------------------------------
# several runs
# ---------------------------------------------------------------------------

class JsonlLog:
    """Appends one JSON record per call."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _run_worker(args) -> RunResult:
    data, cfg, seed, run, log_path = args
    if log_path is None:
        return train_once(data, cfg, seed, run)
    with JsonlLog(log_path) as jl:
        return train_once(data, cfg, seed, run, jl)


def select_best(results: list[RunResult]) -> RunResult:
    ok = [r for r in results if not r.failed]
    if not ok:
        raise RuntimeError("all training runs failed")
    return min(ok, key=lambda r: (r.final_loss["total"], r.run))


def train_multi(
    data: Dataset,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
    parallel: int = 1,
) -> tuple[RunResult, list[RunResult]]:
    """``cfg.runs`` runs with seeds seed, seed+1, ...; best = lowest final loss."""
    seeds = [cfg.seed + i for i in range(cfg.runs)]
    if parallel > 1 and cfg.runs > 1:
        parts = [None if log_path is None else f"{log_path}.part{i}" for i in range(cfg.runs)]
        jobs = [(data, cfg, s, i, parts[i]) for i, s in enumerate(seeds)]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_worker, jobs))
        if log_path is not None:
            with open(log_path, "a") as out:
                for p in parts:
                    out.write(Path(p).read_text())
                    Path(p).unlink()
    else:
        results = []
        jl = JsonlLog(log_path) if log_path is not None else None
        try:
            for i, s in enumerate(seeds):
                log.info("run %d/%d (seed %d)", i + 1, cfg.runs, s)
                results.append(train_once(data, cfg, s, i, jl))
        finally:
            if jl is not None:
                jl.close()
    if checkpoint_dir is not None:
        for r in results:
            if r.network is not None:
                path = Path(checkpoint_dir) / f"run{r.run:02d}.ckpt"
                save_checkpoint(r.network, path, {"run": r.run, "seed": r.seed, "final_loss": r.final_loss})
                r.checkpoint = str(path)
    return select_best(results), results


# ---------------------------------------------------------------------------
# voting ensemble
# ---------------------------------------------------------------------------

def align_labels(reference: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Relabel ``labels`` by the one-to-one map maximising agreement with ``reference``."""
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (labels, reference), 1)
    m = hungarian(-table)
    return m.mapping[labels]


def vote_ensemble(results, top: int = 3, k: int | None = None) -> np.ndarray:
    """Majority vote of the ``top`` lowest-loss runs after Hungarian alignment
    to the best one. Ties go to the best-ranked run among the tied labels.

    ``results`` is a list of RunResult or of ``(labels, loss)`` pairs.
    """
    runs = []
    for i, r in enumerate(results):
        if isinstance(r, RunResult):
            if r.failed:
                continue
            runs.append((r.final_loss["total"], i, np.asarray(r.assignments)))
        else:
            labels, loss = r
            runs.append((float(loss), i, np.asarray(labels)))
    if not runs:
        raise ValueError("no successful runs to vote over")
    if top < 1 or top > len(runs):
        raise ValueError(f"top={top} must be between 1 and the number of runs ({len(runs)})")
    n = len(runs[0][2])
    if any(len(lab) != n for _, _, lab in runs):
        raise ValueError("runs cover datasets of different sizes")
    runs.sort(key=lambda t: (t[0], t[1]))
    chosen = [lab.astype(np.int64) for _, _, lab in runs[:top]]
    if k is None:
        k = int(max(lab.max() for lab in chosen)) + 1
    ref = chosen[0]
    aligned = [ref] + [align_labels(ref, lab, k) for lab in chosen[1:]]
    votes = np.stack(aligned)  # (top, n), row order = rank
    counts = np.zeros((n, k), dtype=np.int64)
    for row in votes:
        counts[np.arange(n), row] += 1
    best = counts.max(axis=1)
    out = ref.copy()
    for rank_row in votes[::-1]:
        # walk ranks from worst to best so the best-ranked tied label is written last
        hit = counts[np.arange(n), rank_row] == best
        out[hit] = rank_row[hit]
    return out
