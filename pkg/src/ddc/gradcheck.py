"""Central finite differences of the clustering loss over every network parameter.

The loss is re-evaluated by a plain numpy forward pass that shares no code
with the autodiff engine. Perturbations are evaluated in vectorised chunks:
nudging one weight changes a single output column (dense) or channel (conv)
of its layer, and that locality is carried through the column-wise layers
(relu, pooling, batch norm, flatten) until the next linear layer mixes it
into a full activation. The kernel bandwidth is held at its unperturbed
value, matching the analytic gradient which treats it as a constant.

A central difference is only meaningful when both nudged evaluations stay on
the same linear piece of every relu and max-pool. The reference pass flags
perturbations that flip a relu sign or change a pooling winner; those
coordinates are re-measured with smaller steps, and any that still cross a
kink are reported instead of being scored.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .kernel import SIGMA_FLOOR, SIGMA_FRACTION, hidden_kernel
from .loss import EPS, TERM_NAMES, ddc_loss
from .network import BN_EPS, Network

CHUNK_ELEMS = 1_000_000


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    n_checked: int
    seconds: float
    loss: float
    reference_loss: float
    n_refined: int = 0  # coordinates re-measured with a smaller step
    n_unresolved: int = 0  # coordinates that crossed a kink at every step


# ---------------------------------------------------------------------------
# reference forward pass (numpy, float64)
# ---------------------------------------------------------------------------

def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(-2, -1))  # (..., C, Ho, Wo, k, k)
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def _pool(x: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    x = x[..., : 2 * h2, : 2 * w2].reshape(*lead, h2, 2, w2, 2)
    return x.max(axis=(-3, -1))


def _pool_winner(x: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    x = x[..., : 2 * h2, : 2 * w2].reshape(*lead, h2, 2, w2, 2)
    x = np.moveaxis(x, -3, -2).reshape(*lead, h2, w2, 4)
    return x.argmax(axis=-1)


def _bn(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch normalisation over ``axis`` (the batch axis, 1 here); returns (output, x_hat)."""
    n = x.shape[axis]
    centred = x - x.mean(axis=axis, keepdims=True)
    var = np.einsum("pnf,pnf->pf", centred, centred)[:, None, :] * (1.0 / n)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centred * inv
    out = centred
    out *= inv * gamma
    out += beta
    return out, xhat


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _cs(kmat: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Batched divergence term; kmat (P, m, m), a (P, m, k) -> (P,)."""
    g = np.swapaxes(a, -1, -2) @ kmat @ a
    d = np.diagonal(g, axis1=-2, axis2=-1)
    r = g / np.sqrt(d[..., :, None] * d[..., None, :] + EPS)
    k = a.shape[-1]
    iu = np.triu_indices(k, 1)
    return r[..., iu[0], iu[1]].sum(axis=-1) / k


def _loss_from(dist: np.ndarray, logits: np.ndarray, sigma: float, terms) -> np.ndarray:
    kmat = np.exp(-dist / (2.0 * sigma**2))
    a = _softmax(logits)
    m = a.shape[-2]
    total = np.zeros(dist.shape[:-2])
    if "l1" in terms:
        total = total + _cs(kmat, a)
    if "l2" in terms:
        s = a @ np.swapaxes(a, -1, -2)
        iu = np.triu_indices(m, 1)
        total = total + s[..., iu[0], iu[1]].sum(axis=-1) * (2.0 / (m * (m - 1)))
    if "l3" in terms:
        sq = (a * a).sum(axis=-1, keepdims=True)
        total = total + _cs(kmat, np.exp(-(sq - 2.0 * a + 1.0)))
    return total


def _sq_dist(h: np.ndarray) -> np.ndarray:
    diff = h[..., :, None, :] - h[..., None, :, :]
    return (diff * diff).sum(axis=-1)


def _sq_dist_gram(h: np.ndarray) -> np.ndarray:
    sq = np.einsum("...f,...f->...", h, h)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * (h @ np.swapaxes(h, -1, -2))
    return np.maximum(d, 0.0)


class ReferenceModel:
    """Numpy re-implementation of a network's train-mode forward pass and loss."""

    def __init__(self, net: Network, batch: np.ndarray, terms=TERM_NAMES):
        self.net = net
        self.layers = [l for l in net.layers if l.kind != "softmax"]
        self.p = {n: t.data.astype(np.float64) for n, t in net.params.items()}
        self.terms = tuple(terms)
        self.hidden = net.hidden_index
        x = np.asarray(batch, dtype=np.float64)
        self.inputs: list[np.ndarray] = []
        self.outputs: list[np.ndarray] = []
        self.xhat: dict[int, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            self.inputs.append(x)
            x = self._full(i, x[None])[0]
            self.outputs.append(x)
        self.base_dist = _sq_dist(self.outputs[self.hidden])
        iu = np.triu_indices(len(x), 1)
        med = float(np.median(np.sqrt(self.base_dist[iu])))
        self.sigma = SIGMA_FRACTION * med if med > 0 else SIGMA_FLOOR
        self.loss = float(_loss_from(self.base_dist[None], x[None], self.sigma, self.terms)[0])

    # full (P, batch, ...) propagation through layer i
    def _full(self, i: int, x: np.ndarray) -> np.ndarray:
        layer = self.layers[i]
        kind, name = layer.kind, layer.name
        if kind == "dense":
            return x @ self.p[f"{name}.W"] + self.p[f"{name}.b"]
        if kind == "conv2d":
            P, n = x.shape[:2]
            out = _conv(x.reshape(P * n, *x.shape[2:]), self.p[f"{name}.W"])
            out = out + self.p[f"{name}.b"][:, None, None]
            return out.reshape(P, n, *out.shape[1:])
        if kind == "relu":
            return np.maximum(x, 0.0)
        if kind == "maxpool2x2":
            return _pool(x)
        if kind == "flatten":
            return x.reshape(x.shape[0], x.shape[1], -1)
        if kind == "batchnorm":
            out, xhat = _bn(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"], axis=1)
            if x.shape[0] == 1 and i not in self.xhat:
                self.xhat[i] = xhat[0]
            return out
        raise ValueError(kind)

    # group propagation: only features ``idx`` (P, g) differ from the base output
    def _group(self, i: int, idx: np.ndarray, vals: np.ndarray):
        layer = self.layers[i]
        kind, name = layer.kind, layer.name
        if kind == "relu":
            return "group", idx, np.maximum(vals, 0.0)
        if kind == "maxpool2x2":
            return "group", idx, _pool(vals)
        if kind == "batchnorm":
            g = self.p[f"{name}.gamma"][idx][:, None, :]
            b = self.p[f"{name}.beta"][idx][:, None, :]
            return "group", idx, _bn(vals, g, b, axis=1)[0]
        if kind == "flatten":
            hw = int(np.prod(vals.shape[3:]))
            flat_idx = (idx[:, :, None] * hw + np.arange(hw)).reshape(len(idx), -1)
            return "group", flat_idx, vals.reshape(vals.shape[0], vals.shape[1], -1)
        base_in = self.inputs[i]
        delta = vals - np.moveaxis(base_in[:, idx], 0, 1)
        if kind == "dense":
            w = self.p[f"{name}.W"][idx]  # (P, g, out)
            step = delta * w if idx.shape[1] == 1 else delta @ w
            return "full", None, self.outputs[i][None] + step
        if kind == "conv2d":
            w = np.moveaxis(self.p[f"{name}.W"][:, idx], 0, 2)  # (P, g, O, k, k)
            P, g, o, k = w.shape[:3] + w.shape[-1:]
            win = sliding_window_view(delta, (k, k), axis=(-2, -1))  # (P, n, g, Ho, Wo, k, k)
            n, ho, wo = win.shape[1], win.shape[3], win.shape[4]
            cols = np.moveaxis(win, 2, 4).reshape(P, n * ho * wo, g * k * k)
            d_out = cols @ np.moveaxis(w, 2, -1).reshape(P, g * k * k, o)
            d_out = np.moveaxis(d_out.reshape(P, n, ho, wo, o), 4, 2)
            return "full", None, self.outputs[i][None] + d_out
        raise ValueError(kind)

    def _kinks(self, i: int, mode: str, idx, vals) -> np.ndarray:
        """Per perturbation: does layer ``i`` (relu or pool) switch pieces?"""
        kind = self.layers[i].kind
        base = self.inputs[i] if mode == "full" else np.moveaxis(self.inputs[i][:, idx], 0, 1)
        if kind == "relu":
            changed = (vals > 0) != (base > 0)
        else:
            changed = _pool_winner(vals) != _pool_winner(base)
        return changed.reshape(len(vals), -1).any(axis=1)

    def _finish(self, start: int, mode: str, idx, vals) -> tuple[np.ndarray, np.ndarray]:
        """Propagate from layer ``start`` to the loss; also returns kink-crossing flags."""
        crossed = np.zeros(len(vals), dtype=bool)
        for i in range(start, len(self.layers)):
            if self.layers[i].kind in ("relu", "maxpool2x2"):
                crossed |= self._kinks(i, mode, idx, vals)
            if i == self.hidden + 1:
                if mode == "group":
                    base_h = np.moveaxis(self.outputs[self.hidden][:, idx], 0, 1)
                    dist = self.base_dist[None] + _sq_dist(vals) - _sq_dist(base_h)
                else:
                    dist = _sq_dist_gram(vals)
            if mode == "full":
                vals = self._full(i, vals)
            else:
                mode, idx, vals = self._group(i, idx, vals)
        if mode == "group":
            # perturbation reached the logits without being mixed: scatter it back
            full = np.repeat(self.outputs[-1][None], len(vals), axis=0)
            rows = np.arange(len(vals))[:, None]
            full[rows, :, idx] = np.moveaxis(vals, 1, 2)
            vals = full
        if start > self.hidden:
            dist = np.broadcast_to(self.base_dist, (len(vals),) + self.base_dist.shape)
        return _loss_from(dist, vals, self.sigma, self.terms), crossed

    def perturbed_losses(self, name: str, coords: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
        """Loss with parameter ``name`` flat coordinates ``coords`` shifted by ``h``.

        The second array marks perturbations that crossed a relu or pooling kink.
        """
        layer_name, kind = name.rsplit(".", 1)
        li = next(i for i, l in enumerate(self.layers) if l.name == layer_name)
        layer = self.layers[li]
        shape = self.p[name].shape
        out = self.outputs[li]
        x = self.inputs[li]
        P = len(coords)
        if layer.kind == "dense":
            if kind == "W":
                r, c = np.unravel_index(coords, shape)
                vals = out[:, c].T + h * x[:, r].T
            else:
                c = coords
                vals = out[:, c].T + h
            idx = c[:, None]
            vals = vals[:, :, None]
        elif layer.kind == "conv2d":
            if kind == "W":
                o, ch, u, v = np.unravel_index(coords, shape)
                ho, wo = out.shape[-2:]
                win = sliding_window_view(x, (ho, wo), axis=(-2, -1))  # (n, C, kh, kw, ho, wo)
                patch = np.moveaxis(win[:, ch, u, v], 0, 1)  # (P, n, ho, wo)
                vals = np.moveaxis(out[:, o], 0, 1) + h * patch
            else:
                o = coords
                vals = np.moveaxis(out[:, o], 0, 1) + h
            idx = o[:, None]
            vals = vals[:, :, None]
        elif layer.kind == "batchnorm":
            c = coords
            xh = self.xhat[li][:, c].T
            vals = out[:, c].T + (h * xh if kind == "gamma" else h)
            idx = c[:, None]
            vals = vals[:, :, None]
        else:
            raise ValueError(f"no parameters on layer {layer.kind}")
        assert len(vals) == P
        return self._finish(li + 1, "group", idx, vals)


def _chunk_size(ref: ReferenceModel, name: str) -> int:
    """Perturbations per chunk, sized by the widest activation that gets materialised."""
    layer_name = name.rsplit(".", 1)[0]
    li = next(i for i, l in enumerate(ref.layers) if l.name == layer_name)
    mixing = [j for j in range(li + 1, len(ref.layers)) if ref.layers[j].kind in ("dense", "conv2d")]
    start = mixing[0] if mixing else len(ref.layers) - 1
    widest = max(int(np.prod(o.shape)) for o in ref.outputs[start:])
    if ref.layers[start].kind == "conv2d":
        widest *= 2  # im2col buffer
    return max(16, CHUNK_ELEMS // widest)


def analytic_gradients(net: Network, batch: np.ndarray, terms=TERM_NAMES) -> tuple[dict[str, np.ndarray], float]:
    net.train()
    net.zero_grad()
    with ad.precision(np.float64):
        a, h = net(np.asarray(batch, dtype=np.float64))
        loss = ddc_loss(hidden_kernel(h), a, terms)
        ad.backward(loss.total)
    return {n: p.grad.copy() for n, p in net.params.items()}, loss.total.item()


def _central(ref: ReferenceModel, name: str, coords: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    fp, cp = ref.perturbed_losses(name, coords, h)
    fm, cm = ref.perturbed_losses(name, coords, -h)
    return (fp - fm) / (2 * h), cp | cm


def check_network_gradients(
    net: Network,
    batch: np.ndarray,
    terms=TERM_NAMES,
    step: float = 1e-6,
    refinements: int = 3,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences for every parameter.

    ``net`` is converted to float64. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|). Coordinates whose step crosses
    a kink are retried with the step shrunk tenfold, up to ``refinements``
    times; the ones still crossing are counted in ``n_unresolved`` and left
    out of the error.
    """
    t0 = time.perf_counter()
    net64 = net.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    grads, loss = analytic_gradients(net64, batch, terms)
    ref = ReferenceModel(net64, batch, terms)
    per_param = {}
    total = refined = unresolved = 0
    for name in net64.params:
        chunk = _chunk_size(ref, name)
        g = grads[name].reshape(-1)
        numeric = np.empty_like(g)
        crossed = np.zeros(g.size, dtype=bool)
        for start in range(0, g.size, chunk):
            sl = slice(start, min(start + chunk, g.size))
            numeric[sl], crossed[sl] = _central(ref, name, np.arange(sl.start, sl.stop), step)
        h = step
        for _ in range(refinements):
            todo = np.flatnonzero(crossed)
            if not todo.size:
                break
            refined += todo.size
            h /= 10
            for start in range(0, todo.size, chunk):
                part = todo[start : start + chunk]
                numeric[part], crossed[part] = _central(ref, name, part, h)
        unresolved += int(crossed.sum())
        err = np.abs(g - numeric) / np.maximum(1.0, np.abs(g))
        per_param[name] = float(err[~crossed].max(initial=0.0))
        total += g.size
    return GradCheckReport(
        max(per_param.values()), per_param, total, time.perf_counter() - t0, loss, ref.loss,
        refined, unresolved,
    )
