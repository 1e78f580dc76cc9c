"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`. Primitive
operations record a :class:`Node` on their output whenever one of the inputs
is tracked; :func:`backward` walks those nodes in reverse topological order
and accumulates gradients into the tracked leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "NonFiniteError",
    "backward",
    "no_grad",
    "precision",
    "debug_mode",
    "guided_relu",
    "default_dtype",
    "finite_diff_check",
    "as_tensor",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "relu",
    "clamp_min",
    "softmax",
    "conv2d",
    "maxpool2x2",
    "forward_primitive",
]


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


_state = {
    "dtype": np.dtype(np.float32),
    "grad": True,
    "debug": False,
    "guided": False,
}


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every primitive output for NaN/Inf while active."""
    old = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = old


@contextlib.contextmanager
def guided_relu() -> Iterator[None]:
    """Switch relu's backward rule to the guided-backpropagation rule.

    The flag is read when the backward pass runs, so wrap the
    :func:`backward` call, not the forward pass.
    """
    old = _state["guided"]
    _state["guided"] = True
    try:
        yield
    finally:
        _state["guided"] = old


class Node:
    """One recorded primitive application."""

    __slots__ = ("inputs", "backward_fn", "op")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        is_array = isinstance(data, (np.ndarray, np.generic))
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or not is_array:
            # python numbers and lists take the ambient precision; arrays keep theirs
            arr = arr.astype(_state["dtype"])
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    # -- method forms --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmax(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(_state["dtype"])
    return Tensor(arr)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _state["debug"]:
        _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype if data.dtype.kind == "f" else None)
    if _state["grad"] and any(t.requires_grad or t.node is not None for t in inputs):
        out.node = Node(op, inputs, backward_fn)
    return out


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if _tracked(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if _tracked(a) else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if _tracked(b) else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make("pow", a.data**p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return _make("log", out, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        if _state["guided"]:
            return (g * (mask & (g > 0)),)
        return (g * mask,)

    return _make("relu", a.data * mask, (a,), bw)


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo) elementwise; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    keep = a.data > lo
    out = np.where(keep, a.data, np.asarray(lo, dtype=a.dtype))
    return _make("clamp_min", out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if _tracked(a) else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if _tracked(b) else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis (or all); ties go to the lowest index."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]

        def bw_all(g):
            grad = np.zeros(flat.shape, dtype=a.dtype)
            grad[idx] = np.asarray(g).reshape(())
            grad = grad.reshape(a.shape)
            return (grad,)

        res = np.asarray(out)
        if keepdims:
            res = res.reshape((1,) * a.ndim)
        return _make("max", res, (a,), bw_all)

    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, ax), g, axis=ax)
        return (grad,)

    return _make("max", out if keepdims else np.squeeze(out, ax), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), bw)


# ---------------------------------------------------------------------------
# image primitives
# ---------------------------------------------------------------------------

def conv2d(x, w) -> Tensor:
    """Valid (unpadded) stride-1 cross-correlation.

    x: (N, C, H, W), w: (O, C, kh, kw) -> (N, O, H-kh+1, W-kw+1)
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape) if _tracked(w) else None
        gx = None
        if _tracked(x):
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + ho, j : j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw

    return _make("conv2d", np.ascontiguousarray(out), (x, w), bw)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2x2 expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"maxpool2x2: input {h}x{w} too small")
    crop = x.data[:, :, : 2 * h2, : 2 * w2]
    blocks = crop.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gcrop = gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * h2, : 2 * w2] = gcrop
        return (gx,)

    return _make("maxpool2x2", out, (x,), bw)


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": power,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "clamp_min": clamp_min,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "max": tmax,
    "reshape": reshape,
    "transpose": transpose,
    "softmax": softmax,
    "conv2d": conv2d,
    "maxpool2x2": maxpool2x2,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_primitive("matmul", a, b)``."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Recorded primitive applications reachable from a root, inputs first."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append((t, t.node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for t, node in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.inputs, parent_grads):
                if pg is None or not _tracked(parent):
                    continue
                if parent.node is None:
                    parent.grad += pg.astype(parent.dtype, copy=False).reshape(parent.shape)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        if root.node is None and root.requires_grad:
            root.grad += np.ones_like(root.data)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every tracked leaf's ``grad``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not _tracked(root):
        raise ValueError("backward called on an untracked tensor")
    Tape.from_root(root).backward(root)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-6,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Runs at 64-bit precision regardless of the ambient default.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with precision(np.float64):
        x = Tensor(base.copy(), requires_grad=True)
        y = f(x)
        if _tracked(y):
            backward(y)
        analytic = x.grad.copy()
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(Tensor(base.copy())).item()
                flat[i] = orig - step
                fm = f(Tensor(base.copy())).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0

