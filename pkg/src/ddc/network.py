"""The two clustering architectures, He initialisation, batch norm and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

LAYER_KINDS = ("dense", "conv2d", "maxpool2x2", "relu", "batchnorm", "softmax", "flatten")


@dataclass
class LayerSpec:
    kind: str
    units: int | None = None  # dense
    filters: int | None = None  # conv2d
    size: int | None = None  # conv2d filter side
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


class Network:
    """Ordered layers plus their parameters.

    ``hidden_index`` is the position of the layer whose output is the hidden
    representation fed to the kernel (the relu after the last fully connected
    layer before the output layer).
    """

    def __init__(self, layers: list[LayerSpec], input_shape: tuple[int, ...], arch: str, dtype=np.float32):
        self.layers = layers
        self.input_shape = tuple(int(s) for s in input_shape)
        self.arch = arch
        self.params: dict[str, Tensor] = {}
        self.bn_state: dict[str, dict[str, np.ndarray]] = {}
        self.mode = "train"
        self.initialized = False
        self.shapes = _infer_shapes(layers, self.input_shape)
        self.hidden_index = _find_hidden(layers)
        self._allocate(np.dtype(dtype))

    # -- structure ------------------------------------------------------
    @property
    def k(self) -> int:
        return self.shapes[-1][0]

    @property
    def hidden_dim(self) -> int:
        return self.shapes[self.hidden_index][0]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def _allocate(self, dtype: np.dtype) -> None:
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                fan_in = int(np.prod(shape))
                self.params[f"{layer.name}.W"] = Tensor(np.zeros((fan_in, layer.units), dtype), requires_grad=True)
                self.params[f"{layer.name}.b"] = Tensor(np.zeros(layer.units, dtype), requires_grad=True)
            elif layer.kind == "conv2d":
                c = shape[0]
                w = np.zeros((layer.filters, c, layer.size, layer.size), dtype)
                self.params[f"{layer.name}.W"] = Tensor(w, requires_grad=True)
                self.params[f"{layer.name}.b"] = Tensor(np.zeros(layer.filters, dtype), requires_grad=True)
            elif layer.kind == "batchnorm":
                width = shape[0]
                self.params[f"{layer.name}.gamma"] = Tensor(np.ones(width, dtype), requires_grad=True)
                self.params[f"{layer.name}.beta"] = Tensor(np.zeros(width, dtype), requires_grad=True)
                self.bn_state[layer.name] = {
                    "mean": np.zeros(width, np.float64),
                    "var": np.ones(width, np.float64),
                }
            shape = self.shapes[i]

    def astype(self, dtype) -> "Network":
        """Copy of the network with parameters cast to ``dtype``."""
        net = Network(self.layers, self.input_shape, self.arch, dtype)
        for name, p in self.params.items():
            net.params[name] = Tensor(p.data.astype(dtype), requires_grad=True)
        net.bn_state = {k: {s: v.copy() for s, v in st.items()} for k, st in self.bn_state.items()}
        net.mode = self.mode
        net.initialized = self.initialized
        return net

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "inference"
        return self

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward --------------------------------------------------------
    def logits(self, batch) -> tuple[Tensor, Tensor]:
        """Pre-softmax scores and hidden representation."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"batch shape {x.shape} does not match input shape {self.input_shape}")
        if self.mode == "train" and x.shape[0] < 2:
            raise ValueError("train-mode forward needs at least 2 samples for batch statistics")
        hidden = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax":
                break
            x = self._apply(layer, x)
            if i == self.hidden_index:
                hidden = x
        return x, hidden

    def forward(self, batch) -> tuple[Tensor, Tensor]:
        """Soft assignments (rows on the simplex) and the hidden representation."""
        z, hidden = self.logits(batch)
        return ad.softmax(z, axis=1), hidden

    __call__ = forward

    def _apply(self, layer: LayerSpec, x: Tensor) -> Tensor:
        kind = layer.kind
        if kind == "dense":
            return x @ self.params[f"{layer.name}.W"] + self.params[f"{layer.name}.b"]
        if kind == "conv2d":
            b = self.params[f"{layer.name}.b"]
            return ad.conv2d(x, self.params[f"{layer.name}.W"]) + b.reshape(1, -1, 1, 1)
        if kind == "maxpool2x2":
            return ad.maxpool2x2(x)
        if kind == "relu":
            return ad.relu(x)
        if kind == "flatten":
            return x.reshape(x.shape[0], -1)
        if kind == "batchnorm":
            return self._batchnorm(layer.name, x)
        raise ValueError(f"cannot apply layer {kind!r}")

    def _batchnorm(self, name: str, x: Tensor) -> Tensor:
        gamma = self.params[f"{name}.gamma"]
        beta = self.params[f"{name}.beta"]
        state = self.bn_state[name]
        if self.mode == "train":
            mu = x.mean(axis=0, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=0, keepdims=True)
            xhat = xc / ad.sqrt(var + BN_EPS)
            n = x.shape[0]
            state["mean"] = BN_MOMENTUM * state["mean"] + (1 - BN_MOMENTUM) * mu.data[0]
            unbiased = var.data[0] * n / (n - 1)
            state["var"] = BN_MOMENTUM * state["var"] + (1 - BN_MOMENTUM) * unbiased
        else:
            mean = state["mean"].astype(x.dtype)
            inv = (1.0 / np.sqrt(state["var"] + BN_EPS)).astype(x.dtype)
            xhat = (x - mean) * inv
        return xhat * gamma + beta

    def predict(self, features: np.ndarray, chunk: int = 1000) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode soft assignments and hidden features for a whole array."""
        mode = self.mode
        self.eval()
        probs, hid = [], []
        try:
            with ad.no_grad():
                for start in range(0, len(features), chunk):
                    a, h = self.forward(features[start : start + chunk])
                    probs.append(a.data)
                    hid.append(h.data)
        finally:
            self.mode = mode
        return np.concatenate(probs), np.concatenate(hid)


def _infer_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Output shape (without batch axis) after each layer; raises on underflow."""
    shape = input_shape
    out = []
    for layer in layers:
        kind = layer.kind
        if kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"dense layer {layer.name} needs flat input, got {shape}")
            shape = (layer.units,)
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"conv layer {layer.name} needs (C, H, W) input, got {shape}")
            c, h, w = shape
            h, w = h - layer.size + 1, w - layer.size + 1
            if h < 1 or w < 1:
                raise ValueError(f"input too small for {layer.size}x{layer.size} convolution {layer.name}")
            shape = (layer.filters, h, w)
        elif kind == "maxpool2x2":
            c, h, w = shape
            if h // 2 < 1 or w // 2 < 1:
                raise ValueError("input too small for 2x2 max pooling")
            shape = (c, h // 2, w // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        out.append(shape)
    return out


def _find_hidden(layers: list[LayerSpec]) -> int:
    kinds = [l.kind for l in layers]
    if kinds.count("softmax") != 1 or kinds[-1] != "softmax":
        raise ValueError("network needs exactly one softmax layer, placed last")
    dense = [i for i, k in enumerate(kinds) if k == "dense"]
    if len(dense) < 2:
        raise ValueError("network needs a hidden fully connected layer before the output layer")
    # the tap is the last layer before the output dense layer
    return dense[-1] - 1


def _named(specs: list[LayerSpec]) -> list[LayerSpec]:
    counts: dict[str, int] = {}
    for s in specs:
        i = counts.get(s.kind, 0)
        counts[s.kind] = i + 1
        if not s.name:
            s.name = f"{s.kind}{i}"
    return specs


def build_conv_arch(input_hw, k: int, channels: int = 1, dtype=np.float32) -> Network:
    """conv(32,5x5)-pool-relu-conv(64,5x5)-pool-relu-dense(100)-bn-relu-dense(k)-softmax."""
    if k < 2:
        raise ValueError("k must be at least 2")
    h, w = input_hw
    layers = _named([
        LayerSpec("conv2d", filters=32, size=5),
        LayerSpec("maxpool2x2"),
        LayerSpec("relu"),
        LayerSpec("conv2d", filters=64, size=5),
        LayerSpec("maxpool2x2"),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", units=100),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("dense", units=k),
        LayerSpec("softmax"),
    ])
    return Network(layers, (channels, h, w), "conv", dtype)


def build_mlp_arch(input_dim: int, k: int, dtype=np.float32) -> Network:
    """dense(200)-relu-dense(200)-relu-dense(500)-bn-relu-dense(k)-softmax."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if input_dim < 1:
        raise ValueError("input_dim must be positive")
    layers = _named([
        LayerSpec("dense", units=200),
        LayerSpec("relu"),
        LayerSpec("dense", units=200),
        LayerSpec("relu"),
        LayerSpec("dense", units=500),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("dense", units=k),
        LayerSpec("softmax"),
    ])
    return Network(layers, (int(input_dim),), "mlp", dtype)


def build_arch(arch: str, input_shape: tuple[int, ...], k: int, dtype=np.float32) -> Network:
    if arch == "mlp":
        return build_mlp_arch(int(np.prod(input_shape)), k, dtype)
    if arch == "conv":
        if len(input_shape) == 2:
            return build_conv_arch(input_shape, k, 1, dtype)
        if len(input_shape) == 3:
            return build_conv_arch(input_shape[1:], k, input_shape[0], dtype)
        raise ValueError(f"conv architecture needs image input, got shape {input_shape}")
    raise ValueError(f"unknown architecture {arch!r}")


def init_he(net: Network, seed: int) -> None:
    """Weights ~ N(0, 2/fan_in), zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(seed)
    for name in sorted(net.params):
        p = net.params[name]
        kind = name.rsplit(".", 1)[1]
        if kind == "W":
            shape = p.shape
            fan_in = shape[0] if p.ndim == 2 else int(np.prod(shape[1:]))
            p.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(p.dtype)
        elif kind in ("b", "beta"):
            p.data = np.zeros(p.shape, p.dtype)
        elif kind == "gamma":
            p.data = np.ones(p.shape, p.dtype)
        p.zero_grad()
    for st in net.bn_state.values():
        st["mean"][:] = 0.0
        st["var"][:] = 1.0
    net.initialized = True


def guided_backprop(net: Network, inputs, unit: int) -> np.ndarray:
    """Guided-backprop saliency of the pre-softmax score of ``unit``.

    ``inputs`` is one sample or a batch; the result has the same shape.
    Runs in inference mode, so batch norm uses its running statistics.
    """
    if not net.initialized:
        raise ValueError("network is not initialised")
    if not 0 <= unit < net.k:
        raise ValueError(f"unit {unit} out of range for k={net.k}")
    arr = np.asarray(inputs, dtype=net.dtype)
    batch = as_batch(net, arr)
    mode = net.mode
    net.eval()
    try:
        x = Tensor(batch, requires_grad=True)
        z, _ = net.logits(x)
        score = _column_sum(z, unit)
        with ad.guided_relu():
            ad.backward(score)
    finally:
        net.mode = mode
        net.zero_grad()
    return x.grad.reshape(arr.shape)


def as_batch(net: Network, arr: np.ndarray) -> np.ndarray:
    """Reshape one sample (or a batch) to ``(n,) + net.input_shape``."""
    per = int(np.prod(net.input_shape))
    if arr.shape[1:] == net.input_shape:
        return arr
    if arr.size == per:
        return arr.reshape((1,) + net.input_shape)
    if arr.size % per == 0:
        return arr.reshape((-1,) + net.input_shape)
    raise ValueError(f"input of shape {arr.shape} does not fit network input {net.input_shape}")


def _column_sum(z: Tensor, unit: int) -> Tensor:
    sel = np.zeros((z.shape[1], 1), dtype=z.dtype)
    sel[unit, 0] = 1.0
    return (z @ Tensor(sel)).sum()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DDCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    """Write parameters, batch-norm state and layer specs.

    Layout: magic, u16 version, u32 manifest length, JSON manifest, then the
    tensors as little-endian float32 at the manifest's byte offsets (relative
    to the start of the data section).
    """
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{n}", p.data) for n, p in net.params.items()]
    for layer, st in net.bn_state.items():
        for stat in ("mean", "var"):
            tensors.append((f"bn/{layer}/{stat}", st[stat]))
    entries, offset, blobs = [], 0, []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "arch": net.arch,
        "input_shape": list(net.input_shape),
        "layers": [asdict(l) for l in net.layers],
        "tensors": entries,
        "initialized": net.initialized,
        "meta": meta or {},
    }
    header = json.dumps(manifest).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype=np.float32) -> tuple[Network, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<HI", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    manifest = json.loads(raw[pos : pos + hlen])
    data = memoryview(raw)[pos + hlen :]
    layers = [LayerSpec(**l) for l in manifest["layers"]]
    net = Network(layers, tuple(manifest["input_shape"]), manifest["arch"], dtype)
    for e in manifest["tensors"]:
        chunk = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"])
        kind, rest = e["name"].split("/", 1)
        if kind == "param":
            if rest not in net.params or net.params[rest].shape != arr.shape:
                raise ValueError(f"{path}: unexpected parameter {rest} {arr.shape}")
            net.params[rest] = Tensor(arr.astype(dtype), requires_grad=True)
        else:
            layer, stat = rest.split("/")
            net.bn_state[layer][stat] = arr.astype(np.float64)
    net.initialized = manifest.get("initialized", True)
    return net, manifest.get("meta", {})
