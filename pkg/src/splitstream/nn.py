"""Minimal numpy neural-network engine with a client/server split.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout (or ``(N, F)`` after
a flatten). Five layer kinds are supported: dense, 3x3 same-padded conv, ReLU,
2x2 max-pool and flatten. A :class:`SplitModel` owns the full layer stack and a
cut index; layers ``[0, cut)`` form the client part and ``[cut, n)`` the server
part.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "LayerSpec",
    "dense",
    "conv3x3",
    "relu",
    "maxpool2x2",
    "flatten",
    "SplitModel",
    "build_model",
    "vgg_desk_spec",
    "cut_preset",
    "monolithic_step",
    "ShapeError",
    "PendingStateError",
    "CheckpointError",
]

KINDS = ("dense", "conv2d-3x3", "relu", "maxpool-2x2", "flatten")
_KIND_CODES = {kind: i for i, kind in enumerate(KINDS)}

CHECKPOINT_MAGIC = b"SSNN"
CHECKPOINT_F32 = 1
CHECKPOINT_F64 = 2


class ShapeError(ValueError):
    """Raised when tensor or layer dimensions do not chain."""


class PendingStateError(RuntimeError):
    """Raised when a backward pass has no matching forward pass."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        want = 2 if self.kind in ("dense", "conv2d-3x3") else 0
        if len(self.dims) != want or any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"{self.kind} expects {want} positive dims, got {self.dims}")

    def __str__(self):
        return f"{self.kind}{self.dims if self.dims else ''}"


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv3x3(c_in: int, c_out: int) -> LayerSpec:
    return LayerSpec("conv2d-3x3", (c_in, c_out))


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2x2() -> LayerSpec:
    return LayerSpec("maxpool-2x2")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


# --------------------------------------------------------------------------
# Layer kernels
# --------------------------------------------------------------------------


class Layer:
    """One layer of the stack. ``forward`` returns ``(y, cache)``; ``backward``
    consumes that cache and returns ``(dx, param_grads)``."""

    params: list[np.ndarray]

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...]):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = self._infer_shape(in_shape)
        self.params = []

    @property
    def kind(self) -> str:
        return self.spec.kind

    def _infer_shape(self, in_shape):
        return in_shape

    def macs(self) -> int:
        """Multiply-accumulates per sample."""
        return 0

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, g):
        raise NotImplementedError


class Dense(Layer):
    def _infer_shape(self, in_shape):
        n_in, n_out = self.spec.dims
        if in_shape != (n_in,):
            raise ShapeError(f"dense expects input ({n_in},), got {in_shape}")
        return (n_out,)

    def macs(self):
        return self.spec.dims[0] * self.spec.dims[1]

    def forward(self, x):
        w, b = self.params
        return x @ w + b, x

    def backward(self, x, g):
        w, _ = self.params
        return g @ w.T, [x.T @ g, g.sum(axis=0)]


def _im2col(x: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N*H*W, C*9), column order (c, ky, kx)
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, h, w, c, 3, 3), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, :, ky, kx] = xp[:, :, ky : ky + h, kx : kx + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky : ky + h, kx : kx + w] += d[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


class Conv3x3(Layer):
    """Stride-1, zero-padded 3x3 convolution. Weights are ``(C_out, C_in, 3, 3)``."""

    def _infer_shape(self, in_shape):
        c_in, c_out = self.spec.dims
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(f"conv2d-3x3 expects input ({c_in}, H, W), got {in_shape}")
        return (c_out, in_shape[1], in_shape[2])

    def macs(self):
        c_in, c_out = self.spec.dims
        return self.out_shape[1] * self.out_shape[2] * c_in * c_out * 9

    def forward(self, x):
        w, b = self.params
        n, _, h, wd = x.shape
        cols = _im2col(x)
        out = cols @ w.reshape(w.shape[0], -1).T + b
        return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, cache, g):
        cols, shape = cache
        w, _ = self.params
        c_out = w.shape[0]
        gr = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (gr.T @ cols).reshape(w.shape)
        db = gr.sum(axis=0)
        dx = _col2im(gr @ w.reshape(c_out, -1), shape)
        return dx, [dw, db]


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, x.dtype.type(0)), mask

    def backward(self, mask, g):
        return np.where(mask, g, g.dtype.type(0)), []


class MaxPool2x2(Layer):
    def _infer_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"maxpool-2x2 needs (C, even H, even W), got {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, cache, g):
        idx, (n, c, h, w) = cache
        win = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        dx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(n, c, h, w), []


class Flatten(Layer):
    def _infer_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, g):
        return g.reshape(shape), []


_LAYER_TYPES = {
    "dense": Dense,
    "conv2d-3x3": Conv3x3,
    "relu": ReLU,
    "maxpool-2x2": MaxPool2x2,
    "flatten": Flatten,
}


def _forward_stack(layers, x, keep=True):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        if keep:
            caches.append(cache)
    return x, caches


def _backward_stack(layers, caches, g):
    grads = []
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g, pg = layer.backward(cache, g)
        grads.append(pg)
    grads.reverse()
    return g, grads


def _sgd(layers, grads, lr):
    for layer, pg in zip(layers, grads):
        for p, gp in zip(layer.params, pg):
            p -= p.dtype.type(lr) * gp


def cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Mean natural-log cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    dz = ez / s
    dz[rows, y] -= 1
    dz /= n
    return float(loss), dz


# --------------------------------------------------------------------------
# Split model
# --------------------------------------------------------------------------


@dataclass
class _Pending:
    caches: list
    extra: object = None


@dataclass
class SplitModel:
    """Ordered layer stack split at ``cut_index`` into client and server parts."""

    layers: list[Layer]
    cut_index: int
    seed: int
    input_shape: tuple[int, ...]
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))
    _client_pending: _Pending | None = field(default=None, repr=False)
    _server_pending: _Pending | None = field(default=None, repr=False)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def client_layers(self) -> list[Layer]:
        return self.layers[: self.cut_index]

    @property
    def server_layers(self) -> list[Layer]:
        return self.layers[self.cut_index :]

    @property
    def cut_shape(self) -> tuple[int, ...]:
        return self.layers[self.cut_index].in_shape

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_shape[0]

    def parameters(self, part: str = "all") -> list[np.ndarray]:
        layers = {"all": self.layers, "client": self.client_layers, "server": self.server_layers}[part]
        return [p for layer in layers for p in layer.params]

    def num_parameters(self, part: str = "all") -> int:
        return sum(p.size for p in self.parameters(part))

    def copy(self) -> "SplitModel":
        return load_checkpoint(self.to_checkpoint(), self.cut_index, self.input_shape, seed=self.seed)

    def _check_input(self, x, shape, what):
        if x.ndim != len(shape) + 1 or tuple(x.shape[1:]) != tuple(shape):
            raise ShapeError(f"{what} expects (N, {', '.join(map(str, shape))}), got {x.shape}")
        return np.asarray(x, dtype=self.dtype)

    # client side -------------------------------------------------------

    def forward_client(self, x: np.ndarray) -> np.ndarray:
        """Cut-layer activation for ``x``; intermediates are kept for backward."""
        x = self._check_input(x, self.input_shape, "forward_client")
        act, caches = _forward_stack(self.client_layers, x)
        self._client_pending = _Pending(caches, act.shape)
        return act

    def backward_client(self, cut_grad: np.ndarray, lr: float) -> None:
        if self._client_pending is None:
            raise PendingStateError("backward_client called without a pending forward_client")
        if tuple(cut_grad.shape) != tuple(self._client_pending.extra):
            raise ShapeError(
                f"cut gradient shape {cut_grad.shape} != activation shape {self._client_pending.extra}"
            )
        g = np.asarray(cut_grad, dtype=self.dtype)
        _, grads = _backward_stack(self.client_layers, self._client_pending.caches, g)
        self._client_pending = None
        _sgd(self.client_layers, grads, lr)

    # server side -------------------------------------------------------

    def forward_server(self, act: np.ndarray, y: np.ndarray) -> float:
        act = self._check_input(act, self.cut_shape, "forward_server")
        y = self._check_labels(y, act.shape[0])
        logits, caches = _forward_stack(self.server_layers, act)
        loss, dlogits = cross_entropy(logits, y)
        self._server_pending = _Pending(caches, dlogits)
        return loss

    def backward_server(self, lr: float) -> np.ndarray:
        """SGD-update the server part and return d(loss)/d(activation).

        All gradients are taken at the pre-update weights.
        """
        if self._server_pending is None:
            raise PendingStateError("backward_server called without a pending forward_server")
        pending, self._server_pending = self._server_pending, None
        dact, grads = _backward_stack(self.server_layers, pending.caches, pending.extra)
        _sgd(self.server_layers, grads, lr)
        return dact

    def _check_labels(self, y, n):
        y = np.asarray(y)
        if y.shape != (n,):
            raise ShapeError(f"expected {n} labels, got shape {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        return y.astype(np.int64)

    # whole model -------------------------------------------------------

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Logits for ``x``; caches nothing and leaves pending state untouched."""
        x = self._check_input(x, self.input_shape, "predict")
        return _forward_stack(self.layers, x, keep=False)[0]

    def predict_client(self, x: np.ndarray) -> np.ndarray:
        """Cut-layer activation without caching (for probes and evaluation)."""
        x = self._check_input(x, self.input_shape, "predict_client")
        return _forward_stack(self.client_layers, x, keep=False)[0]

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        logits = self.predict(x)
        return cross_entropy(logits, self._check_labels(y, x.shape[0]))[0]

    def gradients(self, x, y):
        """Per-parameter gradients (all layers) plus the cut-activation gradient."""
        x = self._check_input(x, self.input_shape, "gradients")
        y = self._check_labels(y, x.shape[0])
        act, ccache = _forward_stack(self.client_layers, x)
        logits, scache = _forward_stack(self.server_layers, act)
        _, dlogits = cross_entropy(logits, y)
        dact, sgrads = _backward_stack(self.server_layers, scache, dlogits)
        _, cgrads = _backward_stack(self.client_layers, ccache, dact)
        flat = [g for pg in cgrads + sgrads for g in pg]
        return flat, dact

    def grad_check(self, x: np.ndarray, y: np.ndarray, eps: float = 1e-6) -> float:
        """Central-difference check over every parameter and the cut activation.

        Returns the largest norm-wise relative error
        ``|analytic - numeric| / max(|analytic|, |numeric|)`` over all tensors.
        Run in float64 mode.
        """
        if not eps > 0:
            raise ValueError("eps must be positive")
        analytic, dact = self.gradients(x, y)
        x = self._check_input(x, self.input_shape, "grad_check")
        y = self._check_labels(y, x.shape[0])

        def rel(a, n):
            den = max(np.linalg.norm(a), np.linalg.norm(n))
            return 0.0 if den == 0 else float(np.linalg.norm(a - n) / den)

        worst = 0.0
        for p, a in zip(self.parameters(), analytic):
            num = np.zeros_like(p)
            flat, nflat = p.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = self.loss(x, y)
                flat[i] = orig - eps
                down = self.loss(x, y)
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            worst = max(worst, rel(a, num))

        act = _forward_stack(self.client_layers, x, keep=False)[0]
        num = np.zeros_like(act)
        aflat, nflat = act.reshape(-1), num.reshape(-1)
        for i in range(aflat.size):
            orig = aflat[i]
            aflat[i] = orig + eps
            up = cross_entropy(_forward_stack(self.server_layers, act, keep=False)[0], y)[0]
            aflat[i] = orig - eps
            down = cross_entropy(_forward_stack(self.server_layers, act, keep=False)[0], y)[0]
            aflat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        return max(worst, rel(dact, num))

    # accounting --------------------------------------------------------

    def client_forward_flops(self, batch: int) -> int:
        return 2 * batch * sum(layer.macs() for layer in self.client_layers)

    def client_backward_flops(self, batch: int) -> int:
        # weight gradient + input gradient, each as costly as the forward
        return 2 * self.client_forward_flops(batch)

    # serialization -----------------------------------------------------

    def to_checkpoint(self, part: str = "all") -> bytes:
        layers = {"all": self.layers, "client": self.client_layers, "server": self.server_layers}[part]
        return _write_checkpoint(layers, self.dtype)

    def load_parameters(self, blob: bytes, part: str = "all") -> None:
        """Overwrite this model's parameters from a checkpoint of the same layers."""
        specs, arrays, dtype = _read_checkpoint(blob)
        layers = {"all": self.layers, "client": self.client_layers, "server": self.server_layers}[part]
        if specs != [layer.spec for layer in layers]:
            raise CheckpointError("checkpoint layers do not match model")
        params = [p for layer in layers for p in layer.params]
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise CheckpointError(f"parameter shape {a.shape} != {p.shape}")
            p[...] = a


def _chain(spec: Sequence[LayerSpec], input_shape):
    layers = []
    shape = tuple(input_shape)
    prev = "input"
    for i, s in enumerate(spec):
        try:
            layer = _LAYER_TYPES[s.kind](s, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({s}) does not accept output of {prev}: {exc}") from None
        layers.append(layer)
        shape = layer.out_shape
        prev = f"layer {i} ({s}) -> {shape}"
    if len(shape) != 1:
        raise ShapeError(f"model must end in a flat logit vector, ends with shape {shape}")
    return layers


def _infer_input_shape(spec):
    if spec and spec[0].kind == "dense":
        return (spec[0].dims[0],)
    raise ShapeError("input_shape is required unless the first layer is dense")


def build_model(
    spec: Sequence[LayerSpec],
    cut_index: int,
    seed: int,
    input_shape: tuple[int, ...] | None = None,
    dtype=np.float32,
) -> SplitModel:
    """Build a split model with He-initialized weights and zero biases.

    Initialization draws from ``numpy.random.Generator(PCG64(seed))`` in float64
    and is then cast, so equal ``(spec, seed)`` give bit-identical parameters.
    """
    spec = list(spec)
    if not 1 <= cut_index < len(spec):
        raise ValueError(f"cut_index must be in [1, {len(spec) - 1}], got {cut_index}")
    if input_shape is None:
        input_shape = _infer_input_shape(spec)
    dtype = np.dtype(dtype)
    layers = _chain(spec, input_shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in layers:
        if layer.kind == "dense":
            n_in, n_out = layer.spec.dims
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
            layer.params = [w.astype(dtype), np.zeros(n_out, dtype=dtype)]
        elif layer.kind == "conv2d-3x3":
            c_in, c_out = layer.spec.dims
            w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
            layer.params = [w.astype(dtype), np.zeros(c_out, dtype=dtype)]
    return SplitModel(layers, cut_index, seed, tuple(input_shape), dtype)


def vgg_desk_spec(in_channels: int = 3, width: int = 8, spatial: int = 8, classes: int = 10):
    """VGG-style desk model: conv-relu-pool, conv-relu, conv-relu, pool, dense.

    ``spatial`` must be divisible by 4. The small cut (index 3) follows the first
    conv+pool block; the large cut (index 7) follows the third conv.
    """
    if spatial % 4:
        raise ValueError("spatial size must be divisible by 4")
    w2 = 2 * width
    return [
        conv3x3(in_channels, width), relu(), maxpool2x2(),
        conv3x3(width, w2), relu(),
        conv3x3(w2, w2), relu(),
        maxpool2x2(), flatten(),
        dense(w2 * (spatial // 4) ** 2, classes),
    ]


CUT_PRESETS = {"small": 3, "large": 7}


def cut_preset(name: str | int) -> int:
    if isinstance(name, int):
        return name
    try:
        return CUT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown cut preset {name!r}; expected one of {sorted(CUT_PRESETS)}") from None


def monolithic_step(model: SplitModel, x: np.ndarray, y: np.ndarray, lr: float) -> float:
    """One SGD step on the unsplit stack. Used as the reference trainer."""
    x = model._check_input(x, model.input_shape, "monolithic_step")
    y = model._check_labels(y, x.shape[0])
    logits, caches = _forward_stack(model.layers, x)
    loss, dlogits = cross_entropy(logits, y)
    _, grads = _backward_stack(model.layers, caches, dlogits)
    _sgd(model.layers, grads, lr)
    return loss


# --------------------------------------------------------------------------
# Checkpoint format: "SSNN", u16 version, u16 layer count, then per layer
# u8 kind, u8 ndims, ndims x u32, params (W then b) as raw little-endian floats.
# Version 1 stores float32 payloads, version 2 float64.
# --------------------------------------------------------------------------


def _write_checkpoint(layers, dtype) -> bytes:
    version = CHECKPOINT_F64 if np.dtype(dtype) == np.float64 else CHECKPOINT_F32
    wire = np.dtype("<f8") if version == CHECKPOINT_F64 else np.dtype("<f4")
    out = [CHECKPOINT_MAGIC, struct.pack("<HH", version, len(layers))]
    for layer in layers:
        dims = layer.spec.dims
        out.append(struct.pack(f"<BB{len(dims)}I", _KIND_CODES[layer.kind], len(dims), *dims))
        for p in layer.params:
            out.append(np.ascontiguousarray(p, dtype=wire).tobytes())
    return b"".join(out)


def _param_shapes(spec: LayerSpec):
    if spec.kind == "dense":
        n_in, n_out = spec.dims
        return [(n_in, n_out), (n_out,)]
    if spec.kind == "conv2d-3x3":
        c_in, c_out = spec.dims
        return [(c_out, c_in, 3, 3), (c_out,)]
    return []


def _read_checkpoint(blob: bytes):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<HH", blob, 4)
    if version not in (CHECKPOINT_F32, CHECKPOINT_F64):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    wire = np.dtype("<f8") if version == CHECKPOINT_F64 else np.dtype("<f4")
    pos = 8
    specs, arrays = [], []
    try:
        for _ in range(count):
            code, ndims = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndims}I", blob, pos)
            pos += 4 * ndims
            spec = LayerSpec(KINDS[code], tuple(dims))
            specs.append(spec)
            for shape in _param_shapes(spec):
                n = int(np.prod(shape))
                if pos + n * wire.itemsize > len(blob):
                    raise CheckpointError("truncated parameter payload")
                arrays.append(np.frombuffer(blob, dtype=wire, count=n, offset=pos).reshape(shape))
                pos += n * wire.itemsize
    except (struct.error, IndexError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
    dtype = np.float64 if version == CHECKPOINT_F64 else np.float32
    return specs, arrays, dtype


def load_checkpoint(blob: bytes, cut_index: int, input_shape, seed: int = 0) -> SplitModel:
    """Rebuild a full :class:`SplitModel` from checkpoint bytes."""
    specs, arrays, dtype = _read_checkpoint(blob)
    model = build_model(specs, cut_index, seed, input_shape=input_shape, dtype=dtype)
    for p, a in zip(model.parameters(), arrays):
        p[...] = a
    return model
