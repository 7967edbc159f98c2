"""A small numpy network engine for convolutional autoencoders.

Tensors are ``(n, c, h, w)`` arrays (``(n, d)`` between Flatten and
Reshape). Convolutions are 3x3, stride 1, "same" padding. Parameters are
float32; every op follows the dtype of its input, so a float64 copy of a
ParamStore gives a 64-bit shadow network for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonPositiveSigma, ShapeMismatch, StaleCache

ACTIVATIONS = ("relu", "sigmoid", "linear")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        # tanh form cannot overflow
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _activation_grad(y, dy, kind):
    """Gradient wrt the pre-activation, written in terms of the output y."""
    if kind == "relu":
        return dy * (y > 0)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    return dy


# samples per im2col chunk; keeps the patch matrix near cache size
CHUNK = 2


def _im2col_t(x):
    """Transposed patch matrix: row (c, i, j), column (n, h, w)."""
    n, c, h, w = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * 9, n * h * w)


def conv3x3(x, k, b=None):
    """'Same' 3x3 cross-correlation; k is (out, in, 3, 3)."""
    n, _, h, w = x.shape
    out = k.shape[0]
    km = k.reshape(out, -1).astype(x.dtype, copy=False)
    y = np.empty((n, out, h, w), dtype=x.dtype)
    for s in range(0, n, CHUNK):
        part = x[s:s + CHUNK]
        y[s:s + CHUNK] = (km @ _im2col_t(part)).reshape(out, part.shape[0], h, w).transpose(1, 0, 2, 3)
    if b is not None:
        y += b.astype(x.dtype, copy=False)[:, None, None]
    return y


def _flip_swap(k):
    # adjoint kernel of a same-padded stride-1 convolution
    return np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _conv_backward(dz, x, k, input_grad):
    n, out = dz.shape[:2]
    dk = np.zeros((out, k.shape[1] * 9), dtype=dz.dtype)
    for s in range(0, n, CHUNK):
        dzt = dz[s:s + CHUNK].transpose(1, 0, 2, 3).reshape(out, -1)
        dk += dzt @ _im2col_t(x[s:s + CHUNK]).T
    db = dz.sum(axis=(0, 2, 3))
    dx = conv3x3(dz, _flip_swap(k)) if input_grad else None
    return dx, dk.reshape(k.shape), db


def _xavier(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _init_weight(rng, activation, fan_in, fan_out, shape):
    if activation == "relu":
        w = _he(rng, fan_in, shape)
    else:
        w = _xavier(rng, fan_in, fan_out, shape)
    return w.astype(np.float32)


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    activation: str = "relu"
    kernel: int = 3

    def out_shape(self, s):
        return (self.out_channels, s[1], s[2])

    def param_shapes(self, s):
        return {"W": (self.out_channels, s[0], 3, 3), "b": (self.out_channels,)}

    def init(self, s, rng):
        fan_in, fan_out = s[0] * 9, self.out_channels * 9
        return {"W": _init_weight(rng, self.activation, fan_in, fan_out, self.param_shapes(s)["W"]),
                "b": np.zeros(self.out_channels, np.float32)}

    def forward(self, x, p):
        y = _activate(conv3x3(x, p["W"], p["b"]), self.activation)
        return y, (x, y)

    def backward(self, dy, cache, p, input_grad=True):
        x, y = cache
        dz = _activation_grad(y, dy, self.activation)
        dx, dw, db = _conv_backward(dz, x, p["W"], input_grad)
        return dx, {"W": dw, "b": db}


@dataclass(frozen=True)
class TransposedConv2D:
    """Stride-1 transposed convolution; W is (in, out, 3, 3)."""

    out_channels: int
    activation: str = "relu"
    kernel: int = 3

    def out_shape(self, s):
        return (self.out_channels, s[1], s[2])

    def param_shapes(self, s):
        return {"W": (s[0], self.out_channels, 3, 3), "b": (self.out_channels,)}

    def init(self, s, rng):
        fan_in, fan_out = s[0] * 9, self.out_channels * 9
        return {"W": _init_weight(rng, self.activation, fan_in, fan_out, self.param_shapes(s)["W"]),
                "b": np.zeros(self.out_channels, np.float32)}

    def forward(self, x, p):
        k = _flip_swap(p["W"])
        y = _activate(conv3x3(x, k, p["b"]), self.activation)
        return y, (x, y)

    def backward(self, dy, cache, p, input_grad=True):
        x, y = cache
        dz = _activation_grad(y, dy, self.activation)
        dx, dk, db = _conv_backward(dz, x, _flip_swap(p["W"]), input_grad)
        return dx, {"W": _flip_swap(dk), "b": db}


@dataclass(frozen=True)
class MaxPool2:
    window: int = 2

    def out_shape(self, s):
        if s[1] % 2 or s[2] % 2:
            raise ShapeMismatch(f"MaxPool2 needs even height and width, got {s[1]}x{s[2]}")
        return (s[0], s[1] // 2, s[2] // 2)

    def param_shapes(self, s):
        return {}

    def init(self, s, rng):
        return {}

    def forward(self, x, p):
        quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
        y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        # route each window's gradient to its first maximal element only
        taken = np.zeros(y.shape, dtype=bool)
        masks = []
        for q in quads:
            m = (q == y) & ~taken
            taken |= m
            masks.append(m)
        return y, (masks, x.shape)

    def backward(self, dy, cache, p, input_grad=True):
        masks, shape = cache
        dx = np.zeros(shape, dtype=dy.dtype)
        for (r, c), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, :, r::2, c::2] = dy * m
        return dx, {}


@dataclass(frozen=True)
class Upsample2:
    mode: str = "nearest"

    def out_shape(self, s):
        return (s[0], s[1] * 2, s[2] * 2)

    def param_shapes(self, s):
        return {}

    def init(self, s, rng):
        return {}

    def forward(self, x, p):
        n, c, h, w = x.shape
        return np.broadcast_to(x[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w), None

    def backward(self, dy, cache, p, input_grad=True):
        n, c, h, w = dy.shape
        return (dy[:, :, 0::2, 0::2] + dy[:, :, 0::2, 1::2]) + (dy[:, :, 1::2, 0::2] + dy[:, :, 1::2, 1::2]), {}


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "relu"

    def out_shape(self, s):
        if len(s) != 1:
            raise ShapeMismatch(f"Dense expects a flat input, got {s}")
        return (self.units,)

    def param_shapes(self, s):
        return {"W": (s[0], self.units), "b": (self.units,)}

    def init(self, s, rng):
        return {"W": _init_weight(rng, self.activation, s[0], self.units, (s[0], self.units)),
                "b": np.zeros(self.units, np.float32)}

    def forward(self, x, p):
        z = x @ p["W"].astype(x.dtype, copy=False) + p["b"].astype(x.dtype, copy=False)
        y = _activate(z, self.activation)
        return y, (x, y)

    def backward(self, dy, cache, p, input_grad=True):
        x, y = cache
        dz = _activation_grad(y, dy, self.activation)
        dx = dz @ p["W"].T.astype(dz.dtype, copy=False) if input_grad else None
        return dx, {"W": x.T @ dz, "b": dz.sum(axis=0)}


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, s):
        return (int(np.prod(s)),)

    def param_shapes(self, s):
        return {}

    def init(self, s, rng):
        return {}

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, p, input_grad=True):
        return dy.reshape(cache), {}


@dataclass(frozen=True)
class Reshape:
    c: int
    h: int
    w: int

    def out_shape(self, s):
        if int(np.prod(s)) != self.c * self.h * self.w:
            raise ShapeMismatch(f"cannot reshape {s} to {(self.c, self.h, self.w)}")
        return (self.c, self.h, self.w)

    def param_shapes(self, s):
        return {}

    def init(self, s, rng):
        return {}

    def forward(self, x, p):
        return x.reshape(x.shape[0], self.c, self.h, self.w), x.shape

    def backward(self, dy, cache, p, input_grad=True):
        return dy.reshape(cache), {}


LAYER_TYPES = {cls.__name__: cls for cls in
               (Conv2D, TransposedConv2D, MaxPool2, Upsample2, Dense, Flatten, Reshape)}


def layer_to_dict(layer) -> dict:
    return {"type": type(layer).__name__, **layer.__dict__}


def layer_from_dict(d: dict):
    d = dict(d)
    return LAYER_TYPES[d.pop("type")](**d)


@dataclass
class ParamStore:
    """Per-layer weights plus Adam moment accumulators."""

    params: list[dict[str, np.ndarray]]
    m: list[dict[str, np.ndarray]] = field(default=None, repr=False)
    v: list[dict[str, np.ndarray]] = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = [{k: np.zeros_like(a) for k, a in p.items()} for p in self.params]
        if self.v is None:
            self.v = [{k: np.zeros_like(a) for k, a in p.items()} for p in self.params]

    def copy(self) -> "ParamStore":
        dup = lambda L: [{k: a.copy() for k, a in p.items()} for p in L]  # noqa: E731
        return ParamStore(dup(self.params), dup(self.m), dup(self.v), self.step)

    def astype(self, dtype) -> "ParamStore":
        conv = lambda L: [{k: a.astype(dtype) for k, a in p.items()} for p in L]  # noqa: E731
        return ParamStore(conv(self.params), conv(self.m), conv(self.v), self.step)

    def n_params(self) -> int:
        return sum(a.size for p in self.params for a in p.values())

    def to_blob(self) -> tuple[list[dict], bytes]:
        """Little-endian float32 weights and a JSON-able index of them."""
        index, chunks, offset = [], [], 0
        for i, p in enumerate(self.params):
            for name in sorted(p):
                raw = np.ascontiguousarray(p[name], dtype="<f4").tobytes()
                index.append({"layer": i, "name": name, "shape": list(p[name].shape), "offset": offset})
                chunks.append(raw)
                offset += len(raw)
        return index, b"".join(chunks)

    @classmethod
    def from_blob(cls, index: list[dict], blob: bytes, n_layers: int) -> "ParamStore":
        params: list[dict[str, np.ndarray]] = [{} for _ in range(n_layers)]
        for item in index:
            count = int(np.prod(item["shape"])) if item["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=item["offset"])
            params[item["layer"]][item["name"]] = arr.reshape(item["shape"]).astype(np.float32)
        return cls(params)


class Network:
    """A chain of layers with shape inference."""

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            act = getattr(layer, "activation", None)
            if act is not None and act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if act == "sigmoid" and i != len(self.layers) - 1:
                raise ValueError("sigmoid is only allowed on the final layer")
            self.shapes.append(tuple(layer.out_shape(self.shapes[-1])))

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_shapes(self):
        return [layer.param_shapes(s) for layer, s in zip(self.layers, self.shapes)]

    def n_params(self) -> int:
        return sum(int(np.prod(sh)) for p in self.param_shapes() for sh in p.values())

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng(seed)
        return ParamStore([layer.init(s, rng) for layer, s in zip(self.layers, self.shapes)])

    def zero_params(self) -> ParamStore:
        return ParamStore([{k: np.zeros(sh, np.float32) for k, sh in p.items()}
                           for p in self.param_shapes()])

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(l) for l in self.layers]}

    @classmethod
    def from_description(cls, d: dict) -> "Network":
        return cls(d["input_shape"], [layer_from_dict(l) for l in d["layers"]])

    def forward(self, params: ParamStore, x: np.ndarray):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        caches = []
        for layer, p in zip(self.layers, params.params):
            x, c = layer.forward(x, p)
            caches.append(c)
        return x, {"net": id(self), "params": id(params), "step": params.step, "layers": caches}

    def backward(self, params: ParamStore, cache: dict, grad_output: np.ndarray, input_grad: bool = True):
        """Returns (per-layer parameter gradients, gradient wrt the input)."""
        if cache.get("net") != id(self) or cache.get("params") != id(params) or cache.get("step") != params.step:
            raise StaleCache("cache does not come from a forward pass with these parameters")
        if tuple(grad_output.shape[1:]) != self.output_shape:
            raise ShapeMismatch(f"grad shape {grad_output.shape[1:]} != output {self.output_shape}")
        grads = [None] * len(self.layers)
        dy = grad_output
        for i in range(len(self.layers) - 1, -1, -1):
            need = input_grad or i > 0
            dy, grads[i] = self.layers[i].backward(dy, cache["layers"][i], params.params[i], input_grad=need)
        return grads, dy

    def predict(self, params: ParamStore, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]


def correntropy_loss(y, yhat, sigma: float = 0.2):
    """Negative mean Gaussian-kernel similarity and its gradient wrt yhat.

    Bounded in [-1, 0]; equals -1 only for a perfect reconstruction.
    """
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"{y.shape} != {yhat.shape}")
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    e = yhat - y
    k = np.exp(-(e * e) / (2.0 * sigma * sigma))
    P = y.size
    loss = -float(k.sum(dtype=np.float64)) / P
    grad = (k * e / (sigma * sigma * P)).astype(yhat.dtype, copy=False)
    return loss, grad


def mse_loss(y, yhat):
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"{y.shape} != {yhat.shape}")
    e = yhat - y
    P = y.size
    return float((e * e).sum(dtype=np.float64)) / P, (2.0 * e / P).astype(yhat.dtype, copy=False)


LOSSES: dict[str, Callable] = {"correntropy": correntropy_loss, "mse": mse_loss}


def adam_step(params: ParamStore, grads, lr: float = 1e-3) -> ParamStore:
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    if len(grads) != len(params.params):
        raise ShapeMismatch("one gradient dict per layer required")
    params.step += 1
    t = params.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params.params, grads, params.m, params.v):
        for name, w in p.items():
            gw = g[name]
            if gw.shape != w.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {gw.shape}, expected {w.shape}")
            gw = gw.astype(w.dtype, copy=False)
            m[name] *= ADAM_BETA1
            m[name] += (1 - ADAM_BETA1) * gw
            v[name] *= ADAM_BETA2
            v[name] += (1 - ADAM_BETA2) * gw * gw
            w -= (lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + ADAM_EPS)).astype(w.dtype, copy=False)
    return params


def gradient_check(net: Network, params: ParamStore, x, loss_fn, eps: float = 1e-4,
                   n_probe: int = 12, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs in float64. ``loss_fn(yhat) -> (loss, dloss/dyhat)``. Probes up to
    ``n_probe`` random coordinates of every parameter array and of the input.
    """
    rng = np.random.default_rng(seed)
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64).copy()

    def total(pp, xx):
        return loss_fn(net.forward(pp, xx)[0])[0]

    yhat, cache = net.forward(p64, x64)
    grads, dx = net.backward(p64, cache, loss_fn(yhat)[1])

    targets = [(x64, dx)] + [(p64.params[i][k], grads[i][k]) for i in range(len(grads)) for k in grads[i]]
    worst = 0.0
    for arr, g in targets:
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        num = np.empty(picks.size)
        for j, idx in enumerate(picks):
            old = flat[idx]
            flat[idx] = old + eps
            up = total(p64, x64)
            flat[idx] = old - eps
            down = total(p64, x64)
            flat[idx] = old
            num[j] = (up - down) / (2 * eps)
        ana = gflat[picks]
        scale = max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst

