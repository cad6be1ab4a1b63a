"""Dense networks with layer normalization, hand-written backprop, Adam and
Polyak averaging.

Every hidden layer computes ``relu(layernorm(W h + b))`` (layernorm optional
per layer); the output layer is affine. Inputs may be a single vector or a
batch of row vectors; batched gradients are summed over rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

LN_EPS = 1e-5

GradientSet = list  # list[np.ndarray], ordered like DenseNet.params()


@dataclass
class DenseNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    layernorm: list[bool]
    ln_gain: list[np.ndarray | None]
    ln_shift: list[np.ndarray | None]

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        layernorm: Sequence[bool] | bool = True,
        dtype=np.float32,
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases, unit gain and zero shift.

        ``layernorm`` gives one flag per hidden layer (or a single flag for
        all of them).
        """
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ShapeError(f"invalid layer sizes {sizes}")
        n_hidden = len(sizes) - 2
        if isinstance(layernorm, bool):
            flags = [layernorm] * n_hidden
        else:
            flags = [bool(f) for f in layernorm]
        if len(flags) != n_hidden:
            raise ShapeError(f"need {n_hidden} layernorm flags, got {len(flags)}")
        weights, biases, gains, shifts = [], [], [], []
        for k in range(len(sizes) - 1):
            fan_in, fan_out = sizes[k], sizes[k + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
            normed = k < n_hidden and flags[k]
            gains.append(np.ones(fan_out, dtype=dtype) if normed else None)
            shifts.append(np.zeros(fan_out, dtype=dtype) if normed else None)
        return cls(sizes, weights, biases, flags, gains, shifts)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order: W, b[, gain, shift] per layer."""
        out = []
        for k in range(self.n_layers):
            out.append(self.weights[k])
            out.append(self.biases[k])
            if self.ln_gain[k] is not None:
                out.append(self.ln_gain[k])
                out.append(self.ln_shift[k])
        return out

    def param_names(self) -> list[str]:
        names = []
        for k in range(self.n_layers):
            names += [f"layer{k}.weight", f"layer{k}.bias"]
            if self.ln_gain[k] is not None:
                names += [f"layer{k}.ln_gain", f"layer{k}.ln_shift"]
        return names

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        values = list(values)
        i = 0
        for k in range(self.n_layers):
            self.weights[k] = values[i]
            self.biases[k] = values[i + 1]
            i += 2
            if self.ln_gain[k] is not None:
                self.ln_gain[k] = values[i]
                self.ln_shift[k] = values[i + 1]
                i += 2

    def copy(self) -> "DenseNet":
        net = DenseNet(list(self.layer_sizes), [], [], list(self.layernorm), [], [])
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net.ln_gain = [None if g is None else g.copy() for g in self.ln_gain]
        net.ln_shift = [None if s is None else s.copy() for s in self.ln_shift]
        return net

    def astype(self, dtype) -> "DenseNet":
        net = self.copy()
        net.set_params([p.astype(dtype) for p in net.params()])
        return net

    @property
    def dtype(self):
        return self.weights[0].dtype

    def same_architecture(self, other: "DenseNet") -> bool:
        return self.layer_sizes == other.layer_sizes and self.layernorm == other.layernorm


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)  # h entering each layer
    zhat: list[np.ndarray | None] = field(default_factory=list)
    inv_std: list[np.ndarray | None] = field(default_factory=list)
    pre_relu: list[np.ndarray | None] = field(default_factory=list)
    squeeze: bool = False


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=net.dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise ShapeError(
            f"input has shape {x.shape[-1:] if squeeze else x.shape}, "
            f"network expects {net.layer_sizes[0]} features"
        )
    return x, squeeze


def forward_cached(net: DenseNet, x) -> tuple[np.ndarray, _Cache]:
    h, squeeze = _as_batch(net, x)
    cache = _Cache(squeeze=squeeze)
    last = net.n_layers - 1
    for k in range(net.n_layers):
        cache.inputs.append(h)
        z = h @ net.weights[k].T + net.biases[k]
        if k == last:
            cache.zhat.append(None)
            cache.inv_std.append(None)
            cache.pre_relu.append(None)
            h = z
            break
        if net.ln_gain[k] is not None:
            mu = z.mean(axis=1, keepdims=True)
            zc = z - mu
            inv_std = 1.0 / np.sqrt((zc * zc).mean(axis=1, keepdims=True) + LN_EPS)
            zhat = zc * inv_std
            y = zhat * net.ln_gain[k] + net.ln_shift[k]
        else:
            zhat = inv_std = None
            y = z
        cache.zhat.append(zhat)
        cache.inv_std.append(inv_std)
        cache.pre_relu.append(y)
        h = np.maximum(y, 0)
    return (h[0] if squeeze else h), cache


def forward(net: DenseNet, x) -> np.ndarray:
    """Network output for one input vector or a batch of rows."""
    return forward_cached(net, x)[0]


def backward_cached(
    net: DenseNet, cache: _Cache, upstream, need_params: bool = True
) -> tuple[GradientSet | None, np.ndarray]:
    """Gradients of ``sum(output * upstream)`` w.r.t. parameters and input.

    Returns ``(grads, input_grad)``; ``grads`` is None when ``need_params``
    is false (only the input gradient is propagated).
    """
    g = np.asarray(upstream, dtype=net.dtype)
    if cache.squeeze:
        g = g[None, :]
    n_out = net.layer_sizes[-1]
    if g.shape != (cache.inputs[0].shape[0], n_out):
        raise ShapeError(f"upstream shape {g.shape} does not match output ({n_out})")
    grads_rev: list[list[np.ndarray]] = []
    last = net.n_layers - 1
    for k in range(last, -1, -1):
        if k != last:
            # g is d/d(relu output)
            g = g * (cache.pre_relu[k] > 0)
            if net.ln_gain[k] is not None:
                zhat = cache.zhat[k]
                layer_extra = [(g * zhat).sum(axis=0), g.sum(axis=0)] if need_params else []
                dzhat = g * net.ln_gain[k]
                g = cache.inv_std[k] * (
                    dzhat
                    - dzhat.mean(axis=1, keepdims=True)
                    - zhat * (dzhat * zhat).mean(axis=1, keepdims=True)
                )
            else:
                layer_extra = []
        else:
            layer_extra = []
        if need_params:
            grads_rev.append([g.T @ cache.inputs[k], g.sum(axis=0)] + layer_extra)
        g = g @ net.weights[k]
    grads = None
    if need_params:
        grads = [arr for layer in reversed(grads_rev) for arr in layer]
    return grads, (g[0] if cache.squeeze else g)


def backward(net: DenseNet, x, upstream) -> GradientSet:
    """Exact gradient of ``output . upstream`` for every parameter."""
    _, cache = forward_cached(net, x)
    return backward_cached(net, cache, upstream)[0]


def input_gradient(net: DenseNet, x, upstream) -> np.ndarray:
    _, cache = forward_cached(net, x)
    return backward_cached(net, cache, upstream, need_params=False)[1]


def global_norm(grads: GradientSet) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: GradientSet, max_norm: float) -> tuple[GradientSet, float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], learning_rate: float = 3e-4, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: GradientSet,
    names: Sequence[str] | None = None,
) -> list[np.ndarray]:
    """Bias-corrected Adam update. Arrays in ``params`` are updated in place
    and also returned."""
    if state.learning_rate <= 0:
        raise ValidationError("learning_rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"param[{i}]"
            raise ValidationError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.learning_rate / c1) * m / (np.sqrt(v / c2) + state.epsilon)
    return list(params)


def polyak_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    """target <- (1 - tau) * target + tau * online, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_architecture(online):
        raise ShapeError("target and online networks differ in architecture")
    if tau == 1.0:
        target.set_params([p.copy() for p in online.params()])
        return target
    for t, o in zip(target.params(), online.params()):
        t *= 1.0 - tau
        t += tau * o
    return target


# --- checkpoint ---------------------------------------------------------

CHECKPOINT_MAGIC = b"RMPN"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: DenseNet, path: str | Path) -> None:
    """Little-endian: magic, u32 version, u32 layer count, then per layer
    (u32 in, u32 out, u32 flags), then raw f32 params in declaration order."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, net.n_layers)]
    for k in range(net.n_layers):
        flags = 1 if net.ln_gain[k] is not None else 0
        parts.append(struct.pack("<III", net.layer_sizes[k], net.layer_sizes[k + 1], flags))
    for p in net.params():
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> DenseNet:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    if len(data) < 12:
        raise ParseError("truncated checkpoint header", len(data))
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    off = 12
    if n_layers < 1 or len(data) < off + 12 * n_layers:
        raise ParseError("truncated layer table", off)
    sizes, flags = [], []
    for k in range(n_layers):
        n_in, n_out, fl = struct.unpack_from("<III", data, off)
        if sizes and sizes[-1] != n_in:
            raise ParseError(f"layer {k} input {n_in} breaks shape chain ({sizes[-1]})", off)
        if not sizes:
            sizes.append(n_in)
        sizes.append(n_out)
        flags.append(bool(fl & 1))
        off += 12
    if flags[-1]:
        raise ParseError("output layer cannot carry layernorm", off - 12)
    net = DenseNet.create(sizes, np.random.default_rng(0), layernorm=flags[:-1])
    values = []
    for p in net.params():
        nbytes = p.size * 4
        if off + nbytes > len(data):
            raise ParseError("truncated parameter payload", off)
        values.append(np.frombuffer(data, dtype="<f4", count=p.size, offset=off).reshape(p.shape).astype(np.float32))
        off += nbytes
    if off != len(data):
        raise ParseError("trailing bytes after parameters", off)
    net.set_params(values)
    return net
