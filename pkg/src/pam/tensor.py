"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Primitives in this module build a
graph of tensors as they run; calling :meth:`Tensor.backward` on a scalar
result walks that graph in reverse topological order and accumulates
gradients into every leaf that has ``requires_grad`` set.

Layout is always (batch, channel, height, width) for rank-4 tensors and
(batch, feature) for rank-2 tensors.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ConvSpec",
    "BatchNormState",
    "no_grad",
    "is_recording",
    "conv2d",
    "batch_norm",
    "prelu",
    "relu",
    "global_pool",
    "affine",
    "add",
    "mul",
    "elementwise",
    "scale_per_sample",
    "scale_channels",
    "sigmoid",
    "l2_normalize",
    "subsample",
    "reshape",
    "sum_all",
    "mean_all",
    "cross_entropy",
]

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


class Tensor:
    """A node in the differentiation graph.

    Leaves are created directly; interior nodes are created by primitives
    through :meth:`from_op`, which stores the parents and a closure mapping
    the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        """Wrap a primitive's result and record it in the graph when needed."""
        out = cls(data)
        if _RECORDING and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank(x: Tensor, ranks: tuple, op: str) -> None:
    if x.ndim not in ranks:
        raise ValueError(f"{op}: expected rank in {ranks}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be nonnegative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}")

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_size(self, h: int, w: int) -> tuple:
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {k} with padding {p}")
        return ho, wo


def _window(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def _conv_dense(xp, w, s, ho, wo):
    """Dense convolution as one matmul over (n*ho*wo, k*k*c) patches."""
    n, c = xp.shape[:2]
    o, k = w.shape[0], w.shape[-1]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)), cols


def _conv_dense_grads(g, cols, w, xp_shape, s):
    n, o, ho, wo = g.shape
    c, k = xp_shape[1], w.shape[-1]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    gcols = (g2 @ w.transpose(0, 2, 3, 1).reshape(o, -1)).reshape(n, ho, wo, k, k, c)
    gxp = np.zeros((n, xp_shape[2], xp_shape[3], c), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += gcols[:, :, :, i, j, :]
    return np.ascontiguousarray(gxp.transpose(0, 3, 1, 2)), np.ascontiguousarray(gw)


def conv2d(x: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with optional grouping and bias."""
    _check_rank(x, (4,), "conv2d")
    n, c, h, w_ = x.shape
    if c != spec.in_channels:
        raise ValueError(f"conv2d: input channel dimension is {c}, spec expects {spec.in_channels}")
    if weights.shape != spec.weight_shape:
        raise ValueError(f"conv2d: weight shape {weights.shape} != expected {spec.weight_shape}")
    if spec.has_bias != (bias is not None):
        raise ValueError("conv2d: bias must be given exactly when spec.has_bias is set")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")

    k, s, p, groups = spec.kernel_size, spec.stride, spec.padding, spec.groups
    ho, wo = spec.output_size(h, w_)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weights.data

    if spec.is_depthwise:
        out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                out += _window(xp, i, j, s, ho, wo) * wd[:, 0, i, j][None, :, None, None]
        state = None
    elif groups == 1:
        out, state = _conv_dense(xp, wd, s, ho, wo)
    else:
        cg, og = c // groups, spec.out_channels // groups
        parts, state = [], []
        for gi in range(groups):
            o, cols = _conv_dense(xp[:, gi * cg:(gi + 1) * cg], wd[gi * og:(gi + 1) * og], s, ho, wo)
            parts.append(o)
            state.append(cols)
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        if spec.is_depthwise:
            gw = np.zeros_like(wd)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    win = _window(xp, i, j, s, ho, wo)
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, win)
                    _window(gxp, i, j, s, ho, wo)[...] += g * wd[:, 0, i, j][None, :, None, None]
        elif groups == 1:
            gxp, gw = _conv_dense_grads(g, state, wd, xp.shape, s)
        else:
            cg, og = c // groups, spec.out_channels // groups
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gw = np.zeros_like(wd)
            for gi in range(groups):
                gx_i, gw_i = _conv_dense_grads(g[:, gi * og:(gi + 1) * og], state[gi],
                                               wd[gi * og:(gi + 1) * og],
                                               (n, cg) + xp.shape[2:], s)
                gxp[:, gi * cg:(gi + 1) * cg] = gx_i
                gw[gi * og:(gi + 1) * og] = gw_i
        gx = gxp[:, :, p:p + h, p:p + w_] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return Tensor.from_op(out, parents, backward)


# ---------------------------------------------------------------------------
# normalization and activations


@dataclass
class BatchNormState:
    """Affine terms plus running statistics for one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float64, **kw) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == c == self.running_mean.shape == self.running_var.shape):
            raise ValueError("BatchNormState: gamma, beta and running stats must share one length")
        if self.epsilon <= 0:
            raise ValueError("BatchNormState: epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("BatchNormState: momentum must lie in (0, 1)")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"BatchNormState: unknown mode {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalization; rank-4 inputs normalize over (batch, H, W), rank-2 over batch."""
    _check_rank(x, (2, 4), "batch_norm")
    c = x.shape[1]
    if c != state.channels:
        raise ValueError(f"batch_norm: channel dimension {c} != state channels {state.channels}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    gamma = _channel_view(state.gamma.data, x.ndim)
    beta = _channel_view(state.beta.data, x.ndim)
    eps = state.epsilon

    if state.mode == "train":
        m = x.data.size // c
        if m < 2:
            raise ValueError("batch_norm: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - _channel_view(mu, x.ndim)
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * _channel_view(inv_std, x.ndim)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

        def backward(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            dxhat = g * gamma
            s1 = _channel_view(dxhat.sum(axis=axes), x.ndim)
            s2 = _channel_view((dxhat * xhat).sum(axis=axes), x.ndim)
            gx = (dxhat - s1 / m - xhat * s2 / m) * _channel_view(inv_std, x.ndim)
            return gx, ggamma, gbeta
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - _channel_view(state.running_mean, x.ndim)) * _channel_view(inv_std, x.ndim)

        def backward(g):
            gx = g * gamma * _channel_view(inv_std, x.ndim)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = gamma * xhat + beta
    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, state.gamma, state.beta), backward)


def prelu(x: Tensor, slopes: Tensor) -> Tensor:
    """Channelwise parametric ReLU (channel axis 1)."""
    _check_rank(x, (2, 4), "prelu")
    if slopes.shape != (x.shape[1],):
        raise ValueError(f"prelu: {slopes.shape[0] if slopes.ndim else 1} slopes for {x.shape[1]} channels")
    a = _channel_view(slopes.data, x.ndim)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)

    def backward(g):
        gx = np.where(neg, a * g, g)
        ga = np.where(neg, g * x.data, 0.0).sum(axis=axes)
        return gx, ga

    return Tensor.from_op(out, (x, slopes), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                          lambda g: (np.where(pos, g, 0.0),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# pooling, affine, shape


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce each (H, W) plane to one value: ``"avg"`` or ``"max"``."""
    _check_rank(x, (4,), "global_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if kind == "avg":
        out = flat.mean(axis=2)

        def backward(g):
            return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)
    elif kind == "max":
        idx = flat.argmax(axis=2)  # first maximum in row-major order
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def backward(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
            return (gx.reshape(x.shape),)
    else:
        raise ValueError(f"global_pool: kind must be 'avg' or 'max', got {kind!r}")
    return Tensor.from_op(out, (x,), backward)


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for rank-2 ``x`` and weight of shape (out, in)."""
    _check_rank(x, (2,), "affine")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"affine: input features {x.shape[1]} do not match weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"affine: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"add: shapes differ {x.shape} vs {y.shape}")
    return Tensor.from_op(x.data + y.data, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ValueError(f"mul: shapes differ {x.shape} vs {y.shape}")
    return Tensor.from_op(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data))


def elementwise(x: Tensor, y: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(x, y)
    if op == "mul":
        return mul(x, y)
    raise ValueError(f"elementwise: unknown op {op!r}")


def scale_per_sample(x: Tensor, s) -> Tensor:
    """Multiply sample ``b`` of ``x`` by the constant ``s[b]`` (no gradient to ``s``)."""
    s = np.asarray(s, dtype=x.dtype)
    if s.shape != (x.shape[0],):
        raise ValueError(f"scale_per_sample: {s.size} scales for batch of {x.shape[0]}")
    sv = s.reshape((-1,) + (1,) * (x.ndim - 1))
    return Tensor.from_op(x.data * sv, (x,), lambda g: (g * sv,))


def scale_channels(x: Tensor, a: Tensor) -> Tensor:
    """Broadcast per-(sample, channel) weights ``a`` over the spatial plane of ``x``."""
    _check_rank(x, (4,), "scale_channels")
    if a.shape != x.shape[:2]:
        raise ValueError(f"scale_channels: weights {a.shape} do not match {x.shape[:2]}")
    av = a.data[:, :, None, None]

    def backward(g):
        return g * av, (g * x.data).sum(axis=(2, 3))

    return Tensor.from_op(x.data * av, (x, a), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of a rank-2 tensor to unit Euclidean norm."""
    _check_rank(x, (2,), "l2_normalize")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        rows = np.flatnonzero(norms[:, 0] == 0).tolist()
        raise ValueError(f"l2_normalize: zero-norm rows {rows}")
    out = x.data / norms

    def backward(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return Tensor.from_op(out, (x,), backward)


def subsample(x: Tensor, stride: int) -> Tensor:
    """Keep every ``stride``-th row and column (a 1x1 max-pool with stride)."""
    if stride == 1:
        return x
    _check_rank(x, (4,), "subsample")
    out = x.data[:, :, ::stride, ::stride].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_all(x: Tensor) -> Tensor:
    return Tensor.from_op(np.asarray(x.data.sum()), (x,),
                          lambda g: (np.full_like(x.data, g),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor.from_op(np.asarray(x.data.mean()), (x,),
                          lambda g: (np.full_like(x.data, g / n),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of rank-2 ``logits`` against integer ``labels``."""
    _check_rank(logits, (2,), "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"cross_entropy: labels must be {n} indices in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
