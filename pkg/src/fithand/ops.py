"""Differentiable primitives: convolution, normalisation, dense head, losses.

Every op takes and returns :class:`~fithand.tensor.Tensor` objects and
records a vector-Jacobian product on the active :class:`GradTape`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor, record

LRN_DEFAULTS = dict(k=2.0, n=5, alpha=1e-4, beta=0.75)


def effective_kernel(k: int, dilation: int) -> int:
    """Span of a k-tap kernel whose taps sit ``dilation`` pixels apart."""
    if k < 1 or dilation < 1:
        raise ConfigError(f"kernel and dilation must be >= 1, got k={k}, D={dilation}")
    return k + (k - 1) * (dilation - 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if min(self.stride, self.dilation, self.in_channels, self.out_channels) < 1:
            raise ConfigError(f"stride, dilation and channel counts must be positive: {self}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")

    @classmethod
    def same(cls, in_channels, out_channels, kernel, dilation=1, has_bias=True):
        """Stride-1 conv padded so the output keeps the input's spatial size."""
        pad = effective_kernel(kernel, dilation) // 2
        return cls(in_channels, out_channels, kernel, 1, dilation, pad, has_bias)

    @property
    def span(self) -> int:
        return effective_kernel(self.kernel, self.dilation)

    @property
    def weight_dims(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_size(self, size: int) -> int:
        out = (size + 2 * self.padding - self.span) // self.stride + 1
        if out < 1:
            raise ConfigError(
                f"conv output size {out} < 1 for input {size}, span {self.span}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return out

    def param_count(self) -> int:
        k = self.kernel
        return k * k * self.in_channels * self.out_channels + (self.out_channels if self.has_bias else 0)


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec):
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4 (n, c, h, w), got dims {x.dims}")
    if x.dims[1] != spec.in_channels:
        raise ShapeError(f"conv2d input axis 1 (channels) is {x.dims[1]}, spec expects {spec.in_channels}")
    if w.dims != spec.weight_dims:
        bad = [
            name
            for name, got, want in zip(("out_ch", "in_ch", "kh", "kw"), w.dims, spec.weight_dims)
            if got != want
        ]
        raise ShapeError(f"conv2d weight dims {w.dims} != {spec.weight_dims} (axes {', '.join(bad) or 'rank'})")
    if spec.has_bias:
        if b is None or b.dims != (spec.out_channels,):
            raise ShapeError(f"conv2d bias must have dims ({spec.out_channels},), got {None if b is None else b.dims}")
    elif b is not None:
        raise ShapeError("conv2d bias given but spec.has_bias is False")


def _im2col(xp: np.ndarray, k: int, stride: int, dil: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        r0 = i * dil
        for j in range(k):
            c0 = j * dil
            cols[:, :, i, j] = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, padded_shape, k, stride, dil, ho, wo) -> np.ndarray:
    n, c = padded_shape[:2]
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(k):
        r0 = i * dil
        for j in range(k):
            c0 = j * dil
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    _check_conv_args(x, w, b, spec)
    n, c, h, wd = x.dims
    ho, wo = spec.output_size(h), spec.output_size(wd)
    p = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    k, s, d = spec.kernel, spec.stride, spec.dilation
    cols = _im2col(xp, k, s, d, ho, wo)
    w2 = w.data.reshape(spec.out_channels, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, spec.out_channels, ho, wo)

    def vjp(g):
        g2 = g.reshape(n, spec.out_channels, ho * wo)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.dims) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _col2im(np.matmul(w2.T, g2), xp.shape, k, s, d, ho, wo)
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, vjp, "conv2d")


def dilate_kernel(w: np.ndarray, dilation: int) -> np.ndarray:
    """Materialise a dilated kernel as a dense, mostly-zero span x span kernel."""
    o, c, k, _ = w.shape
    span = effective_kernel(k, dilation)
    out = np.zeros((o, c, span, span), dtype=w.dtype)
    out[:, :, ::dilation, ::dilation] = w
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError(f"add needs identical dims, got {a.dims} and {b.dims}")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    spatial = {(t.dims[0],) + t.dims[2:] for t in parts}
    if len(spatial) != 1:
        raise ShapeError(f"concat needs equal (n, h, w), got {[t.dims for t in parts]}")
    bounds = np.cumsum([0] + [t.dims[1] for t in parts])

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return record(np.concatenate([t.data for t in parts], axis=1), parts, vjp, "concat")


def sum_all(x: Tensor) -> Tensor:
    shape = x.dims
    return record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_all")


def flatten(x: Tensor) -> Tensor:
    shape = x.dims
    return record(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def lrn(x: Tensor, k: float = 2.0, n: int = 5, alpha: float = 1e-4, beta: float = 0.75) -> Tensor:
    """Cross-channel local response normalisation.

    ``out = x / (k + alpha * sum(x**2 over the n nearest channels)) ** beta``,
    with the window clipped at the first and last channel.
    """
    if k <= 0:
        raise ConfigError(f"LRN k must be positive, got {k}")
    if n < 1 or n % 2 == 0:
        raise ConfigError(f"LRN window n must be odd and positive, got {n}")
    half = n // 2
    c = x.dims[1]

    def window_sum(a):
        padded = np.pad(a, ((0, 0), (half, half), (0, 0), (0, 0)))
        acc = np.zeros_like(a)
        for off in range(n):
            acc += padded[:, off : off + c]
        return acc

    scale = k + alpha * window_sum(x.data * x.data)
    inv = scale ** (-beta)
    y = x.data * inv

    def vjp(g):
        t = g * x.data * inv / scale
        return (g * inv - 2.0 * alpha * beta * x.data * window_sum(t),)

    return record(y, (x,), vjp, "lrn")


def l2_normalize(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Scale each sample's flattened vector to unit L2 norm (guarded by epsilon)."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    n = x.dims[0]
    v = x.data.reshape(n, -1)
    norm = np.sqrt(np.einsum("ij,ij->i", v, v))
    active = norm >= epsilon
    denom = np.where(active, norm, epsilon)[:, None]
    y = v / denom

    def vjp(g):
        g2 = g.reshape(n, -1)
        proj = np.where(active[:, None], y * np.einsum("ij,ij->i", y, g2)[:, None], 0)
        return ((g2 - proj) / denom).reshape(x.dims),

    return record(y.reshape(x.dims), (x,), vjp, "l2_normalize")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-sample affine map ``flatten(x) @ w + b``; ``w`` is (features, classes)."""
    n = x.dims[0]
    feats = int(np.prod(x.dims[1:]))
    if w.data.ndim != 2 or w.dims[0] != feats:
        raise ShapeError(f"dense weight dims {w.dims} do not accept {feats} input features")
    if b.dims != (w.dims[1],):
        raise ShapeError(f"dense bias dims {b.dims} != ({w.dims[1]},)")
    v = x.data.reshape(n, feats)
    out = v @ w.data + b.data

    def vjp(g):
        dx = (g @ w.data.T).reshape(x.dims) if x.requires_grad else None
        dw = v.T @ g if w.requires_grad else None
        return dx, dw, g.sum(axis=0)

    return record(out, (x, w, b), vjp, "dense")


def _check_labels(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, classes), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]}), got {labels.min()}..{labels.max()}")
    return labels.astype(np.int64)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def kl_divergence(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean KL(one-hot target || softmax(logits)) and its gradient.

    Evaluated from the general definition sum t*(log t - log q) with
    0*log 0 = 0, not by delegating to the cross-entropy.
    """
    labels = _check_labels(logits, labels)
    n, c = logits.shape
    target = np.zeros_like(logits)
    target[np.arange(n), labels] = 1.0
    logq = log_softmax(logits)
    safe_log_t = np.log(np.where(target > 0, target, 1.0))
    terms = np.where(target > 0, target * (safe_log_t - logq), 0.0)
    loss = terms.sum() / n
    grad = (np.exp(logq) * target.sum(axis=1, keepdims=True) - target) / n
    return float(loss), grad


def _loss_op(fn, logits: Tensor, labels, name: str) -> Tensor:
    value, grad = fn(logits.data, labels)
    out = np.asarray(value, dtype=logits.dtype)
    return record(out, (logits,), lambda g: (grad * g,), name)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    return _loss_op(softmax_cross_entropy, logits, labels, "cross_entropy")


def kl_divergence_loss(logits: Tensor, labels) -> Tensor:
    return _loss_op(kl_divergence, logits, labels, "kl_divergence")


LOSSES = {"ce": cross_entropy_loss, "cross_entropy": cross_entropy_loss, "kl": kl_divergence_loss}


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> Sequence[Tensor]:
    """In-place ``w <- w - lr * g`` for every parameter; returns ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.dims != np.shape(g):
            raise ShapeError(f"gradient dims {np.shape(g)} != parameter dims {p.dims}")
        if lr:
            p.data -= (lr * np.asarray(g)).astype(p.dtype)
    return params


class SGD:
    """Plain SGD; ``momentum > 0`` enables classical heavy-ball updates."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if not self.momentum:
            sgd_step(self.params, grads, self.lr)
            return
        for v, g in zip(self._velocity, grads):
            v *= self.momentum
            v += g
        sgd_step(self.params, self._velocity, self.lr)
