"""
Minimal differentiable tensor core on top of numpy.
Reverse-mode autodiff over a recorded tape, the layers the segmentation
stages need, AdamW, the linear learning-rate schedule and the array
checkpoint container.
"""

import hashlib
import json
import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    CorruptFile,
    EpochOutOfRange,
    HeadsDontDivide,
    IndexOutOfRange,
    MissingFile,
    NotScalar,
    ShapeMismatch,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class Tensor:
    """An n-d array that can take part in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(values, Tensor):
            values = values.values
        if dtype is None:
            arr = np.asarray(values)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else TRAIN_DTYPE
        self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut out of the graph."""
        return Tensor(self.values, requires_grad=False, dtype=self.values.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of executed primitives, replayed backwards by backward().

    Use as a context manager; the active tape is thread-local, so one graph
    stays confined to the thread that built it.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: List[_Node] = []
        self.grads: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        self._stack().pop()
        return False

    @classmethod
    def _stack(cls) -> List["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, output: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        self.nodes.append(_Node(output, tuple(inputs), vjp))

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() target w.r.t. any recorded tensor."""
        g = self.grads.get(id(tensor))
        return np.zeros_like(tensor.values) if g is None else g


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    """Promote constants to tensors of the other operand's dtype."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _make(values: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad, dtype=values.dtype)
    if needs_grad:
        tape = Tape.active()
        if tape is not None:
            tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.values / b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * out / b.values, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dims."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.values, b.values), (a, b), vjp)


# Reductions and reshaping

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def index(x: Tensor, key) -> Tensor:
    """Basic/advanced indexing; gradients scatter back with np.add.at."""

    def vjp(g):
        full = np.zeros_like(x.values)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.asarray(x.values[key]), (x,), vjp)


def concat_channels(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis; spatial dims must agree."""
    if not xs:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeMismatch(f"concat_channels: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(np.concatenate([t.values for t in xs], axis=axis), tuple(xs), vjp)


def select_channels(x: Tensor, idx: Sequence[int], axis: int = 1) -> Tensor:
    """Keep only the listed channels, in the listed order."""
    idx = list(idx)
    size = x.shape[axis]
    bad = [i for i in idx if not (0 <= i < size)]
    if bad:
        raise IndexOutOfRange(f"Channel indices {bad} outside 0..{size - 1}")
    key = (slice(None),) * axis + (idx,)
    return index(x, key)


# Activations

def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.values) + 1.0)
    return _make(out.astype(x.dtype), (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)

    return _make(out.astype(x.dtype), (x,), vjp)


def pointwise_activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"Unknown activation: {kind}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# Convolution, normalization, resampling

def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return cols[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """2-D cross-correlation of a B x C_in x H x W batch with C_out x C_in x k x k kernels."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: bias {b.shape} for {w.shape[0]} output channels")
    k = w.shape[2]
    pad = k // 2 if pad is None else pad
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(xp, k, stride)  # B, C, Ho, Wo, k, k
    out = np.tensordot(cols, w.values, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.values[None, :, None, None]
    out_h, out_w = out.shape[2], out.shape[3]

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w.values, axes=([1], [0]))  # B, Ho, Wo, C, k, k
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), inputs, vjp)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization; train mode also updates the running stats in place."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.values.mean(axis=axes)
        var = x.values.var(axis=axes)
        n = x.values.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
        n = None
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.values[None, :, None, None] * xhat + beta.values[None, :, None, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.values[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if training:
            gx = scale / n * (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * scale
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis."""
    d = x.shape[-1]
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv_std
    out = gamma.values * xhat + beta.values

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.values
        gx = inv_std / d * (
            d * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype), (x, gamma, beta), vjp)


def interp_matrix(n_in: int, n_out: int, dtype=CHECK_DTYPE) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: Tensor, size: Tuple[int, int]) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"resize_bilinear expects B x C x H x W, got {x.shape}")
    mh = interp_matrix(x.shape[2], size[0], x.dtype)
    mw = interp_matrix(x.shape[3], size[1], x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", mh, x.values, mw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),))


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling by an integer factor (the decoder uses 2)."""
    if x.ndim != 4 or int(factor) != factor or factor < 1:
        raise ShapeMismatch(f"bilinear_upsample: input {x.shape}, factor {factor}")
    return resize_bilinear(x, (x.shape[2] * factor, x.shape[3] * factor))


# Gradient computation

def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> Dict[int, np.ndarray]:
    """Reverse-mode accumulation over `tape`, seeded with d loss / d loss = 1.

    Sets `.grad` on every leaf that requires a gradient; parameters listed in
    `params` that the loss does not reach get zero gradients.
    """
    if loss.values.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    produced = set()
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.get(id(node.output))
        if g is None:
            continue
        input_grads = node.vjp(g)
        for tensor, tg in zip(node.inputs, input_grads):
            if tg is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = np.asarray(tg, dtype=tensor.dtype).reshape(tensor.shape)
            leaves[key] = tensor

    for key, tensor in leaves.items():
        if key not in produced:
            tensor.grad = grads[key].astype(tensor.dtype, copy=False)
    for p in params:
        if id(p) not in grads:
            p.grad = np.zeros_like(p.values)
    tape.grads = grads
    return grads


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                       coords: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. `array` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    targets = coords if coords is not None else list(np.ndindex(array.shape))
    for pos in targets:
        old = array[pos]
        array[pos] = old + h
        plus = f()
        array[pos] = old - h
        minus = f()
        array[pos] = old
        grad[pos] = (plus - minus) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# Layers

class Module:
    """Container of parameters (Tensors), running buffers and child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray) and name.startswith("running_"):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dtype=TRAIN_DTYPE):
        if kernel not in (1, 3, 7):
            raise ShapeMismatch(f"Unsupported kernel size {kernel}")
        self.stride = stride
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=TRAIN_DTYPE, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training, self.momentum, self.eps)


class ConvBnRelu(Module):
    """Convolution + Batch Norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, dtype=TRAIN_DTYPE):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=TRAIN_DTYPE, std: float = 0.02):
        self.weight = Tensor((rng.standard_normal((in_dim, out_dim)) * std).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=TRAIN_DTYPE, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class TransformerBlock(Module):
    """Pre-norm block: LN -> multi-head self-attention -> residual -> LN -> GELU MLP -> residual."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, rng: np.random.Generator, dtype=TRAIN_DTYPE):
        if dim % heads != 0:
            raise HeadsDontDivide(f"Width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.norm1 = LayerNorm(dim, dtype)
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, mlp_dim, rng, dtype)
        self.fc2 = Linear(mlp_dim, dim, rng, dtype)
        # last_attention is written only while record_attention is set
        self.record_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, t: Tensor, batch: int, n_tok: int) -> Tensor:
        t = reshape(t, (batch, n_tok, self.heads, self.dim // self.heads))
        return transpose(t, (0, 2, 1, 3))

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.dim:
            raise ShapeMismatch(f"TransformerBlock(width={self.dim}) got tokens {tokens.shape}")
        batch, n_tok, _ = tokens.shape
        h = self.norm1(tokens)
        q = self._split_heads(self.query(h), batch, n_tok)
        k = self._split_heads(self.key(h), batch, n_tok)
        v = self._split_heads(self.value(h), batch, n_tok)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.dim // self.heads))
        attn = softmax(scores, axis=-1)
        if self.record_attention:
            self.last_attention = attn.values
        ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
        ctx = reshape(ctx, (batch, n_tok, self.dim))
        x = tokens + self.proj(ctx)
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


def transformer_block(tokens: Tensor, block: TransformerBlock) -> Tensor:
    return block(tokens)


# Optimization

@dataclass
class AdamWState:
    """First/second moments per parameter name plus the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamWState, lr: float) -> None:
    """One AdamW update with bias correction and decoupled weight decay (in place)."""
    state.step += 1
    t = state.step
    bias_c1 = 1.0 - state.beta1 ** t
    bias_c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.shape:
            raise ShapeMismatch(f"Gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.exp_avg.setdefault(name, np.zeros_like(p.values))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p.values))
        if m.shape != p.shape:
            raise ShapeMismatch(f"Optimizer moments for {name} have shape {m.shape}, parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g

        if state.weight_decay:
            p.values *= 1.0 - lr * state.weight_decay
        update = (m / bias_c1) / (np.sqrt(v / bias_c2) + state.eps)
        p.values -= (lr * update).astype(p.dtype)


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-3
    total_epochs: int = 250


def lr_linear(schedule: LrSchedule, epoch: int) -> float:
    """Linear decay from initial_lr at epoch 0 to zero at total_epochs."""
    if not (0 <= epoch <= schedule.total_epochs):
        raise EpochOutOfRange(f"Epoch {epoch} outside 0..{schedule.total_epochs}")
    return schedule.initial_lr * (1.0 - epoch / schedule.total_epochs)


# Array container (checkpoint format)

MAGIC = b"PECINET1"
FORMAT_VERSION = 1


def write_arrays(path: str, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    """Write a manifest (name/shape/dtype per array + meta) followed by raw little-endian data."""
    entries = []
    chunks = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "version": FORMAT_VERSION,
        "meta": meta,
        "arrays": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def read_arrays(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """Inverse of write_arrays; validates version, length and checksum."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise MissingFile(f"Checkpoint not found: {path}") from e

    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(blob) < start + header_len:
        raise CorruptFile(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: unreadable manifest") from e

    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {manifest.get('version')}, expected {FORMAT_VERSION}")
    payload = blob[start + header_len:]
    expected = sum(e["nbytes"] for e in manifest["arrays"])
    if len(payload) != expected or hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CorruptFile(f"{path}: payload is truncated or fails its checksum")

    arrays = {}
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))\
            .reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]
