"""Dense tensors with reverse-mode differentiation, built on numpy.

Every operator returns a new :class:`Tensor`; when any input requires a
gradient the result records its parents and a backward closure. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``grad`` on the leaves.

Broadcasting is deliberately narrow: binary operators accept equal shapes
or a scalar operand. Anything else must go through :func:`expand` or
:func:`bias_add` explicitly.
"""
from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .errors import ContractError, DimensionError, NonFiniteError

_dtype: type = np.float32


def default_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. float64 audits)."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _dtype
    return np.asarray(arr, dtype=dtype)


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data: np.ndarray = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
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
            if node._backward is None:
                g = np.array(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar -------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise binary


def _operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return _result(x.data**p, (x,), backward, "pow")


# ---------------------------------------------------------------------------
# elementwise unary


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    e = np.exp(np.minimum(x.data, 20.0))
    n = e * (e + 2.0)
    t = n / (n + 2.0)  # tanh(log(1 + e^x))
    out = x.data * t

    def backward(g):
        return (g * (t + x.data * (1.0 - t * t) * (e / (1.0 + e))),)

    return _result(out, (x,), backward, "mish")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
    if hi is not None:
        keep &= x.data <= hi
    return _result(out, (x,), lambda g: (g * keep,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / max(count, 1))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, tensors, backward, "stack")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 (or missing leading) axes to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(np.array(out), (x,), backward, "expand")


def bias_add(x: Tensor, bias: Tensor, axis: int = 1) -> Tensor:
    """Add a per-channel vector along ``axis``."""
    axis = axis % x.ndim
    if bias.shape != (x.shape[axis],):
        raise DimensionError(f"bias_add: bias {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        return g, g.sum(axis=others)

    return _result(x.data + bias.data.reshape(view), (x, bias), backward, "bias_add")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul: operands need at least two axes")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] @ weight[in, out] (+ bias[out])``."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = bias_add(out, bias, axis=1)
    return reshape(out, lead + (weight.shape[1],))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)

    def backward(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def _standardize_backward(g_hat, xhat, inv_std, axes, count):
    mean_g = g_hat.sum(axis=axes, keepdims=True) / count
    mean_gx = (g_hat * xhat).sum(axis=axes, keepdims=True) / count
    return inv_std * (g_hat - mean_g - xhat * mean_gx)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale/shift per feature."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm: affine parameters must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * weight.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = _standardize_backward(g * weight.data, xhat, inv_std, (-1,), d)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, weight, bias), backward, "layer_norm")


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except 1; much faster than a multi-axis reduce on NCHW."""
    return np.einsum("ncp->c", a.reshape(a.shape[0], a.shape[1], -1))


def batch_norm(
    x: Tensor,
    weight: Tensor | None,
    bias: Tensor | None,
    mean_: np.ndarray | None = None,
    var_: np.ndarray | None = None,
    eps: float = 1e-5,
    stats: list | None = None,
) -> Tensor:
    """Per-channel (axis 1) normalisation.

    With ``mean_``/``var_`` given the statistics are treated as constants;
    otherwise batch statistics over every non-channel axis are used and
    differentiated through (and appended to ``stats`` as (mean, biased var)
    when a list is passed).
    """
    if x.ndim < 2:
        raise DimensionError("batch_norm expects at least N×C input")
    view = [1] * x.ndim
    view[1] = -1
    count = x.size // max(x.shape[1], 1)
    frozen = mean_ is not None
    if frozen:
        mu = np.asarray(mean_, dtype=x.dtype).reshape(view)
        inv_std = 1.0 / np.sqrt(np.asarray(var_, dtype=x.dtype).reshape(view) + eps)
        xhat = (x.data - mu) * inv_std
    else:
        mu = (_channel_sum(x.data) / count).reshape(view)
        centred = x.data - mu
        var = _channel_sum(centred * centred) / count
        if stats is not None:
            stats.append((mu.reshape(-1), var))
        inv_std = (1.0 / np.sqrt(var + eps)).reshape(view)
        xhat = centred * inv_std
    w = weight.data.reshape(view) if weight is not None else 1.0
    out = xhat * w + (bias.data.reshape(view) if bias is not None else 0.0)

    def backward(g):
        g_hat = g * w
        if frozen:
            gx = g_hat * inv_std
        else:
            mean_g = (_channel_sum(g_hat) / count).reshape(view)
            mean_gx = (_channel_sum(g_hat * xhat) / count).reshape(view)
            gx = inv_std * (g_hat - mean_g - xhat * mean_gx)
        gw = _channel_sum(g * xhat) if weight is not None else None
        gb = _channel_sum(g) if bias is not None else None
        return gx, gw, gb

    parents = [x, weight if weight is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0)]
    return _result(np.asarray(out, dtype=x.dtype), parents, backward, "batch_norm")


# ---------------------------------------------------------------------------
# convolution and sampling


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation with zero padding. ``x``: N×C×H×W, ``weight``: O×C×kh×kw."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4D input and weight")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {wc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    if sh == sw == 1 and not pointwise and o < c:
        return _conv2d_narrow(x, weight, bias, ph, pw)
    wmat = weight.data.reshape(o, -1)
    if pointwise:
        cols_t = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        # rows: (c, kh, kw); columns: (n, ho, wo)
        cols_t = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    out = wmat @ cols_t
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g_t = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g_t @ cols_t.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g_t.sum(axis=1) if bias is not None and bias.requires_grad else None
        if not x.requires_grad:
            return None, gw, gb
        gc = wmat.T @ g_t
        if pointwise:
            return gc.reshape(c, n, h, w).transpose(1, 0, 2, 3), gw, gb
        gc = gc.reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gc[:, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def _conv2d_narrow(x: Tensor, weight: Tensor, bias: Tensor | None, ph: int, pw: int) -> Tensor:
    """Stride-1 convolution as one GEMM per kernel tap, without im2col.

    With the padded input laid out channel-major as C×(N·Hp·Wp), tap (u, v)
    of every output pixel sits at a fixed column offset u*Wp + v, so each
    tap is a plain column slice. Outputs landing on padding are computed and
    dropped. This beats im2col when there are fewer output than input
    channels, where building and scattering the 9x column buffer dominates.
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    ho, wo = hp - kh + 1, wp - kw + 1
    dtype = x.data.dtype
    xp = np.zeros((c, n, hp, wp), dtype=dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x.data.transpose(1, 0, 2, 3)
    flat = xp.reshape(c, -1)
    span = flat.shape[1] - ((kh - 1) * wp + kw - 1)
    offsets = [u * wp + v for u in range(kh) for v in range(kw)]
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(kh * kw, o, c)
    acc = taps[0] @ flat[:, :span]
    for k in range(1, len(offsets)):
        acc += taps[k] @ flat[:, offsets[k] : offsets[k] + span]
    full = np.zeros((o, flat.shape[1]), dtype=dtype)
    full[:, :span] = acc
    out = full.reshape(o, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((o, n, hp, wp), dtype=g.dtype)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gspan = gfull.reshape(o, -1)[:, :span]
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.stack([gspan @ flat[:, off : off + span].T for off in offsets])
            gw = gw.reshape(kh, kw, o, c).transpose(2, 3, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gflat = np.zeros(flat.shape, dtype=g.dtype)
            for k, off in enumerate(offsets):
                gflat[:, off : off + span] += taps[k].T @ gspan
            gx = gflat.reshape(c, n, hp, wp)[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def bilinear_sample(x: Tensor, points: Tensor, batch_index: np.ndarray | None = None) -> Tensor:
    """Sample ``x`` at fractional (y, x) locations with zero padding.

    ``x``: C×H×W with ``points`` P×2 -> C×P. Batched form: ``x`` N×C×H×W with
    ``points`` M×P×2 -> M×C×P, where point set m reads image
    ``batch_index[m]`` (default: m). Differentiable w.r.t. ``x`` and ``points``.
    """
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    pd = points.data if batched else points.data[None]
    if batch_index is None:
        batch_index = np.arange(pd.shape[0])
    batch_index = np.asarray(batch_index, dtype=np.int64)
    if xd.ndim != 4 or pd.ndim != 3 or pd.shape[-1] != 2 or len(batch_index) != pd.shape[0]:
        raise DimensionError(f"bilinear_sample: bad shapes {x.shape}, {points.shape}")
    n, c, h, w = xd.shape
    m, p = pd.shape[:2]
    rows = xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    py, px = pd[..., 0], pd[..., 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    base = (batch_index * h * w)[:, None]

    corners = []
    out = np.zeros((m, p, c), dtype=np.result_type(xd, pd))
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        idx = base + yi.clip(0, h - 1) * w + xi.clip(0, w - 1)
        wy = ly if dy else 1.0 - ly
        wx = lx if dx else 1.0 - lx
        vals = rows[idx.reshape(-1)].reshape(m, p, c) * valid[..., None]
        out += (wy * wx)[..., None] * vals
        corners.append((dy, dx, idx, valid, wy, wx, vals))
    out = out.transpose(0, 2, 1)
    if not batched:
        out = out[0]

    def backward(g):
        gb = (g if batched else g[None]).transpose(0, 2, 1)  # m, p, c
        gx = gpts = None
        if x.requires_grad:
            weights = np.concatenate([((wy * wx) * valid).reshape(-1) for _, _, _, valid, wy, wx, _ in corners])
            target = np.concatenate([idx.reshape(-1) for _, _, idx, _, _, _, _ in corners])
            source = np.tile(np.arange(m * p), 4)
            scatter = sparse.csr_matrix((weights, (target, source)), shape=(n * h * w, m * p))
            grows = np.asarray(scatter @ gb.reshape(m * p, c), dtype=gb.dtype)
            gx = grows.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            gx = gx if batched else gx[0]
        if points.requires_grad:
            gpts = np.zeros(pd.shape, dtype=gb.dtype)
            for dy, dx, _, _, wy, wx, vals in corners:
                s = (gb * vals).sum(axis=-1)
                gpts[..., 0] += s * (wx if dy else -wx)
                gpts[..., 1] += s * (wy if dx else -wy)
            gpts = gpts if batched else gpts[0]
        return gx, gpts

    return _result(np.ascontiguousarray(out), (x, points), backward, "bilinear_sample")


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * scale - 0.5, clamped at 0
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (half-pixel centres)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize: output extents must be >= 1")
    h, w = x.shape[-2:]
    ry = _resize_matrix(h, out_h, x.dtype)
    rx = _resize_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _result(out, (x,), backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# gradient audit


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    worst_index: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_name} max_rel_error={self.max_rel_error:.3e} worst_index={self.worst_index}"


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    tol: float = 1e-3,
    op_name: str = "f",
    float64: bool = True,
) -> GradReport:
    """Compare backward() against central differences, coordinate by coordinate."""
    dtype = np.float64 if float64 else _dtype
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    with precision(dtype):
        leaf = Tensor(base.copy(), requires_grad=True)
        y = f(leaf)
        if y.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        y.backward()
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        analytic = analytic.reshape(-1)
        numeric = np.empty_like(analytic)
        probe = base.copy()
        flat = probe.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(probe)).item()
            flat[i] = orig - eps
            fm = f(Tensor(probe)).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    err = float(rel[worst]) if rel.size else 0.0
    return GradReport(op_name, err, worst, err <= tol)


# ---------------------------------------------------------------------------
# weight snapshots: u64 LE header length, JSON manifest, then raw f32 LE data


def save_snapshot(path, tensors: Mapping[str, np.ndarray | Tensor]) -> None:
    entries, blobs = [], []
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"format": "f32le", "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_snapshot(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    manifest = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    out = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"snapshot {path}: {len(raw) - offset} trailing bytes")
    return out
