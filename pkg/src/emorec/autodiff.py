"""Dense tensors with reverse-mode automatic differentiation.

Every model quantity in this package is a :class:`Tensor`: a numpy array
plus a record of the operation that produced it. Calling ``backward()`` on
a scalar result walks the recorded graph once in reverse topological order
and adds this pass's gradient into each reachable ``.grad`` buffer.
Gradients accumulate across calls; optimizer loops clear them between
steps.

Conventions:

* arrays are row-major; test and oracle paths run in float64, float32 is
  accepted for faster training runs,
* elementwise ops broadcast numpy-style over trailing dims and the
  gradient is summed back to each operand's shape,
* tensors are treated as immutable after construction except for ``grad``.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense nd-array participating in a reverse-mode autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self):
        """Populate ``grad`` for every reachable tensor with requires_grad.

        The loss must be a scalar. Each call adds one full pass worth of
        gradient, so repeated calls without clearing accumulate.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        order = trace(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, contrib in node._backward(g):
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + contrib
                else:
                    flowing[key] = contrib

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method mirrors of the free functions ---------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def trace(root):
    """Ancestors of ``root`` in topological order (inputs before users)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _fresh(data, parents, op):
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(parents) if tracked else ()
    out._backward = None
    out._op = op
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _lift(b, a)
    out = _fresh(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bw(g):
            grads = []
            if a.requires_grad:
                grads.append((a, _unbroadcast(g, a.data.shape)))
            if b.requires_grad:
                grads.append((b, _unbroadcast(g, b.data.shape)))
            return grads
        out._backward = bw
    return out


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _lift(b, a)
    out = _fresh(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bw(g):
            grads = []
            if a.requires_grad:
                grads.append((a, _unbroadcast(g, a.data.shape)))
            if b.requires_grad:
                grads.append((b, _unbroadcast(-g, b.data.shape)))
            return grads
        out._backward = bw
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _lift(b, a)
    out = _fresh(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bw(g):
            grads = []
            if a.requires_grad:
                grads.append((a, _unbroadcast(g * b.data, a.data.shape)))
            if b.requires_grad:
                grads.append((b, _unbroadcast(g * a.data, b.data.shape)))
            return grads
        out._backward = bw
    return out


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _lift(b, a)
    out = _fresh(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def bw(g):
            grads = []
            if a.requires_grad:
                grads.append((a, _unbroadcast(g / b.data, a.data.shape)))
            if b.requires_grad:
                grads.append(
                    (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
                )
            return grads
        out._backward = bw
    return out


def neg(a):
    out = _fresh(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: [(a, -g)]
    return out


def pow_(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise ContractError("pow supports scalar exponents only")
    out = _fresh(a.data ** exponent, (a,), f"pow{exponent}")
    if out.requires_grad:
        def bw(g):
            return [(a, g * exponent * a.data ** (exponent - 1))]
        out._backward = bw
    return out


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy-style stacking over leading dims."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _fresh(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def bw(g):
            grads = []
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                grads.append((a, _unbroadcast(ga, a.data.shape)))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                grads.append((b, _unbroadcast(gb, b.data.shape)))
            return grads
        out._backward = bw
    return out


def conv1d_dilated(x, weights, dilation=1):
    """Dilated 1-d convolution preserving sequence length.

    ``x`` is ``[c_in, l]`` or ``[batch, c_in, l]``; ``weights`` is
    ``[c_out, c_in, k]`` with odd ``k``. The input is zero-padded by
    ``(k-1)*dilation/2`` per side so the output keeps length ``l``; the
    receptive field of one layer is ``1 + (k-1)*dilation``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    if weights.ndim != 3:
        raise ShapeError(f"conv weights must be [c_out, c_in, k], got {weights.shape}")
    c_out, c_in, k = weights.shape
    if k % 2 == 0:
        raise ConfigError(f"even kernel size {k} is unsupported (same-length padding needs odd k)")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if x.ndim not in (2, 3) or x.shape[-2] != c_in:
        raise ShapeError(f"conv input {x.shape} does not match weights {weights.shape}")
    length = x.shape[-1]
    pad = (k - 1) * dilation // 2
    pad_spec = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, pad_spec)
    out_data = np.zeros(x.shape[:-2] + (c_out, length), dtype=x.data.dtype)
    for j in range(k):
        out_data += np.matmul(weights.data[:, :, j], xp[..., :, j * dilation:j * dilation + length])
    out = _fresh(out_data, (x, weights), "conv1d")
    if out.requires_grad:
        def bw(g):
            grads = []
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[..., :, j * dilation:j * dilation + length] += np.matmul(
                        weights.data[:, :, j].T, g
                    )
                gx = gxp[..., :, pad:pad + length] if pad else gxp
                grads.append((x, gx))
            if weights.requires_grad:
                gw = np.zeros_like(weights.data)
                for j in range(k):
                    sl = xp[..., :, j * dilation:j * dilation + length]
                    prod = np.matmul(g, np.swapaxes(sl, -1, -2))
                    gw[:, :, j] = prod.reshape((-1,) + prod.shape[-2:]).sum(axis=0)
                grads.append((weights, gw))
            return grads
        out._backward = bw
    return out


# -- nonlinearities -------------------------------------------------------


def relu(a):
    out = _fresh(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        out._backward = lambda g: [(a, g * (a.data > 0))]
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU in its tanh approximation (exact erf form is not needed here)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = _fresh(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:
        def bw(g):
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            return [(a, g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))]
        out._backward = bw
    return out


def sigmoid(a):
    s = _sigmoid_np(a.data)
    out = _fresh(s, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: [(a, g * s * (1.0 - s))]
    return out


def _sigmoid_np(x):
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a):
    t = np.tanh(a.data)
    out = _fresh(t, (a,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: [(a, g * (1.0 - t * t))]
    return out


def exp(a):
    e = np.exp(a.data)
    out = _fresh(e, (a,), "exp")
    if out.requires_grad:
        out._backward = lambda g: [(a, g * e)]
    return out


def log(a):
    out = _fresh(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: [(a, g / a.data)]
    return out


def softmax(a, axis=-1):
    """Stable softmax along ``axis``; rows sum to 1."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _fresh(y, (a,), "softmax")
    if out.requires_grad:
        def bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return [(a, (g - dot) * y)]
        out._backward = bw
    return out


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _fresh(y, (a,), "log_softmax")
    if out.requires_grad:
        def bw(g):
            return [(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]
        out._backward = bw
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit (population) variance,
    then apply the elementwise affine ``gain * xhat + bias``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _fresh(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def bw(g):
            grads = []
            gy = g * gain.data
            if x.requires_grad:
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                grads.append((x, (gy - m1 - xhat * m2) * inv))
            if gain.requires_grad:
                grads.append((gain, _unbroadcast(g * xhat, gain.data.shape)))
            if bias.requires_grad:
                grads.append((bias, _unbroadcast(g, bias.data.shape)))
            return grads
        out._backward = bw
    return out


def dropout(x, p, rng, training=True):
    """Inverted dropout: scale by 1/keep at train time, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = 1.0 - p
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
    out = _fresh(x.data * mask, (x,), "dropout")
    if out.requires_grad:
        out._backward = lambda g: [(x, g * mask)]
    return out


def bce_with_logits(logits, targets):
    """Elementwise sigmoid + binary cross-entropy in the fused stable form
    ``max(x, 0) - x*y + log(1 + exp(-|x|))``; gradient is ``sigmoid(x) - y``."""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    val = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = _fresh(val, (logits,), "bce_with_logits")
    if out.requires_grad:
        out._backward = lambda g: [(logits, g * (_sigmoid_np(x) - y))]
    return out


# -- reductions and shape ops ---------------------------------------------


def _restore_axes(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    out = _fresh(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def bw(g):
            return [(a, _restore_axes(g, a.data.shape, axis, keepdims).copy())]
        out._backward = bw
    return out


def mean(a, axis=None, keepdims=False):
    out = _fresh(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        scale = a.data.size / out.data.size
        def bw(g):
            return [(a, _restore_axes(g, a.data.shape, axis, keepdims) / scale)]
        out._backward = bw
    return out


def reshape(a, shape):
    out = _fresh(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: [(a, g.reshape(a.data.shape))]
    return out


def transpose(a, axes=None):
    if axes is not None:
        axes = tuple(ax % a.data.ndim for ax in axes)
    out = _fresh(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        inv = None if axes is None else np.argsort(axes)
        out._backward = lambda g: [(a, np.transpose(g, inv))]
    return out


def concatenate(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = _fresh(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bw(g):
            grads = []
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    grads.append((t, g[tuple(idx)].copy()))
            return grads
        out._backward = bw
    return out


def take(a, indices, axis=0):
    """Gather slices along ``axis``; backward scatter-adds (so repeated
    indices accumulate, which is what embedding lookups need)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = _fresh(np.take(a.data, indices, axis=axis), (a,), "take")
    if out.requires_grad:
        def bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
            return [(a, ga)]
        out._backward = bw
    return out


def embedding(table, ids):
    """Row lookup into ``table`` by integer ids."""
    return take(table, ids, axis=0)


# -- serialization ---------------------------------------------------------

# Blob layout: u32 rank, u32 extents, then row-major float32 data, all
# little-endian. Shared by feature files and checkpoints.


def write_tensor_blob(fh, array):
    arr = np.asarray(array)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_blob(fh):
    rank = struct.unpack("<I", _read_exact(fh, 4))[0]
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).copy()


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError(f"truncated tensor blob: wanted {n} bytes, got {len(buf)}")
    return buf
