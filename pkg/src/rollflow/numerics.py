"""Minimal deterministic tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for verification)
and record a dynamic operation graph when gradients are enabled.  The
differentiable surface is deliberately small: elementwise arithmetic,
matmul, softmax, mean/sum, shape ops, two activations, and the attention
and layer-normalization kernels built from them.  Everything is a pure
function of its inputs, so identical inputs produce bit-identical outputs
on the same platform.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np


class NumericsError(ValueError):
    """Shape mismatch, bad mask, or misuse of a kernel."""


_grad_enabled = True
_meter = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class AllocationMeter:
    """Counts bytes of tensor storage allocated while installed.

    With a recording tape every intermediate stays live until backward, so
    total bytes allocated during a forward pass is the peak activation
    footprint of that pass.
    """

    def __init__(self):
        self.bytes = 0
        self.tensors = 0

    def note(self, nbytes: int) -> None:
        self.bytes += nbytes
        self.tensors += 1


@contextlib.contextmanager
def meter_allocations(meter: AllocationMeter):
    global _meter
    prev = _meter
    _meter = meter
    try:
        yield meter
    finally:
        _meter = prev


class Tensor:
    """A numpy-backed value plus its adjoint, linked into the tape.

    ``grad`` is populated by :meth:`backward`; it is ``None`` (treated as
    zero) on leaves beforehand and always matches ``data`` in shape after.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 parents=(), backward_fn=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward_fn = backward_fn
        if _meter is not None:
            _meter.note(self.data.nbytes)

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise NumericsError("backward requires a scalar output")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _coerce(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _make(data, parents, backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data + b.data

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data - b.data

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data * b.data

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn)


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward_fn)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward_fn(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(out_data, (a,), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximate GELU; self-contained and smooth for grad checks."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    out_data = 0.5 * x * (1.0 + th)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du
        _accum(a, g * local)

    return _make(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward_fn)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward_fn(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward_fn)


def take_slice(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g / count, a.shape).copy())

    return _make(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# kernels

def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is False; mask itself carries no grad."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, a.data, a.dtype.type(value))

    def backward_fn(g):
        _accum(a, _unbroadcast(np.where(mask, g, 0.0), a.shape))

    return _make(out_data, (a,), backward_fn)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; -inf logits get exactly zero weight."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul requires tensors with at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward_fn)


def layer_normalize(x, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    if eps <= 0:
        raise NumericsError("eps must be positive")
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise NumericsError("layer_normalize needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = (x.data - mu) * inv

    def backward_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out_data).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - out_data * gy))

    return _make(out_data, (x,), backward_fn)


def attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``q``: [..., n, d], ``k``/``v``: [..., m, d]; optional boolean ``mask``
    broadcastable to [..., n, m] where True marks permitted entries.  Masked
    columns receive exactly zero weight; a fully masked row is an error.
    """
    q = as_tensor(q)
    k = as_tensor(k)
    v = as_tensor(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise NumericsError("attention operands need at least 2 axes")
    d = q.shape[-1]
    if d < 1:
        raise NumericsError("attention feature dim must be positive")
    if k.shape[-1] != d:
        raise NumericsError(f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if v.shape[-2] != k.shape[-2]:
        raise NumericsError(f"k/v sequence dims differ: {k.shape} vs {v.shape}")
    kt = permute(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, scores.shape).any(axis=-1).all():
            raise NumericsError("attention mask has a fully masked row")
        scores = masked_fill(scores, mask, -np.inf)
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# verification

def grad_check(f, x: Tensor, fd_step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar Tensor.  Requires 64-bit data; finite
    differences are unreliable in 32-bit.
    """
    if x.dtype != np.float64:
        raise NumericsError("grad_check requires float64 tensors")
    if not 1e-7 <= fd_step <= 1e-3:
        raise NumericsError("fd_step outside [1e-7, 1e-3]")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise NumericsError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat_x = x.data.ravel()
    flat_n = numeric.ravel()
    with no_grad():
        for i in range(flat_x.size):
            saved = flat_x[i]
            flat_x[i] = saved + fd_step
            fp = float(f(x).data)
            flat_x[i] = saved - fd_step
            fm = float(f(x).data)
            flat_x[i] = saved
            flat_n[i] = (fp - fm) / (2.0 * fd_step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
