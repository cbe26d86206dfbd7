"""Dense tensors with tape-based reverse-mode differentiation.

Deliberately small: row-major numpy storage, one engine-wide precision
switch, and exactly the operations a masked decoder-only transformer
needs. Operations executed under an active ``Tape`` record a backward
closure; ``backward`` replays the closures in exact reverse recording
order, so identical inputs and operation order give bitwise-identical
values and gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import NumericalError, ShapeError, TapeError

LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_dtype = np.float32

_DTYPE_NAMES = {
    "float32": np.float32,
    "fp32": np.float32,
    "float64": np.float64,
    "fp64": np.float64,
}


def set_dtype(dtype):
    """Set the engine-wide float precision ("float32" or "float64").

    Affects tensors created afterwards; existing tensors keep theirs.
    """
    global _dtype
    if isinstance(dtype, str):
        try:
            dtype = _DTYPE_NAMES[dtype]
        except KeyError:
            raise ValueError(f"unknown dtype name {dtype!r}") from None
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _dtype = dtype


def default_dtype():
    return _dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the engine precision (used by fp64 oracle tests)."""
    prev = _dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


class Tensor:
    """Dense row-major array plus an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def parameter(data, dtype=None):
    """A trainable tensor (gradients will be accumulated into it)."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None):
    """A tensor excluded from differentiation (e.g. the causal mask)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations; backward replays it in reverse.

    A tape is consumed by its first backward pass; calling backward on
    it again raises TapeError.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._records)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor):
    """Accumulate d(loss)/d(tensor) into .grad for every recorded input.

    ``loss`` must be a scalar produced under the tape being consumed.
    """
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under a recording tape")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape._consumed = True
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for fn in reversed(tape._records):
        fn()
    tape._records.clear()


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Recording helpers


def _result(data, tape, requires_grad, bwd_builder):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = bool(tape is not None and requires_grad)
    out._tape = tape
    if out.requires_grad:
        tape._records.append(bwd_builder(out))
    return out


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g)  # own the buffer; later accumulation is in place
    else:
        t.grad += g


def _grad_buffer(t: Tensor):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the input's shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, stacked x 2-D, and stacked x stacked."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    if ad.ndim == 2 and bd.ndim > 2:
        raise ShapeError(f"matmul does not broadcast a 2-D left operand over {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} x {bd.shape}")
    tape = _active_tape()
    req = a.requires_grad or b.requires_grad

    def builder(out):
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ bd.swapaxes(-1, -2))
            if b.requires_grad:
                if bd.ndim == 2 and ad.ndim > 2:
                    k = ad.shape[-1]
                    _accum(b, ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    _accum(b, ad.swapaxes(-1, -2) @ g)
        return bwd

    return _result(ad @ bd, tape, req, builder)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose needs a >=2-D tensor, got {x.data.shape}")
    tape = _active_tape()

    def builder(out):
        def bwd():
            if out.grad is not None:
                _accum(x, out.grad.swapaxes(-1, -2))
        return bwd

    return _result(x.data.swapaxes(-1, -2), tape, x.requires_grad, builder)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes do not broadcast: {a.data.shape} + {b.data.shape}") from None
    tape = _active_tape()
    req = a.requires_grad or b.requires_grad

    def builder(out):
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        return bwd

    return _result(data, tape, req, builder)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shapes do not broadcast: {a.data.shape} * {b.data.shape}") from None
    tape = _active_tape()
    req = a.requires_grad or b.requires_grad

    def builder(out):
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        return bwd

    return _result(data, tape, req, builder)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    tape = _active_tape()

    def builder(out):
        def bwd():
            if out.grad is not None:
                _accum(x, out.grad * c)
        return bwd

    return _result(x.data * c, tape, x.requires_grad, builder)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation; backward uses the analytic derivative."""
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * sq * xd))
    data = 0.5 * xd * (1.0 + t)
    tape = _active_tape()

    def builder(out):
        def bwd():
            g = out.grad
            if g is None:
                return
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
            d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
            _accum(x, g * d)
        return bwd

    return _result(data.astype(xd.dtype, copy=False), tape, x.requires_grad, builder)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericalError("softmax input contains NaN or infinity")
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    data = e / e.sum(axis=-1, keepdims=True)
    tape = _active_tape()

    def builder(out):
        def bwd():
            g = out.grad
            if g is None:
                return
            dot = (g * data).sum(axis=-1, keepdims=True)
            _accum(x, data * (g - dot))
        return bwd

    return _result(data, tape, x.requires_grad, builder)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    xd = x.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match feature dim {d}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    tape = _active_tape()
    req = x.requires_grad or gain.requires_grad or bias.requires_grad

    def builder(out):
        def bwd():
            g = out.grad
            if g is None:
                return
            if gain.requires_grad:
                _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accum(bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (dxhat - m1 - xhat * m2))
        return bwd

    return _result(data, tape, req, builder)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.data.shape[0]
    bad = (ids < 0) | (ids >= v)
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        raise IndexError(f"token id {int(ids.reshape(-1)[pos])} at position {pos} outside [0, {v})")
    tape = _active_tape()

    def builder(out):
        def bwd():
            g = out.grad
            if g is not None:
                np.add.at(_grad_buffer(table), ids, g)
        return bwd

    return _result(table.data[ids], tape, table.requires_grad, builder)


def take_columns(x: Tensor, idx) -> Tensor:
    """Gather columns of a 2-D tensor; indices must be unique."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_columns needs a 2-D tensor, got {x.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    tape = _active_tape()

    def builder(out):
        def bwd():
            g = out.grad
            if g is not None:
                buf = _grad_buffer(x)
                buf[:, idx] += g  # safe: indices are unique
        return bwd

    # fancy indexing on axis 1 yields an F-ordered buffer; force C order so
    # downstream matmuls take the same BLAS path as the ungathered weight
    return _result(np.ascontiguousarray(x.data[:, idx]), tape, x.requires_grad, builder)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    tape = _active_tape()

    def builder(out):
        def bwd():
            g = out.grad
            if g is not None:
                _accum(x, np.full(x.data.shape, g, dtype=x.data.dtype))
        return bwd

    return _result(x.data.sum(), tape, x.requires_grad, builder)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token-level negative log-likelihood in nats.

    ``logits`` is [..., V]; ``targets`` holds one id per logit row.
    """
    ld = logits.data
    if ld.ndim < 2:
        raise ShapeError(f"cross_entropy needs [..., V] logits, got {ld.shape}")
    v = ld.shape[-1]
    rows = ld.reshape(-1, v)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != rows.shape[0]:
        raise ShapeError(f"cross_entropy got {rows.shape[0]} logit rows but {tgt.shape[0]} targets")
    bad = (tgt < 0) | (tgt >= v)
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        raise IndexError(f"target id {int(tgt[pos])} at position {pos} outside [0, {v})")
    n = rows.shape[0]
    m = rows.max(axis=-1, keepdims=True)
    z = rows - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    lse = np.log(sez[:, 0])
    nll = lse - z[np.arange(n), tgt]
    data = np.asarray(nll.mean(), dtype=ld.dtype)
    tape = _active_tape()

    def builder(out):
        def bwd():
            g = out.grad
            if g is None or not logits.requires_grad:
                return
            probs = ez / sez
            probs[np.arange(n), tgt] -= 1.0
            probs *= g / n
            _accum(logits, probs.reshape(ld.shape))
        return bwd

    return _result(data, tape, logits.requires_grad, builder)
