"""Minimal float64 tensor kernel with a reverse-mode tape.

Tensors wrap contiguous float64 ndarrays and carry a lazily allocated
gradient buffer.  Operations record an entry on the innermost active
``Tape`` whenever any input requires grad; ``backward`` replays the tape in
reverse, accumulating gradients with ``+=`` so shared parameters (weight
tying) collect contributions from every use.  A tape is single-use: it is
consumed by ``backward``.

Everything runs in float64.  Set ``SMLAB_DEBUG_NAN=1`` to scan every op
output and raise ``NonFiniteError`` at the first non-finite value.
"""

import math
import os

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf (raised only in debug mode)."""


class Tensor:
    """N-d float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g, own=False):
        if self.grad is None:
            # adopt arrays the caller hands over (freshly allocated inside a
            # backward closure); anything else is copied so a later += here
            # cannot alias another tensor's buffer
            if own and isinstance(g, np.ndarray) and g.base is None and g.flags.owndata:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def param(data):
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK = []


class _Record:
    __slots__ = ("name", "out", "inputs", "backward_fn")

    def __init__(self, name, out, inputs, backward_fn):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops, consumed by ``backward``."""

    def __init__(self):
        self.ops = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.ops)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _debug_nan():
    return os.environ.get("SMLAB_DEBUG_NAN") == "1"


def _finish(name, out_data, inputs, backward_fn):
    """Wrap an op result, run the debug scan, and record on the tape."""
    if _debug_nan() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values in output of {name}")
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.ops.append(_Record(name, out, inputs, backward_fn))
    return out


def backward(loss, tape=None):
    """Populate gradients of everything the scalar ``loss`` depends on.

    Uses the innermost active tape unless one is passed explicitly.  The
    tape is consumed: a second backward over it raises.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward requires a scalar Tensor loss")
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise ValueError("backward called with no active tape")
    if not tape.ops:
        raise ValueError("backward on an empty (or already consumed) tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(tape.ops):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is not None and t.requires_grad:
                # an array returned as-is (pass-through) may be shared with
                # the output or a sibling input, so only adopt fresh ones
                t.accumulate_grad(gi, own=gi is not g)
    tape.ops.clear()
    tape.consumed = True


def _sum_to_shape(g, shape):
    """Reduce ``g`` back to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a, b, trans_b=False):
    """Matrix product ``a @ b`` (or ``a @ b.T`` with ``trans_b``).

    Leading batch dimensions follow numpy matmul broadcasting; the last two
    axes are the matrix axes.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(
            f"matmul needs >=2-d operands, got shapes {ad.shape} and {bd.shape}"
        )
    beff = np.swapaxes(bd, -1, -2) if trans_b else bd
    if ad.shape[-1] != beff.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}"
            f"{' (transposed)' if trans_b else ''}"
        )
    out = ad @ beff

    def bwd(g):
        ga = _sum_to_shape(g @ np.swapaxes(beff, -1, -2), ad.shape)
        gbeff = np.swapaxes(ad, -1, -2) @ g
        gb = np.swapaxes(gbeff, -1, -2) if trans_b else gbeff
        return ga, _sum_to_shape(gb, bd.shape)

    return _finish("matmul", out, (a, b), bwd)


def linear(x, w, b):
    """Dense layer ``x @ w + b`` for 2-d ``x`` (n, d_in) and bias (d_out,).

    Fusing the bias add keeps the backward pass to three fresh arrays
    instead of routing the full gradient through a broadcast add.
    """
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(
            f"linear needs 2-d input and weight, got {xd.shape} and {wd.shape}"
        )
    if xd.shape[1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise ValueError(
            f"linear shapes disagree: x {xd.shape}, w {wd.shape}, b {bd.shape}"
        )
    out = xd @ wd
    out += bd

    def bwd(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _finish("linear", out, (x, w, b), bwd)


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    out = a.data + b.data

    def bwd(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _finish("add", out, (a, b), bwd)


def mul(a, b):
    """Elementwise (Hadamard) product with broadcasting."""
    out = a.data * b.data

    def bwd(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return _finish("mul", out, (a, b), bwd)


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a):
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(a.data.sum())
    return _finish("sum_all", out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _finish("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _finish("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def gather(table, ids):
    """Rows of a 2-d ``table`` at integer ``ids`` (embedding lookup)."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ValueError(f"gather table must be 2-d, got shape {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"gather id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _finish("gather", out, (table,), bwd)


def take_rows(x, idx):
    """Select rows ``idx`` of a 2-d tensor (scatter-add on backward)."""
    idx = np.asarray(idx)
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish("take_rows", out, (x,), bwd)


def softmax(x, axis=-1):
    """Stable softmax along ``axis``: slices sum to one."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", p, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", out, (x, gain, bias), bwd)


def gelu(x):
    """Exact (erf-based) GELU."""
    c = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * c

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (c + x.data * pdf),)

    return _finish("gelu", out, (x,), bwd)


def relu(x):
    out = np.maximum(x.data, 0.0)
    return _finish("relu", out, (x,), lambda g: (g * (x.data > 0.0),))


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is zero."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.uniforms(x.size).reshape(x.shape) >= rate) / (1.0 - rate)
    return _finish("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, targets):
    """Mean negative log-softmax probability of ``targets``.

    ``logits`` is (n, vocab); ``targets`` holds n class ids.  Computed via
    log-sum-exp with max subtraction.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy logits must be 2-d, got {logits.data.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if t.shape != (n,):
        raise ValueError(f"expected {n} target ids, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ValueError(
            f"target id out of range [0, {v}): min={t.min()}, max={t.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1)
    rows = np.arange(n)
    losses = np.log(sez) - z[rows, t]
    out = np.asarray(losses.mean())

    def bwd(g):
        gl = ez / sez[:, None]
        gl[rows, t] -= 1.0
        gl *= float(np.asarray(g).reshape(())) / n
        return (gl,)

    return _finish("cross_entropy", out, (logits,), bwd)
