"""Dense float64 tensors with reverse-mode differentiation.

The engine is define-by-run.  Every operation stamps its output with a
monotonically increasing serial number and a closure that routes the
output adjoint back to the operation's inputs.  ``backward`` replays the
closures in descending serial order, which is exactly reverse execution
order, so each forward pass carries its own graph and separate passes
(including passes on different threads) share no mutable state.

All arithmetic is 64-bit; narrower precision exists only at the
serialization boundary (checkpoints store 32-bit payloads).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    ParameterError,
)

# Additive logit penalty used to mask attention keys.  exp(x - max) of a
# masked entry underflows to exactly 0.0 as long as the unmasked logits
# stay orders of magnitude above the sentinel.
MASK_SENTINEL = -1.0e9
_DEGENERATE_CUTOFF = MASK_SENTINEL / 2.0

_serial = itertools.count()


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn",
                 "_serial", "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._serial = next(_serial)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions carry the semantics.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data, parents, grad_fn):
    """Build an op-result tensor; constant subgraphs are pruned."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._grad_fn = grad_fn if out.requires_grad else None
    out._serial = next(_serial)
    out._backward_done = False
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} invalid for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _op(data, (a, b), grad_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _op(data, (a, b), grad_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _op(data, (a, b), grad_fn)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def grad_fn(g):
        return ((a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * data / b.data, b.shape)))

    return _op(data, (a, b), grad_fn)


def neg(x):
    x = _as_tensor(x)
    return _op(-x.data, (x,), lambda g: ((x, -g),))


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    if not math.isfinite(c):
        raise ParameterError(f"scale factor must be finite, got {c}")
    return _op(x.data * c, (x,), lambda g: ((x, g * c),))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast from 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _op(data, (a, b), grad_fn)


def transpose(x):
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose needs at least 2-d input, got {x.shape}")
    return _op(x.data.swapaxes(-1, -2), (x,), lambda g: ((x, g.swapaxes(-1, -2)),))


def permute(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _op(np.transpose(x.data, axes), (x,),
               lambda g: ((x, np.transpose(g, inverse)),))


def reshape(x, shape):
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _op(data, (x,), lambda g: ((x, g.reshape(x.shape)),))


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    axis = _normalize_axis(axis, tensors[0].ndim)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(zip(tensors, pieces))

    return _op(data, tuple(tensors), grad_fn)


def split(x, sections, axis):
    """Split into ``sections`` equal parts along ``axis``."""
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] % sections != 0:
        raise DimensionError(f"cannot split extent {x.shape[axis]} into {sections} equal parts")
    pieces = np.split(x.data, sections, axis=axis)
    width = x.shape[axis] // sections
    outs = []
    for i, piece in enumerate(pieces):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * width, (i + 1) * width)
        sl = tuple(sl)

        def grad_fn(g, _sl=sl):
            full = np.zeros(x.shape)
            full[_sl] = g
            return ((x, full),)

        outs.append(_op(piece, (x,), grad_fn))
    return tuple(outs)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(_normalize_axis(a, len(shape)) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    return _op(np.asarray(data), (x,),
               lambda g: ((x, _expand_reduced(g, x.shape, axis, keepdims)),))


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.shape[_normalize_axis(a, x.ndim)] for a in ((axis,) if isinstance(axis, int) else axis)])
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(x, axis):
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    data = np.cumsum(x.data, axis=axis)

    def grad_fn(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return ((x, rev),)

    return _op(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------

def log(x):
    x = _as_tensor(x)
    return _op(np.log(x.data), (x,), lambda g: ((x, g / x.data),))


def exp(x):
    x = _as_tensor(x)
    data = np.exp(x.data)
    return _op(data, (x,), lambda g: ((x, g * data),))


def sqrt(x):
    x = _as_tensor(x)
    data = np.sqrt(x.data)
    return _op(data, (x,), lambda g: ((x, g * 0.5 / data),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x):
    x = _as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    return _op(data, (x,), lambda g: ((x, g * _sigmoid(x.data)),))


def softmax(x, axis):
    """Stable softmax along ``axis``.

    Entries pushed below the mask sentinel underflow to exactly zero.  A
    slice whose entries are all masked has no well-defined distribution and
    raises; callers must keep at least one entry unmasked.
    """
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(m <= _DEGENERATE_CUTOFF):
        raise DegenerateRowError("softmax slice has every entry masked")
    e = np.exp(x.data - m)
    denom = e.sum(axis=axis, keepdims=True)
    s = e / denom

    def grad_fn(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((x, s * (g - inner)),)

    return _op(s, (x,), grad_fn)


def layer_norm(x, gain, bias, epsilon):
    """Normalize the last axis to zero mean / unit variance, then scale-shift.

    The variance denominator includes ``epsilon``, so constant slices map to
    the bias rather than dividing by zero.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({n},)")
    epsilon = float(epsilon)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        u = g * gain.data
        gx = inv * (u - u.mean(axis=-1, keepdims=True)
                    - xhat * (u * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g.copy()
        return ((x, gx), (gain, ggain.reshape(gain.shape)), (bias, gbias.reshape(bias.shape)))

    return _op(data, (x, gain, bias), grad_fn)


def dropout(x, p_drop, mode, rng=None):
    """Inverted dropout: train-time zeroing with 1/(1-p) rescale, eval identity."""
    x = _as_tensor(x)
    p_drop = float(p_drop)
    if not 0.0 <= p_drop < 1.0:
        raise ParameterError(f"p_drop must be in [0, 1), got {p_drop}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        return x
    if rng is None:
        raise ParameterError("train-mode dropout requires an rng")
    keep = (rng.random(x.shape) >= p_drop) / (1.0 - p_drop)
    return _op(x.data * keep, (x,), lambda g: ((x, g * keep),))


def affine(x, w, b):
    """Row-wise x @ w + b."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2:
        raise DimensionError(f"affine weight must be 2-d, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``.

    Walks the recorded operations in reverse execution order.  A second call
    on the same result is an error: the graph's adjoint has already been
    consumed and the forward pass must be rerun first.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise ContractError("backward already ran for this result; rerun the forward pass")
    loss._backward_done = True
    seed = np.ones_like(loss.data)
    if loss._grad_fn is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    # Gather grad-requiring op nodes reachable through parent links.
    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._grad_fn is not None:
            nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._serial, reverse=True)

    pending = {id(loss): seed}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in node._grad_fn(g):
            if pg is None or not parent.requires_grad:
                continue
            if parent._grad_fn is None:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_coords: int
    worst_coord: tuple | None

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def grad_check(f, x, step=1e-3, tol=1e-4, n_coords=None, rng=None, denom_floor=1e-2):
    """Compare the analytic gradient of ``f`` at ``x`` to central differences.

    ``f`` must be scalar-valued and deterministic (run dropout in eval
    mode); it is evaluated twice up front and any bitwise disagreement is a
    contract violation.  The per-coordinate relative error is
    ``|a - n| / max(|a|, |n|, denom_floor)`` so coordinates whose true
    gradient is near zero are judged against an absolute floor instead of
    blowing up the ratio.
    """
    out1 = f(x)
    out2 = f(x)
    if not isinstance(out1, Tensor) or out1.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.array_equal(out1.data, out2.data):
        raise ContractError("function is not deterministic: two forward passes disagree")

    had_grad_flag = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        backward(f(x))
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = had_grad_flag
        x.grad = saved_grad

    flat_indices = np.arange(x.data.size)
    if n_coords is not None and n_coords < x.data.size:
        if rng is None:
            rng = np.random.default_rng(0)
        flat_indices = rng.choice(x.data.size, size=n_coords, replace=False)

    flat = x.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    max_rel = 0.0
    worst = None
    for i in flat_indices:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic_flat[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(int(i), x.shape)
    return GradCheckReport(max_rel_err=float(max_rel), tol=tol,
                           n_coords=len(flat_indices), worst_coord=worst)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def assert_finite(arr, where=""):
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values {('in ' + where) if where else ''}".strip())
