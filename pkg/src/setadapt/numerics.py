"""Dense float64 matrices with tape-based reverse-mode differentiation.

A matrix is a 2-D C-contiguous ``float64`` numpy array. A :class:`Node`
wraps one matrix together with its gradient and the rule that pushes the
gradient to its parents. Leaves created with ``requires_grad=True`` are the
trainable parameters; everything else is either an intermediate result or
a constant.

Only same-shape operands, row vectors (``1 x cols``) and ``1 x 1`` scalars
broadcast.
"""

import contextlib
import os
import threading

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError, NumericError

LAYER_NORM_EPS = 1e-5

_check = os.environ.get("SETADAPT_CHECK", "0").lower() in ("1", "true", "yes", "on")
_local = threading.local()


def grad_enabled():
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Build values only: new nodes record no parents or backward rules."""
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


@contextlib.contextmanager
def check_mode(enabled=True):
    """Raise :class:`NumericError` as soon as any op produces NaN/Inf."""
    global _check
    prev, _check = _check, enabled
    try:
        yield
    finally:
        _check = prev


def matrix(data, rows=None, cols=None):
    """Build a validated matrix from nested sequences or an array.

    A 1-D input becomes a single row. ``rows``/``cols`` reshape a flat
    row-major sequence.
    """
    a = np.array(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if rows is None or cols is None or a.size != rows * cols:
            raise DimensionError(f"cannot shape {a.size} values as {rows}x{cols}")
        a = a.reshape(rows, cols)
    if a.ndim == 1:
        a = a[None, :]
    elif a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got {a.ndim}-D")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains NaN or Inf")
    return np.ascontiguousarray(a)


class Node:
    """A matrix value on the autodiff tape."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "op", "_backward")

    def __init__(self, value, parents=(), backward=None, op="leaf", requires_grad=None):
        self.value = value
        self.op = op
        if requires_grad is None:
            requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
            if not requires_grad:
                parents = ()
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward if requires_grad else None
        self.grad = np.zeros_like(value) if requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def param(value):
    """Trainable leaf. The array is used in place (not copied)."""
    return Node(matrix(value) if not _is_matrix(value) else value, requires_grad=True)


def const(value):
    return Node(matrix(value) if not _is_matrix(value) else value, requires_grad=False)


def _is_matrix(value):
    return (
        isinstance(value, np.ndarray)
        and value.ndim == 2
        and value.dtype == np.float64
        and value.flags.c_contiguous
    )


def as_node(x):
    return x if isinstance(x, Node) else const(x)


def _out(value, parents, backward, op):
    if _check and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from {op}")
    return Node(value, parents, backward, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[g.sum()]])
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        return g.sum(axis=1, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a, b, op):
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1, 1):
            return
        if small[0] == 1 and small[1] == big[1]:
            return
        if small[1] == 1 and small[0] == big[0]:
            return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


# ------------------------------------------------------------ elementwise

def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "add")
    v = a.value + b.value

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.value.shape)

    return _out(v, (a, b), backward, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "sub")
    v = a.value - b.value

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.value.shape)

    return _out(v, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "mul")
    v = a.value * b.value

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.value.shape)

    return _out(v, (a, b), backward, "mul")


def scale(a, c):
    """Multiply by a python float."""
    a = as_node(a)
    c = float(c)

    def backward(g):
        a.grad += c * g

    return _out(a.value * c, (a,), backward, "scale")


def relu(a):
    a = as_node(a)
    mask = a.value > 0

    def backward(g):
        a.grad += g * mask

    return _out(np.where(mask, a.value, 0.0), (a,), backward, "relu")


def tanh(a):
    a = as_node(a)
    v = np.tanh(a.value)

    def backward(g):
        a.grad += g * (1.0 - v * v)

    return _out(v, (a,), backward, "tanh")


def exp(a):
    a = as_node(a)
    v = np.exp(a.value)

    def backward(g):
        a.grad += g * v

    return _out(v, (a,), backward, "exp")


def log(a):
    a = as_node(a)
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")

    def backward(g):
        a.grad += g / a.value

    return _out(np.log(a.value), (a,), backward, "log")


def clamp_min(a, lo):
    """``max(a, lo)``; the gradient is zero where the clamp is active."""
    a = as_node(a)
    keep = a.value >= lo

    def backward(g):
        a.grad += g * keep

    return _out(np.where(keep, a.value, lo), (a,), backward, "clamp_min")


# ------------------------------------------------------------ linear algebra

def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _out(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a):
    a = as_node(a)

    def backward(g):
        a.grad += g.T

    return _out(np.ascontiguousarray(a.value.T), (a,), backward, "transpose")


# -------------------------------------------------------------- reductions

def sum_all(a):
    a = as_node(a)

    def backward(g):
        a.grad += g[0, 0]

    return _out(np.array([[a.value.sum()]]), (a,), backward, "sum")


def mean_all(a):
    a = as_node(a)
    n = a.value.size

    def backward(g):
        a.grad += g[0, 0] / n

    return _out(np.array([[a.value.sum() / n]]), (a,), backward, "mean")


def sum_rows(a):
    """Row sums as an ``n x 1`` column."""
    a = as_node(a)

    def backward(g):
        a.grad += g

    return _out(a.value.sum(axis=1, keepdims=True), (a,), backward, "sum_rows")


# ---------------------------------------------------------- restructuring

def concat_cols(parts):
    parts = [as_node(p) for p in parts]
    n = parts[0].value.shape[0]
    if any(p.value.shape[0] != n for p in parts):
        raise DimensionError("concat_cols: row counts differ")
    edges = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            if p.requires_grad:
                p.grad += g[:, lo:hi]

    v = np.concatenate([p.value for p in parts], axis=1)
    return _out(v, tuple(parts), backward, "concat_cols")


def concat_rows(parts):
    parts = [as_node(p) for p in parts]
    d = parts[0].value.shape[1]
    if any(p.value.shape[1] != d for p in parts):
        raise DimensionError("concat_rows: column counts differ")
    edges = np.cumsum([0] + [p.value.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            if p.requires_grad:
                p.grad += g[lo:hi]

    v = np.concatenate([p.value for p in parts], axis=0)
    return _out(v, tuple(parts), backward, "concat_rows")


def take_rows(a, idx):
    """Rows ``a[idx]``; repeated indices accumulate gradient."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        np.add.at(a.grad, idx, g)

    return _out(np.ascontiguousarray(a.value[idx]), (a,), backward, "take_rows")


def slice_cols(a, lo, hi):
    a = as_node(a)

    def backward(g):
        a.grad[:, lo:hi] += g

    return _out(np.ascontiguousarray(a.value[:, lo:hi]), (a,), backward, "slice_cols")


def pick(a, cols):
    """``a[i, cols[i]]`` for every row, as an ``n x 1`` column."""
    a = as_node(a)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.value.shape[0])
    if cols.shape != rows.shape:
        raise DimensionError("pick: one column index per row required")

    def backward(g):
        a.grad[rows, cols] += g[:, 0]

    return _out(a.value[rows, cols][:, None].copy(), (a,), backward, "pick")


# ----------------------------------------------------- normalization kernels

def stable_softmax_rows(m):
    """Row-wise softmax with max subtraction."""
    m = as_node(m)
    if m.value.size == 0:
        raise ContractError("softmax of an empty matrix")
    v = kernels.softmax_rows(m.value)

    def backward(g):
        m.grad += kernels.softmax_rows_backward(v, np.ascontiguousarray(g))

    return _out(v, (m,), backward, "softmax_rows")


def layer_norm_rows(m, gain, bias, eps=LAYER_NORM_EPS):
    m, gain, bias = as_node(m), as_node(gain), as_node(bias)
    d = m.value.shape[1]
    if gain.value.shape != (1, d) or bias.value.shape != (1, d):
        raise DimensionError(f"layer_norm_rows: gain/bias must be 1x{d}")
    v, xhat, inv = kernels.layer_norm(m.value, gain.value, bias.value, float(eps))

    def backward(g):
        dx, dgain, dbias = kernels.layer_norm_backward(np.ascontiguousarray(g), xhat, inv, gain.value)
        if m.requires_grad:
            m.grad += dx
        if gain.requires_grad:
            gain.grad += dgain
        if bias.requires_grad:
            bias.grad += dbias

    return _out(v, (m, gain, bias), backward, "layer_norm")


def l2_normalize_rows(m, eps=1e-12):
    m = as_node(m)
    norm = np.sqrt((m.value * m.value).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    v = m.value / norm

    def backward(g):
        m.grad += (g - v * (g * v).sum(axis=1, keepdims=True)) / norm

    return _out(v, (m,), backward, "l2_normalize")


def sq_dists(a, b):
    """Pairwise squared euclidean distances, ``|a| x |b|``."""
    a, b = as_node(a), as_node(b)
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError(f"sq_dists: dims {a.value.shape[1]} and {b.value.shape[1]}")
    v = kernels.sq_dists(a.value, b.value)

    def backward(g):
        da, db = kernels.sq_dists_backward(g, a.value, b.value)
        if a.requires_grad:
            a.grad += da
        if b.requires_grad:
            b.grad += db

    return _out(v, (a, b), backward, "sq_dists")


# ----------------------------------------------------------- set kernels

def complement_aggregate(h, how="max"):
    """Row i aggregates all rows of ``h`` except row i (zeros if ``n == 1``)."""
    h = as_node(h)
    n = h.value.shape[0]
    if how == "max":
        v, idx = kernels.complement_max(h.value)

        def backward(g):
            h.grad += kernels.complement_max_backward(np.ascontiguousarray(g), idx, n)

    elif how == "sum":
        v = kernels.complement_sum(h.value)

        def backward(g):
            h.grad += kernels.complement_sum_backward(g)

    else:
        raise ConfigError(f"unknown aggregator {how!r}")
    return _out(v, (h,), backward, "complement_" + how)


def lstm(x, wx, wh, b):
    """Run one LSTM over the rows of ``x`` in order; returns hidden states."""
    x, wx, wh, b = as_node(x), as_node(wx), as_node(wh), as_node(b)
    hd = wh.value.shape[0]
    if wx.value.shape != (x.value.shape[1], 4 * hd) or wh.value.shape != (hd, 4 * hd) or b.value.shape != (1, 4 * hd):
        raise DimensionError("lstm: weight shapes do not match input/hidden sizes")
    hs, cs, acts = kernels.lstm_forward(x.value, wx.value, wh.value, b.value)

    def backward(g):
        dx, dwx, dwh, db = kernels.lstm_backward(
            np.ascontiguousarray(g), x.value, wx.value, wh.value, hs, cs, acts
        )
        if x.requires_grad:
            x.grad += dx
        if wx.requires_grad:
            wx.grad += dwx
        if wh.requires_grad:
            wh.grad += dwh
        if b.requires_grad:
            b.grad += db

    return _out(hs, (x, wx, wh, b), backward, "lstm")


# ------------------------------------------------------------------ dropout

def dropout_mask(shape, rate, rng, training):
    """Inverted-dropout mask: Bernoulli(1 - rate) / (1 - rate), or ones."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(a, rate, rng, training):
    a = as_node(a)
    if not training or rate == 0.0:
        return a
    return mul(a, const(dropout_mask(a.value.shape, rate, rng, training)))


# ------------------------------------------------------------------ backward

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every node reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; reset them with
    :meth:`Node.zero_grad`.
    """
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got {loss.value.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad.fill(0.0)
    loss.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def finite_diff_check(f, params, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must return a scalar Node built
    from the current values of ``params`` (leaf Nodes). The relative error
    of one entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.value[0, 0]):
        raise NumericError("loss is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f().value[0, 0]
            flat[k] = orig - h
            down = f().value[0, 0]
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite loss during finite differences")
            num = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
