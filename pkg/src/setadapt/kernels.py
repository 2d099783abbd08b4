"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``<name>_numpy`` (vectorized numpy) and
``<name>_numba`` (explicit loops under ``@njit``). The public name is bound
to one of them at import time. Set ``SETADAPT_NUMBA=0`` in the environment
to force the numpy path; it is also used when numba cannot be imported.

Kernels take and return C-contiguous float64 arrays and never mutate their
inputs.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SETADAPT_NUMBA", "1").lower() not in ("0", "false", "no", "off")

if HAVE_NUMBA:
    jit = njit(cache=True, nogil=True)
else:  # pragma: no cover
    def jit(f):
        return f


# ---------------------------------------------------------------- softmax

def softmax_rows_numpy(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_numpy(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


@jit
def softmax_rows_numba(x):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(m):
            out[i, j] /= s
    return out


@jit
def softmax_rows_backward_numba(y, g):
    n, m = y.shape
    out = np.empty((n, m))
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


# ------------------------------------------------------------- layer norm

def layer_norm_numpy(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0].copy()


def layer_norm_backward_numpy(g, xhat, inv, gain):
    d = xhat.shape[1]
    dxhat = g * gain
    dx = (inv[:, None] / d) * (
        d * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    dgain = (g * xhat).sum(axis=0, keepdims=True)
    dbias = g.sum(axis=0, keepdims=True)
    return dx, dgain, dbias


@jit
def layer_norm_numba(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty((n, d))
    xhat = np.empty((n, d))
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for k in range(d):
            mu += x[i, k]
        mu /= d
        var = 0.0
        for k in range(d):
            c = x[i, k] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        inv[i] = r
        for k in range(d):
            h = (x[i, k] - mu) * r
            xhat[i, k] = h
            y[i, k] = h * gain[0, k] + bias[0, k]
    return y, xhat, inv


@jit
def layer_norm_backward_numba(g, xhat, inv, gain):
    n, d = xhat.shape
    dx = np.empty((n, d))
    dgain = np.zeros((1, d))
    dbias = np.zeros((1, d))
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for k in range(d):
            dh = g[i, k] * gain[0, k]
            s1 += dh
            s2 += dh * xhat[i, k]
            dgain[0, k] += g[i, k] * xhat[i, k]
            dbias[0, k] += g[i, k]
        for k in range(d):
            dh = g[i, k] * gain[0, k]
            dx[i, k] = (inv[i] / d) * (d * dh - s1 - xhat[i, k] * s2)
    return dx, dgain, dbias


# ------------------------------------------------------ squared distances

def sq_dists_numpy(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=2)


@jit
def sq_dists_numba(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            out[i, j] = s
    return out


def sq_dists_backward(g, a, b):
    """Gradients of ``sum(g * sq_dists(a, b))`` w.r.t. ``a`` and ``b``."""
    da = 2.0 * (g.sum(axis=1, keepdims=True) * a - g @ b)
    db = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
    return da, db


# ----------------------------------------------- complement aggregation
# Row i of the output aggregates every row of h except row i. An empty
# complement (n == 1) aggregates to zeros. Max ties resolve to the lowest row.

def complement_max_numpy(h):
    n, d = h.shape
    if n == 1:
        return np.zeros((1, d)), np.full((1, d), -1, dtype=np.int64)
    order = np.argsort(-h, axis=0, kind="stable")
    first, second = order[0], order[1]
    rows = np.arange(n)[:, None]
    idx = np.where(rows == first[None, :], second[None, :], first[None, :])
    out = np.take_along_axis(h, idx, axis=0)
    return out, idx.astype(np.int64)


def complement_max_backward_numpy(g, idx, n):
    d = g.shape[1]
    dh = np.zeros((n, d))
    if n == 1:
        return dh
    cols = np.broadcast_to(np.arange(d), idx.shape)
    np.add.at(dh, (idx, cols), g)
    return dh


@jit
def complement_max_numba(h):
    n, d = h.shape
    out = np.zeros((n, d))
    idx = np.full((n, d), -1, dtype=np.int64)
    if n == 1:
        return out, idx
    for k in range(d):
        # top two rows of column k, earlier rows winning ties
        b1, b2 = 0, -1
        for j in range(1, n):
            if h[j, k] > h[b1, k]:
                b2, b1 = b1, j
            elif b2 < 0 or h[j, k] > h[b2, k]:
                b2 = j
        for i in range(n):
            best = b2 if i == b1 else b1
            idx[i, k] = best
            out[i, k] = h[best, k]
    return out, idx


@jit
def complement_max_backward_numba(g, idx, n):
    d = g.shape[1]
    dh = np.zeros((n, d))
    if n == 1:
        return dh
    for i in range(idx.shape[0]):
        for k in range(d):
            dh[idx[i, k], k] += g[i, k]
    return dh


def complement_sum(h):
    return h.sum(axis=0, keepdims=True) - h


def complement_sum_backward(g):
    return g.sum(axis=0, keepdims=True) - g


# ------------------------------------------------------------------- LSTM
# Gate layout along the 4h axis: input, forget, candidate, output.
# Zero initial hidden and cell state.

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward_numpy(x, wx, wh, b):
    n = x.shape[0]
    hd = wh.shape[0]
    hs = np.zeros((n, hd))
    cs = np.zeros((n, hd))
    acts = np.zeros((n, 4 * hd))
    h = np.zeros(hd)
    c = np.zeros(hd)
    xw = x @ wx + b[0]
    for t in range(n):
        z = xw[t] + h @ wh
        i = _sigmoid(z[:hd])
        f = _sigmoid(z[hd:2 * hd])
        gg = np.tanh(z[2 * hd:3 * hd])
        o = _sigmoid(z[3 * hd:])
        c = f * c + i * gg
        h = o * np.tanh(c)
        acts[t] = np.concatenate([i, f, gg, o])
        cs[t] = c
        hs[t] = h
    return hs, cs, acts


def lstm_backward_numpy(dh_out, x, wx, wh, hs, cs, acts):
    n, hd = hs.shape
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros((1, 4 * hd))
    dx = np.zeros_like(x)
    dh_next = np.zeros(hd)
    dc_next = np.zeros(hd)
    for t in range(n - 1, -1, -1):
        i = acts[t, :hd]
        f = acts[t, hd:2 * hd]
        gg = acts[t, 2 * hd:3 * hd]
        o = acts[t, 3 * hd:]
        tc = np.tanh(cs[t])
        c_prev = cs[t - 1] if t > 0 else np.zeros(hd)
        h_prev = hs[t - 1] if t > 0 else np.zeros(hd)
        dh = dh_out[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            dh * tc * o * (1.0 - o),
        ])
        dwx += np.outer(x[t], dz)
        dwh += np.outer(h_prev, dz)
        db[0] += dz
        dx[t] = wx @ dz
        dh_next = wh @ dz
        dc_next = dc * f
    return dx, dwx, dwh, db


@jit
def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@jit
def lstm_forward_numba(x, wx, wh, b):
    n, din = x.shape
    hd = wh.shape[0]
    hs = np.zeros((n, hd))
    cs = np.zeros((n, hd))
    acts = np.zeros((n, 4 * hd))
    z = np.empty(4 * hd)
    for t in range(n):
        for u in range(4 * hd):
            s = b[0, u]
            for k in range(din):
                s += x[t, k] * wx[k, u]
            if t > 0:
                for k in range(hd):
                    s += hs[t - 1, k] * wh[k, u]
            z[u] = s
        for k in range(hd):
            i = _sig(z[k])
            f = _sig(z[hd + k])
            gg = np.tanh(z[2 * hd + k])
            o = _sig(z[3 * hd + k])
            c_prev = cs[t - 1, k] if t > 0 else 0.0
            c = f * c_prev + i * gg
            cs[t, k] = c
            hs[t, k] = o * np.tanh(c)
            acts[t, k] = i
            acts[t, hd + k] = f
            acts[t, 2 * hd + k] = gg
            acts[t, 3 * hd + k] = o
    return hs, cs, acts


@jit
def lstm_backward_numba(dh_out, x, wx, wh, hs, cs, acts):
    n, hd = hs.shape
    din = x.shape[1]
    dwx = np.zeros(wx.shape)
    dwh = np.zeros(wh.shape)
    db = np.zeros((1, 4 * hd))
    dx = np.zeros(x.shape)
    dh_next = np.zeros(hd)
    dc_next = np.zeros(hd)
    dz = np.empty(4 * hd)
    for t in range(n - 1, -1, -1):
        for k in range(hd):
            i = acts[t, k]
            f = acts[t, hd + k]
            gg = acts[t, 2 * hd + k]
            o = acts[t, 3 * hd + k]
            tc = np.tanh(cs[t, k])
            c_prev = cs[t - 1, k] if t > 0 else 0.0
            dh = dh_out[t, k] + dh_next[k]
            dc = dh * o * (1.0 - tc * tc) + dc_next[k]
            dz[k] = dc * gg * i * (1.0 - i)
            dz[hd + k] = dc * c_prev * f * (1.0 - f)
            dz[2 * hd + k] = dc * i * (1.0 - gg * gg)
            dz[3 * hd + k] = dh * tc * o * (1.0 - o)
            dc_next[k] = dc * f
        for u in range(4 * hd):
            db[0, u] += dz[u]
            for k in range(din):
                dwx[k, u] += x[t, k] * dz[u]
            if t > 0:
                for k in range(hd):
                    dwh[k, u] += hs[t - 1, k] * dz[u]
        for k in range(din):
            s = 0.0
            for u in range(4 * hd):
                s += wx[k, u] * dz[u]
            dx[t, k] = s
        for k in range(hd):
            s = 0.0
            for u in range(4 * hd):
                s += wh[k, u] * dz[u]
            dh_next[k] = s
    return dx, dwx, dwh, db


if USE_NUMBA:
    softmax_rows = softmax_rows_numba
    softmax_rows_backward = softmax_rows_backward_numba
    layer_norm = layer_norm_numba
    layer_norm_backward = layer_norm_backward_numba
    sq_dists = sq_dists_numba
    complement_max = complement_max_numba
    complement_max_backward = complement_max_backward_numba
    lstm_forward = lstm_forward_numba
    lstm_backward = lstm_backward_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_backward = softmax_rows_backward_numpy
    layer_norm = layer_norm_numpy
    layer_norm_backward = layer_norm_backward_numpy
    sq_dists = sq_dists_numpy
    complement_max = complement_max_numpy
    complement_max_backward = complement_max_backward_numpy
    lstm_forward = lstm_forward_numpy
    lstm_backward = lstm_backward_numpy


def backend():
    """Name of the active kernel path: ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
