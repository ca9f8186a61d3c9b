"""
Row-wise numeric kernels behind the differentiable engine.

Each kernel has a pure-numpy implementation and a numba ``@njit`` twin with
identical semantics. The active set is chosen once at import:

    CMAL_NUMBA=0   force the numpy path
    CMAL_NUMBA=1   use numba when importable (default)

Both sets stay importable as ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so tests and
benchmarks can compare them directly.
"""

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

_GELU_C = math.sqrt(2.0 / math.pi)


# -----------------------------------------------------------------------------
# numpy path
# -----------------------------------------------------------------------------


def _np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(dy, p):
    return p * (dy - (dy * p).sum(axis=1, keepdims=True))


def _np_log_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _np_log_softmax_bwd(dy, lp):
    return dy - np.exp(lp) * dy.sum(axis=1, keepdims=True)


def _np_layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layer_norm_bwd(dy, xhat, rstd, gain):
    dxhat = dy * gain
    dx = (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    ) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _np_gelu_bwd(dy, x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    softmax_fwd=_np_softmax_fwd,
    softmax_bwd=_np_softmax_bwd,
    log_softmax_fwd=_np_log_softmax_fwd,
    log_softmax_bwd=_np_log_softmax_bwd,
    layer_norm_fwd=_np_layer_norm_fwd,
    layer_norm_bwd=_np_layer_norm_bwd,
    gelu_fwd=_np_gelu_fwd,
    gelu_bwd=_np_gelu_bwd,
)


# -----------------------------------------------------------------------------
# numba path
# -----------------------------------------------------------------------------

if _HAS_NUMBA:

    @njit(cache=True)
    def _nb_softmax_fwd(x):
        r, c = x.shape
        out = np.empty_like(x)
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(c):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def _nb_softmax_bwd(dy, p):
        r, c = p.shape
        out = np.empty_like(p)
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += dy[i, j] * p[i, j]
            for j in range(c):
                out[i, j] = p[i, j] * (dy[i, j] - dot)
        return out

    @njit(cache=True)
    def _nb_log_softmax_fwd(x):
        r, c = x.shape
        out = np.empty_like(x)
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(c):
                s += math.exp(x[i, j] - m)
            ls = math.log(s)
            for j in range(c):
                out[i, j] = x[i, j] - m - ls
        return out

    @njit(cache=True)
    def _nb_log_softmax_bwd(dy, lp):
        r, c = lp.shape
        out = np.empty_like(lp)
        for i in range(r):
            s = 0.0
            for j in range(c):
                s += dy[i, j]
            for j in range(c):
                out[i, j] = dy[i, j] - math.exp(lp[i, j]) * s
        return out

    @njit(cache=True)
    def _nb_layer_norm_fwd(x, gain, bias, eps):
        r, c = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(r)
        for i in range(r):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            rs = 1.0 / math.sqrt(var + eps)
            rstd[i] = rs
            for j in range(c):
                h = (x[i, j] - mu) * rs
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @njit(cache=True)
    def _nb_layer_norm_bwd(dy, xhat, rstd, gain):
        r, c = xhat.shape
        dx = np.empty_like(xhat)
        dgain = np.zeros(c)
        dbias = np.zeros(c)
        for i in range(r):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                d = dy[i, j] * gain[j]
                m1 += d
                m2 += d * xhat[i, j]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
            m1 /= c
            m2 /= c
            for j in range(c):
                dx[i, j] = (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
        return dx, dgain, dbias

    @njit(cache=True)
    def _nb_gelu_fwd(x):
        out = np.empty_like(x)
        flat = x.ravel()
        o = out.ravel()
        for k in range(flat.size):
            v = flat[k]
            o[k] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out

    @njit(cache=True)
    def _nb_gelu_bwd(dy, x):
        out = np.empty_like(x)
        flat = x.ravel()
        g = dy.ravel()
        o = out.ravel()
        for k in range(flat.size):
            v = flat[k]
            t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
            du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            o[k] = g[k] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    def _nb_layer_norm_fwd_wrap(x, gain, bias, eps):
        return _nb_layer_norm_fwd(
            np.ascontiguousarray(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps)
        )

    def _contig(fn):
        def call(*arrays):
            return fn(*(np.ascontiguousarray(a) for a in arrays))

        call.__name__ = fn.__name__
        return call

    NUMBA_KERNELS = SimpleNamespace(
        name="numba",
        softmax_fwd=_contig(_nb_softmax_fwd),
        softmax_bwd=_contig(_nb_softmax_bwd),
        log_softmax_fwd=_contig(_nb_log_softmax_fwd),
        log_softmax_bwd=_contig(_nb_log_softmax_bwd),
        layer_norm_fwd=_nb_layer_norm_fwd_wrap,
        layer_norm_bwd=_contig(_nb_layer_norm_bwd),
        gelu_fwd=_contig(_nb_gelu_fwd),
        gelu_bwd=_contig(_nb_gelu_bwd),
    )
else:  # pragma: no cover
    NUMBA_KERNELS = None


def _select():
    flag = os.environ.get("CMAL_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or NUMBA_KERNELS is None:
        return NUMPY_KERNELS
    return NUMBA_KERNELS


K = _select()
