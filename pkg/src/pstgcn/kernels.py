"""Hot loops: convolution over (time, joint) and graph mixing.

Each kernel has a numba implementation and a pure-numpy one. The active
path comes from ``PSTGCN_BACKEND`` (``numba`` or ``numpy``) at import time
and can be switched later with :func:`set_backend`. Without numba
installed the numpy path is always used.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _default_backend() -> str:
    name = os.environ.get("PSTGCN_BACKEND", "numpy").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"PSTGCN_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        return "numpy"
    return name


_backend = _default_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select the kernel path; returns the previous one."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


def conv_out_len(T: int, k: int, stride: int, pad: int) -> int:
    return (T + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- numba path


@njit(cache=True)
def _tap_range(To, T, a, stride, pad):
    # output steps whose input index t*stride + a - pad falls inside [0, T)
    lo = 0
    while lo < To and lo * stride + a - pad < 0:
        lo += 1
    hi = To
    while hi > lo and (hi - 1) * stride + a - pad >= T:
        hi -= 1
    return lo, hi


@njit(cache=True)
def _conv_fwd_nb(x, w, stride, pad):
    N, C, T, V = x.shape
    O, _, Kt, Kv = w.shape
    To = (T + 2 * pad - Kt) // stride + 1
    Vo = V - Kv + 1
    out = np.zeros((N, O, To, Vo), dtype=x.dtype)
    flat = stride == 1 and Kv == 1
    xf = x.reshape(N, C, T * V)
    of = out.reshape(N, O, To * Vo)
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for a in range(Kt):
                    lo, hi = _tap_range(To, T, a, stride, pad)
                    if flat:
                        wv = w[o, c, a, 0]
                        src = (lo + a - pad) * V
                        dst = lo * V
                        for k in range((hi - lo) * V):
                            of[n, o, dst + k] += wv * xf[n, c, src + k]
                        continue
                    for b in range(Kv):
                        wv = w[o, c, a, b]
                        for t in range(lo, hi):
                            ti = t * stride + a - pad
                            for v in range(Vo):
                                out[n, o, t, v] += wv * x[n, c, ti, v + b]
    return out


@njit(cache=True)
def _conv_bwd_nb(dout, x, w, stride, pad):
    N, C, T, V = x.shape
    O, _, Kt, Kv = w.shape
    To = dout.shape[2]
    Vo = dout.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    flat = stride == 1 and Kv == 1
    xf = x.reshape(N, C, T * V)
    dxf = dx.reshape(N, C, T * V)
    gf = dout.reshape(N, O, To * Vo)
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for a in range(Kt):
                    lo, hi = _tap_range(To, T, a, stride, pad)
                    if flat:
                        wv = w[o, c, a, 0]
                        src = (lo + a - pad) * V
                        dst = lo * V
                        acc = 0.0
                        for k in range((hi - lo) * V):
                            g = gf[n, o, dst + k]
                            acc += g * xf[n, c, src + k]
                            dxf[n, c, src + k] += wv * g
                        dw[o, c, a, 0] += acc
                        continue
                    for b in range(Kv):
                        wv = w[o, c, a, b]
                        acc = 0.0
                        for t in range(lo, hi):
                            ti = t * stride + a - pad
                            for v in range(Vo):
                                g = dout[n, o, t, v]
                                acc += g * x[n, c, ti, v + b]
                                dx[n, c, ti, v + b] += wv * g
                        dw[o, c, a, b] += acc
    return dx, dw


@njit(cache=True)
def _mix_fwd_nb(z, G):
    N, P, O, T, V = z.shape
    out = np.zeros((N, O, T, V), dtype=z.dtype)
    for n in range(N):
        for p in range(P):
            for o in range(O):
                for t in range(T):
                    for i in range(V):
                        acc = 0.0
                        for j in range(V):
                            acc += G[p, i, j] * z[n, p, o, t, j]
                        out[n, o, t, i] += acc
    return out


@njit(cache=True)
def _mix_bwd_nb(dout, z, G):
    N, P, O, T, V = z.shape
    dz = np.zeros_like(z)
    dG = np.zeros_like(G)
    for n in range(N):
        for p in range(P):
            for o in range(O):
                for t in range(T):
                    for i in range(V):
                        g = dout[n, o, t, i]
                        for j in range(V):
                            dz[n, p, o, t, j] += g * G[p, i, j]
                            dG[p, i, j] += g * z[n, p, o, t, j]
    return dz, dG


# ---------------------------------------------------------------- numpy path


def _tap_view(xp, a, b, To, Vo, stride):
    return xp[:, :, a : a + stride * (To - 1) + 1 : stride, b : b + Vo]


def _im2col(x, Kt, Kv, stride, pad):
    """Stack every (time, joint) tap: result is (C*Kt*Kv, N*To*Vo)."""
    N, C, T, V = x.shape
    To = conv_out_len(T, Kt, stride, pad)
    Vo = V - Kv + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((C, Kt, Kv, N, To, Vo), dtype=x.dtype)
    for a in range(Kt):
        for b in range(Kv):
            cols[:, a, b] = _tap_view(xp, a, b, To, Vo, stride).transpose(1, 0, 2, 3)
    return cols.reshape(C * Kt * Kv, N * To * Vo), To, Vo


def _conv_fwd_np(x, w, stride, pad):
    N = x.shape[0]
    O = w.shape[0]
    cols, To, Vo = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    out = w.reshape(O, -1) @ cols
    return np.ascontiguousarray(out.reshape(O, N, To, Vo).transpose(1, 0, 2, 3))


def _conv_bwd_np(dout, x, w, stride, pad):
    N, C, T, V = x.shape
    O, _, Kt, Kv = w.shape
    cols, To, Vo = _im2col(x, Kt, Kv, stride, pad)
    gt = dout.transpose(1, 0, 2, 3).reshape(O, N * To * Vo)
    dw = (gt @ cols.T).reshape(w.shape)
    dcols = (w.reshape(O, -1).T @ gt).reshape(C, Kt, Kv, N, To, Vo)
    dxp = np.zeros((N, C, T + 2 * pad, V), dtype=x.dtype)
    for a in range(Kt):
        for b in range(Kv):
            _tap_view(dxp, a, b, To, Vo, stride)[...] += dcols[:, a, b].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad : pad + T] if pad else dxp
    return np.ascontiguousarray(dx), dw


def _mix_fwd_np(z, G):
    out = z[:, 0] @ G[0].T
    for p in range(1, z.shape[1]):
        out += z[:, p] @ G[p].T
    return out


def _mix_bwd_np(dout, z, G):
    V = G.shape[-1]
    dz = np.empty_like(z)
    dG = np.empty_like(G)
    g2 = dout.reshape(-1, V)
    for p in range(z.shape[1]):
        dz[:, p] = dout @ G[p]
        dG[p] = g2.T @ z[:, p].reshape(-1, V)
    return dz, dG


# ---------------------------------------------------------------- dispatch


def conv_forward(x, w, stride=1, pad=0):
    """``out[n,o,t,v] = sum_{c,a,b} x[n,c,t*stride+a-pad,v+b] * w[o,c,a,b]``."""
    if _backend == "numba":
        return _conv_fwd_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad)
    return _conv_fwd_np(x, w, stride, pad)


def conv_backward(dout, x, w, stride=1, pad=0):
    """Gradients of :func:`conv_forward` with respect to ``x`` and ``w``."""
    if _backend == "numba":
        return _conv_bwd_nb(
            np.ascontiguousarray(dout), np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad
        )
    return _conv_bwd_np(dout, x, w, stride, pad)


def mix_forward(z, G):
    """Graph mixing summed over partitions: ``out[n,o,t,i] = sum_{p,j} G[p,i,j] z[n,p,o,t,j]``."""
    if _backend == "numba":
        return _mix_fwd_nb(np.ascontiguousarray(z), np.ascontiguousarray(G))
    return _mix_fwd_np(z, G)


def mix_backward(dout, z, G):
    if _backend == "numba":
        return _mix_bwd_nb(np.ascontiguousarray(dout), np.ascontiguousarray(z), np.ascontiguousarray(G))
    return _mix_bwd_np(dout, z, G)
