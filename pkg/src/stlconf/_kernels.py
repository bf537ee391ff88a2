"""Windowed min/max reductions over padded signal batches.

Every temporal operator reduces a child robustness trace ``X`` of shape
``(N, L)`` over the window ``[min(t+s_i, n_i-1), min(t+e_i, n_i-1)]`` for each
row ``i`` with valid length ``n_i``. Positions ``t >= n_i`` are padding and are
written as 0.

Two implementations exist for each kernel: numba ``@njit`` loops and a
vectorised numpy path. Set ``STLCONF_NUMBA=0`` to force the numpy path (the
choice is made once at import time).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

USE_NUMBA = numba is not None and os.environ.get("STLCONF_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


# ---------------------------------------------------------------------------
# numpy path


def _window_bounds(lengths, starts, ends, L):
    t = np.arange(L)[None, :]
    last = (lengths - 1)[:, None]
    lo = np.minimum(t + starts[:, None], last)
    hi = np.minimum(t + ends[:, None], last)
    valid_t = t < lengths[:, None]
    return lo, hi, valid_t


def window_hard_np(X, lengths, starts, ends, use_max):
    N, L = X.shape
    lo, hi, valid_t = _window_bounds(lengths, starts, ends, L)
    rows = np.arange(N)[:, None]
    width = int((ends - starts).max()) + 1 if N else 0
    fill = -np.inf if use_max else np.inf
    out = np.full((N, L), fill)
    for j in range(width):
        k = lo + j
        ok = k <= hi
        vals = X[rows, np.minimum(k, L - 1)]
        vals = np.where(ok, vals, fill)
        out = np.maximum(out, vals) if use_max else np.minimum(out, vals)
    return np.where(valid_t, out, 0.0)


def window_soft_np(X, lengths, starts, ends, tau, use_max):
    N, L = X.shape
    sgn = 1.0 if use_max else -1.0
    m = window_hard_np(X, lengths, starts, ends, use_max)
    lo, hi, valid_t = _window_bounds(lengths, starts, ends, L)
    rows = np.arange(N)[:, None]
    width = int((ends - starts).max()) + 1 if N else 0
    acc = np.zeros((N, L))
    for j in range(width):
        k = lo + j
        ok = (k <= hi) & valid_t
        vals = X[rows, np.minimum(k, L - 1)]
        acc += np.exp(np.where(ok, sgn * tau * (vals - m), -np.inf))
    out = m + sgn * np.log(np.where(valid_t, acc, 1.0)) / tau
    return np.where(valid_t, out, 0.0)


def window_soft_grad_np(X, out, adj, lengths, starts, ends, tau, use_max):
    N, L = X.shape
    sgn = 1.0 if use_max else -1.0
    lo, hi, valid_t = _window_bounds(lengths, starts, ends, L)
    rows = np.broadcast_to(np.arange(N)[:, None], (N, L))
    width = int((ends - starts).max()) + 1 if N else 0
    dX = np.zeros((N, L))
    for j in range(width):
        k = lo + j
        ok = (k <= hi) & valid_t
        kk = np.minimum(k, L - 1)
        vals = X[rows, kk]
        w = np.exp(np.where(ok, sgn * tau * (vals - out), -np.inf))
        np.add.at(dX, (rows, kk), adj * w)
    return dX


# ---------------------------------------------------------------------------
# numba path

if numba is not None:

    @numba.njit(cache=True)
    def window_hard_nb(X, lengths, starts, ends, use_max):
        N, L = X.shape
        out = np.zeros((N, L))
        for i in range(N):
            n = lengths[i]
            for t in range(n):
                lo = min(t + starts[i], n - 1)
                hi = min(t + ends[i], n - 1)
                best = X[i, lo]
                for k in range(lo + 1, hi + 1):
                    v = X[i, k]
                    if use_max:
                        if v > best:
                            best = v
                    elif v < best:
                        best = v
                out[i, t] = best
        return out

    @numba.njit(cache=True)
    def window_soft_nb(X, lengths, starts, ends, tau, use_max):
        N, L = X.shape
        sgn = 1.0 if use_max else -1.0
        out = np.zeros((N, L))
        for i in range(N):
            n = lengths[i]
            for t in range(n):
                lo = min(t + starts[i], n - 1)
                hi = min(t + ends[i], n - 1)
                m = X[i, lo]
                for k in range(lo + 1, hi + 1):
                    v = X[i, k]
                    if use_max:
                        if v > m:
                            m = v
                    elif v < m:
                        m = v
                acc = 0.0
                for k in range(lo, hi + 1):
                    acc += np.exp(sgn * tau * (X[i, k] - m))
                out[i, t] = m + sgn * np.log(acc) / tau
        return out

    @numba.njit(cache=True)
    def window_soft_grad_nb(X, out, adj, lengths, starts, ends, tau, use_max):
        N, L = X.shape
        sgn = 1.0 if use_max else -1.0
        dX = np.zeros((N, L))
        for i in range(N):
            n = lengths[i]
            for t in range(n):
                a = adj[i, t]
                if a == 0.0:
                    continue
                lo = min(t + starts[i], n - 1)
                hi = min(t + ends[i], n - 1)
                o = out[i, t]
                for k in range(lo, hi + 1):
                    dX[i, k] += a * np.exp(sgn * tau * (X[i, k] - o))
        return dX


def _prep(X, lengths, starts, ends):
    return (
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(lengths, dtype=np.int64),
        np.ascontiguousarray(starts, dtype=np.int64),
        np.ascontiguousarray(ends, dtype=np.int64),
    )


def window_hard(X, lengths, starts, ends, use_max):
    X, lengths, starts, ends = _prep(X, lengths, starts, ends)
    if USE_NUMBA:
        return window_hard_nb(X, lengths, starts, ends, bool(use_max))
    return window_hard_np(X, lengths, starts, ends, bool(use_max))


def window_soft(X, lengths, starts, ends, tau, use_max):
    X, lengths, starts, ends = _prep(X, lengths, starts, ends)
    if USE_NUMBA:
        return window_soft_nb(X, lengths, starts, ends, float(tau), bool(use_max))
    return window_soft_np(X, lengths, starts, ends, float(tau), bool(use_max))


def window_soft_grad(X, out, adj, lengths, starts, ends, tau, use_max):
    X, lengths, starts, ends = _prep(X, lengths, starts, ends)
    out = np.ascontiguousarray(out, dtype=np.float64)
    adj = np.ascontiguousarray(adj, dtype=np.float64)
    if USE_NUMBA:
        return window_soft_grad_nb(X, out, adj, lengths, starts, ends, float(tau), bool(use_max))
    return window_soft_grad_np(X, out, adj, lengths, starts, ends, float(tau), bool(use_max))


def backend():
    return "numba" if USE_NUMBA else "numpy"
