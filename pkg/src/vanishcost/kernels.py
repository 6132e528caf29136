"""Hot inner loops for one-dimensional time marching.

Each kernel has a compiled path (numba) and a numpy/scipy path with the
same signature; :data:`BACKEND` tells which one is active.  Band layout
for an ``n x n`` tridiagonal operator ``L``::

    lo[i] = L[i, i-1]   (lo[0] ignored)
    di[i] = L[i, i]
    up[i] = L[i, i+1]   (up[n-1] ignored)

Bands carry a leading step axis of length 1 (time-independent operator)
or ``S`` (one operator per step).
"""

import numpy as np
from scipy.linalg import solve_banded

from ._accel import HAVE_NUMBA, njit

BACKEND = "numba" if HAVE_NUMBA else "numpy"


@njit
def _march_tridiag_nb(lo, di, up, theta, dt, y0, src, has_src, out):
    n, k = y0.shape
    n_steps = out.shape[0] - 1
    n_ops = di.shape[0]
    a = 1.0 - theta
    rhs = np.empty(n)
    cp = np.empty(n)
    dp = np.empty(n)
    for i in range(n):
        for j in range(k):
            out[0, i, j] = y0[i, j]
    for s in range(n_steps):
        op = s if n_ops > 1 else 0
        for j in range(k):
            # explicit half: y + (1-theta) dt L y
            for i in range(n):
                y = out[s, i, j]
                if has_src:
                    y += src[s, i, j]
                rhs[i] = y
            for i in range(n):
                acc = di[op, i] * rhs[i]
                if i > 0:
                    acc += lo[op, i] * rhs[i - 1]
                if i < n - 1:
                    acc += up[op, i] * rhs[i + 1]
                dp[i] = rhs[i] + a * dt * acc
            # implicit half: (I - theta dt L) y_new = dp, Thomas sweep
            b0 = 1.0 - theta * dt * di[op, 0]
            c0 = -theta * dt * up[op, 0] if n > 1 else 0.0
            cp[0] = c0 / b0
            dp[0] = dp[0] / b0
            for i in range(1, n):
                ai = -theta * dt * lo[op, i]
                bi = 1.0 - theta * dt * di[op, i]
                ci = -theta * dt * up[op, i] if i < n - 1 else 0.0
                m = bi - ai * cp[i - 1]
                cp[i] = ci / m
                dp[i] = (dp[i] - ai * dp[i - 1]) / m
            out[s + 1, n - 1, j] = dp[n - 1]
            for i in range(n - 2, -1, -1):
                dp[i] = dp[i] - cp[i] * dp[i + 1]
                out[s + 1, i, j] = dp[i]
    if has_src:
        for i in range(n):
            for j in range(k):
                out[n_steps, i, j] += src[n_steps, i, j]
    return out


def _march_tridiag_np(lo, di, up, theta, dt, y0, src, has_src, out):
    n = y0.shape[0]
    n_steps = out.shape[0] - 1
    n_ops = di.shape[0]
    a = 1.0 - theta
    out[0] = y0
    ab = np.empty((3, n))
    cached = -1
    for s in range(n_steps):
        op = s if n_ops > 1 else 0
        y = out[s] + src[s] if has_src else out[s]
        Ly = di[op][:, None] * y
        Ly[1:] += lo[op, 1:, None] * y[:-1]
        Ly[:-1] += up[op, :-1, None] * y[1:]
        rhs = y + a * dt * Ly
        if op != cached:
            ab[0, 1:] = -theta * dt * up[op, :-1]
            ab[0, 0] = 0.0
            ab[1] = 1.0 - theta * dt * di[op]
            ab[2, :-1] = -theta * dt * lo[op, 1:]
            ab[2, -1] = 0.0
            cached = op
        out[s + 1] = solve_banded((1, 1), ab, rhs, check_finite=False)
    if has_src:
        out[n_steps] += src[n_steps]
    return out


def march_tridiag(lo, di, up, theta, dt, y0, n_steps, src=None):
    """Run ``n_steps`` theta-scheme steps ``(I - th dt L) y' = (I + (1-th) dt L)(y + src)``.

    ``y0`` is ``(n,)`` or ``(n, k)``.  ``src`` (same trailing shape, leading
    length ``n_steps + 1``) is added to the state before each step and once
    more after the last step.  Returns the ``(n_steps + 1, n[, k])`` history.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    squeeze = y0.ndim == 1
    Y0 = y0[:, None] if squeeze else y0
    Y0 = np.ascontiguousarray(Y0)
    n, k = Y0.shape
    lo = np.ascontiguousarray(np.atleast_2d(lo), dtype=np.float64)
    di = np.ascontiguousarray(np.atleast_2d(di), dtype=np.float64)
    up = np.ascontiguousarray(np.atleast_2d(up), dtype=np.float64)
    if di.shape[1] != n:
        raise ValueError(f"band length {di.shape[1]} does not match state size {n}")
    if di.shape[0] not in (1, n_steps):
        raise ValueError("bands need a step axis of length 1 or n_steps")
    if src is None:
        S = np.zeros((1, n, k))
        has_src = False
    else:
        S = np.asarray(src, dtype=np.float64)
        S = S[:, :, None] if squeeze else S
        S = np.ascontiguousarray(S)
        if S.shape != (n_steps + 1, n, k):
            raise ValueError(f"source shape {S.shape} != {(n_steps + 1, n, k)}")
        has_src = True
    out = np.empty((n_steps + 1, n, k))
    kernel = _march_tridiag_nb if HAVE_NUMBA else _march_tridiag_np
    kernel(lo, di, up, float(theta), float(dt), Y0, S, has_src, out)
    return out[:, :, 0] if squeeze else out
