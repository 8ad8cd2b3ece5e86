"""Compiled coordinate-descent kernels.

All solvers work on the Gram form of the lasso
``(1/n) ||y - X b||^2 + lam * ||b||_1`` with ``G = X'X`` and ``c = X'y``,
so a design shared across many right-hand sides (profiling iterations,
bootstrap replicates) is factored once.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def kkt_violation(G, c, n, lam, b, q, skip):
    scale = 2.0 / n
    worst = 0.0
    for j in range(b.shape[0]):
        if skip[j]:
            continue
        g = scale * (c[j] - q[j])
        if b[j] > 0.0:
            v = abs(g - lam)
        elif b[j] < 0.0:
            v = abs(g + lam)
        else:
            v = abs(g) - lam
        if v > worst:
            worst = v
    return worst


@njit(cache=True, nogil=True)
def cd_gram(G, c, n, lam, b, skip, tol, max_iter):
    """In-place cyclic coordinate descent; returns ``(sweeps, converged)``.

    Stops once the KKT residual ``max_j |(2/n) X_j'(y - Xb) - lam*sign(b_j)|``
    (or its excess over ``lam`` on zero coordinates) drops to ``tol``.
    """
    p = b.shape[0]
    q = G @ b
    scale = 2.0 / n
    if kkt_violation(G, c, n, lam, b, q, skip) <= tol:
        return 0, True
    for sweep in range(1, max_iter + 1):
        moved = False
        for j in range(p):
            if skip[j]:
                continue
            gjj = G[j, j]
            old = b[j]
            rho = scale * (c[j] - q[j] + gjj * old)
            if rho > lam:
                new = (rho - lam) / (scale * gjj)
            elif rho < -lam:
                new = (rho + lam) / (scale * gjj)
            else:
                new = 0.0
            if new != old:
                diff = new - old
                for k in range(p):
                    q[k] += G[k, j] * diff
                b[j] = new
                moved = True
        if not moved:
            return sweep, True
        if kkt_violation(G, c, n, lam, b, q, skip) <= tol:
            return sweep, True
    return max_iter, False


@njit(cache=True, nogil=True)
def cd_gram_units(G, C, n, lams, B, skip, tol, max_iter):
    """Solve one lasso per unit: ``G`` (P, p, p), ``C`` (P, p), ``B`` (P, p) warm start, updated in place."""
    P = B.shape[0]
    sweeps = np.zeros(P, dtype=np.int64)
    ok = np.zeros(P, dtype=np.bool_)
    for u in range(P):
        s, conv = cd_gram(G[u], C[u], n, lams[u], B[u], skip[u], tol, max_iter)
        sweeps[u] = s
        ok[u] = conv
    return sweeps, ok


@njit(cache=True, nogil=True)
def bootstrap_lasso(G, C, n, lams, skip, tol, max_iter, out):
    """Cold-start lasso for every (unit, replicate).

    ``C`` is (P, N, p); ``out`` is (N, P * p) and receives the solutions in
    unit-major order. Returns the number of non-converged solves.
    """
    P = C.shape[0]
    N = C.shape[1]
    p = C.shape[2]
    failures = 0
    b = np.zeros(p)
    scale = 2.0 / n
    for u in range(P):
        lam = lams[u]
        for r in range(N):
            c = C[u, r]
            # all-zero solution is optimal when no coordinate clears the penalty
            zero = True
            for j in range(p):
                if not skip[u, j] and scale * abs(c[j]) > lam:
                    zero = False
                    break
            if zero:
                continue
            b[:] = 0.0
            _, conv = cd_gram(G[u], c, n, lam, b, skip[u], tol, max_iter)
            if not conv:
                failures += 1
            out[r, u * p:(u + 1) * p] = b
    return failures
