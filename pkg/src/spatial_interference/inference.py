"""Conditional-bootstrap calibration of the max statistic and the global
test of ``H0: S = 0``."""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import _kernels
from .exceptions import InvalidInput, NumericalFailure
from .numerics import empirical_quantile
from .panel import neighbor_order
from .solvers import ols_operator

ENSEMBLE_MAGIC = b"SPINTBS\x00"
ENSEMBLE_VERSION = 1
_HEADER = struct.Struct("<8sIQQq")


@dataclass(eq=False)
class BootstrapEnsemble:
    """``U[b] = |sqrt(n) vec(S^e_b)|`` for ``N`` null replicates, in flat ``(r, c, j)`` order."""

    U: np.ndarray
    seed: int
    lambda_rc_used: Optional[np.ndarray] = None
    failures: int = 0

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        if U.ndim != 2 or U.shape[0] < 1:
            raise InvalidInput(f"ensemble must be an (N, p) array, got shape {U.shape}")
        if not np.all(np.isfinite(U)) or np.any(U < 0):
            raise InvalidInput("ensemble entries must be finite and non-negative")
        U.setflags(write=False)
        self.U = U

    @property
    def N(self):
        return self.U.shape[0]

    @property
    def p(self):
        return self.U.shape[1]

    @cached_property
    def _sparse(self):
        rows, cols = np.nonzero(self.U)
        return rows, cols, self.U[rows, cols]

    def subset_max(self, mask):
        """Per-replicate ``max_{j in subset} U[b, j]`` (0 for an empty subset).

        ``mask`` is a boolean vector of length ``p``.
        """
        rows, cols, vals = self._sparse
        out = np.zeros(self.N)
        sel = mask[cols]
        np.maximum.at(out, rows[sel], vals[sel])
        return out


@dataclass(frozen=True)
class GlobalTestResult:
    T_n: float
    c_B: float
    alpha: float
    reject: bool

    def to_dict(self):
        from .estimation import SCHEMA_VERSION
        return {"schema_version": SCHEMA_VERSION, "kind": "global_test", "T_n": self.T_n,
                "c_B": self.c_B, "alpha": self.alpha, "reject": self.reject}


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise InvalidInput(f"alpha must lie in (0, 1), got {alpha}")


def replicate_rng(seed, b):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def _null_designs(data, order):
    """Per-unit ``W_u = M_-u' (I - P_X)``, Gram ``M_-u' M_-u`` and constant-column mask."""
    shape, n = data.shape, data.n
    M = data.M_flat
    X = data.X_units
    nbr = M[:, order.index].transpose(1, 0, 2)                # (P, n, p)
    W = np.empty((shape.P, shape.P - 1, n))
    for u in range(shape.P):
        try:
            H = ols_operator(X[u])
        except NumericalFailure as exc:
            raise NumericalFailure(f"state design of unit {shape.unit_coords(u)} is rank deficient") from exc
        Mu = nbr[u]
        W[u] = Mu.T - (Mu.T @ X[u]) @ H
    G = np.ascontiguousarray(np.einsum("uip,uiq->upq", nbr, nbr))
    skip = np.abs(nbr.sum(axis=1)) == n
    return W, G, skip


def bootstrap_null_ensemble(data, sigma_hat, lambda_rc, N=500, seed=0, order=None, n_jobs=1,
                            chunk=64, lasso_tol=1e-7):
    """Null replicates of the interference estimate.

    For replicate ``b`` and unit ``(r, c)``: draw ``e ~ N(0, sigma_hat_rc^2 I_n)``,
    project out the state columns, and lasso the result on ``M_-rc`` with the
    same ``lambda_rc`` as the main fit. Replicate ``b`` draws its noise for all
    units (row-major) from ``SeedSequence(seed, spawn_key=(b,))``.
    """
    if N < 1:
        raise InvalidInput("need at least one bootstrap replicate")
    shape, n = data.shape, data.n
    order = order or neighbor_order(shape)
    sigma = np.asarray(sigma_hat, dtype=float).reshape(shape.P)
    lams = np.ascontiguousarray(np.asarray(lambda_rc, dtype=float).reshape(shape.P))
    if np.any(sigma < 0) or np.any(lams < 0):
        raise InvalidInput("noise and penalty levels must be non-negative")
    W, G, skip = _null_designs(data, order)
    p_unit = shape.P - 1
    U = np.zeros((N, shape.p))

    def run(start):
        stop = min(start + chunk, N)
        E = np.stack([replicate_rng(seed, b).standard_normal((shape.P, n)) for b in range(start, stop)])
        E *= sigma[None, :, None]
        Cs = np.ascontiguousarray(np.einsum("upn,bun->ubp", W, E))
        out = np.zeros((stop - start, shape.P * p_unit))
        fails = _kernels.bootstrap_lasso(G, Cs, float(n), lams, skip, lasso_tol, 10_000, out)
        U[start:stop] = np.sqrt(n) * np.abs(out)
        return fails

    starts = range(0, N, chunk)
    if n_jobs == 1:
        failures = sum(run(s) for s in starts)
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            failures = sum(pool.map(run, starts))
    return BootstrapEnsemble(U, seed=int(seed), lambda_rc_used=lams.reshape(shape.R, shape.C),
                             failures=int(failures))


def critical_value(ensemble, alpha, subset=None):
    """Empirical ``1 - alpha`` quantile of the replicate maxima over ``subset``.

    ``subset`` is an index array or boolean mask over ``[0, p)``; ``None``
    means every coordinate.
    """
    _check_alpha(alpha)
    if subset is None:
        maxima = ensemble.U.max(axis=1)
    else:
        mask = _as_mask(subset, ensemble.p)
        if not mask.any():
            raise InvalidInput("critical value needs a non-empty index subset")
        maxima = ensemble.subset_max(mask)
    return empirical_quantile(maxima, 1.0 - alpha)


def _as_mask(subset, p):
    subset = np.asarray(subset)
    if subset.dtype == bool:
        if subset.shape != (p,):
            raise InvalidInput(f"mask must have length {p}")
        return subset
    idx = subset.astype(np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= p):
        raise InvalidInput(f"subset indices must lie in [0, {p})")
    mask = np.zeros(p, dtype=bool)
    mask[idx] = True
    return mask


def max_statistic(S_flat, n):
    return float(np.sqrt(n) * np.max(np.abs(S_flat), initial=0.0))


def global_test(fit, ensemble, alpha=0.05):
    """Reject ``S = 0`` when ``T_n = ||sqrt(n) S_hat||_inf`` exceeds ``c_B(alpha)``."""
    _check_alpha(alpha)
    S_flat = fit.S_flat
    if S_flat.size != ensemble.p:
        raise InvalidInput(f"fit has {S_flat.size} interference coordinates, ensemble has {ensemble.p}")
    T_n = max_statistic(S_flat, fit.n)
    c_B = critical_value(ensemble, alpha)
    return GlobalTestResult(T_n=T_n, c_B=c_B, alpha=float(alpha), reject=bool(T_n > c_B))


def save_ensemble(ensemble, path):
    """Header ``(magic, version, N, p, seed)`` then ``N * p`` little-endian float64, replicate-major."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ENSEMBLE_MAGIC, ENSEMBLE_VERSION, ensemble.N, ensemble.p, ensemble.seed))
        fh.write(np.ascontiguousarray(ensemble.U, dtype="<f8").tobytes())


def load_ensemble(path, lambda_rc=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InvalidInput(f"{path}: truncated ensemble header")
    magic, version, N, p, seed = _HEADER.unpack_from(raw)
    if magic != ENSEMBLE_MAGIC:
        raise InvalidInput(f"{path}: not a bootstrap ensemble file")
    if version != ENSEMBLE_VERSION:
        raise InvalidInput(f"{path}: unsupported ensemble version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * N * p:
        raise InvalidInput(f"{path}: expected {N}x{p} values, found {len(body) // 8}")
    U = np.frombuffer(body, dtype="<f8").reshape(N, p).astype(float)
    return BootstrapEnsemble(U, seed=seed, lambda_rc_used=lambda_rc)
