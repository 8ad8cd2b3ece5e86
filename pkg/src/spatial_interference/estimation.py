"""Two-layer profiling fit of the low-rank plus sparse treatment-effect model."""

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import _kernels
from .exceptions import InvalidInput, NonConvergence, NumericalFailure
from .panel import CoefficientSet, GridShape, interference_matrix, neighbor_order
from .solvers import (FistaState, direct_effect_gradient, fista_L_step, fitted_values,
                      objective_Q, ols_operator, scaled_lasso)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
DEFAULT_A = 2.0 * math.sqrt(3.0)
MIN_A = 2.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class FitConfig:
    """Tuning of the profiling fit.

    ``lam`` is the nuclear-norm level or ``"cv"``; the sparse levels are
    ``A * sigma_hat_rc * sqrt(log(RC) / n)``. ``unpenalized=True`` is a
    debugging escape hatch that zeroes both penalties and skips the
    ``A > 2 sqrt(2)`` check.
    """

    lam: Union[float, str] = "cv"
    A: float = DEFAULT_A
    tau: float = 1e-4
    max_outer_iter: int = 500
    cv_folds: int = 5
    cv_grid_size: int = 20
    seed: int = 0
    unpenalized: bool = False
    lasso_tol: float = 1e-7

    def __post_init__(self):
        if isinstance(self.lam, str):
            if self.lam != "cv":
                raise InvalidInput(f"lam must be a number or 'cv', got {self.lam!r}")
        elif not self.lam >= 0:
            raise InvalidInput(f"lam must be non-negative, got {self.lam}")
        if not self.unpenalized and not self.A > MIN_A:
            raise InvalidInput(f"A must exceed 2*sqrt(2) ~ {MIN_A:.4f}, got {self.A}")
        if not self.tau > 0:
            raise InvalidInput("tau must be positive")
        if self.max_outer_iter < 1:
            raise InvalidInput("max_outer_iter must be at least 1")
        if self.lam == "cv" and self.cv_folds < 2:
            raise InvalidInput("cross-validation needs at least 2 folds")


@dataclass
class FitResult:
    coeffs: CoefficientSet
    sigma_hat: np.ndarray
    lambda_used: float
    lambda_rc_used: np.ndarray
    A: float
    tau: float
    outer_iters: int
    converged: bool
    final_delta: float
    n: int
    objective_trace: List[float] = field(default_factory=list)
    delta_trace: List[float] = field(default_factory=list)
    noise_fallback_units: List[tuple] = field(default_factory=list)

    @property
    def shape(self):
        return self.coeffs.shape

    @property
    def S_flat(self):
        return self.coeffs.S.ravel()

    def to_dict(self):
        R, C = self.coeffs.L.shape
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "fit",
            "R": R, "C": C, "n": self.n, "d": int(self.coeffs.beta.shape[2]),
            "beta": self.coeffs.beta.ravel().tolist(),
            "L": self.coeffs.L.ravel().tolist(),
            "S": self.coeffs.S.ravel().tolist(),
            "sigma_hat": self.sigma_hat.ravel().tolist(),
            "lambda": self.lambda_used,
            "lambda_rc": self.lambda_rc_used.ravel().tolist(),
            "A": self.A,
            "tau": self.tau,
            "outer_iters": self.outer_iters,
            "converged": self.converged,
            "final_delta": self.final_delta,
            "objective_trace": list(self.objective_trace),
            "delta_trace": list(self.delta_trace),
            "noise_fallback_units": [list(u) for u in self.noise_fallback_units],
        }

    @classmethod
    def from_dict(cls, doc):
        check_schema(doc, "fit")
        R, C, d = doc["R"], doc["C"], doc["d"]
        shape = GridShape(R, C)
        coeffs = CoefficientSet(
            np.reshape(doc["beta"], (R, C, d)),
            np.reshape(doc["L"], (R, C)),
            np.reshape(doc["S"], (R, C, shape.P - 1)),
        )
        return cls(
            coeffs=coeffs,
            sigma_hat=np.reshape(np.asarray(doc["sigma_hat"], dtype=float), (R, C)),
            lambda_used=float(doc["lambda"]),
            lambda_rc_used=np.reshape(np.asarray(doc["lambda_rc"], dtype=float), (R, C)),
            A=float(doc["A"]),
            tau=float(doc["tau"]),
            outer_iters=int(doc["outer_iters"]),
            converged=bool(doc["converged"]),
            final_delta=float(doc["final_delta"]),
            n=int(doc["n"]),
            objective_trace=[float(v) for v in doc.get("objective_trace", [])],
            delta_trace=[float(v) for v in doc.get("delta_trace", [])],
            noise_fallback_units=[tuple(u) for u in doc.get("noise_fallback_units", [])],
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def check_schema(doc, kind):
    version = str(doc.get("schema_version", ""))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise InvalidInput(f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    if doc.get("kind") != kind:
        raise InvalidInput(f"expected a {kind!r} document, got {doc.get('kind')!r}")


class _Workspace:
    """Per-unit designs reused across profiling iterations."""

    def __init__(self, data, order=None):
        self.data = data
        self.shape = data.shape
        self.order = order or neighbor_order(self.shape)
        self.n = data.n
        self.Y = data.Y_flat
        self.M = data.M_flat
        self.X = data.X_units                                   # (P, n, d)
        self.nbr = np.ascontiguousarray(self.M[:, self.order.index].transpose(1, 0, 2))  # (P, n, p)
        self.G = np.einsum("uip,uiq->upq", self.nbr, self.nbr)
        H = []
        for u in range(self.shape.P):
            try:
                H.append(ols_operator(self.X[u]))
            except NumericalFailure as exc:
                raise NumericalFailure(f"unit {self.shape.unit_coords(u)}: {exc}") from exc
        self.H = np.stack(H)                                    # (P, d, n)
        # constant +-1 columns cannot be separated from a level shift
        self.skip = np.abs(self.nbr.sum(axis=1)) == self.n
        if self.skip.any():
            bad = sorted({self.shape.unit_coords(u) for u in np.flatnonzero(self.skip.any(axis=1))})
            warnings.warn(f"constant treatment columns excluded from the lasso at units {bad}",
                          RuntimeWarning, stacklevel=3)

    def xbeta(self, beta):
        return np.einsum("uik,uk->iu", self.X, beta)

    def interference(self, S):
        return self.M @ interference_matrix(S, self.order).T

    def ols_beta(self, target):
        return np.einsum("ukn,nu->uk", self.H, target)


def _rel_change(new, old):
    num = float(np.linalg.norm(new - old))
    den = float(np.linalg.norm(old))
    return num / den if den > 0 else num


def sparse_penalty_levels(sigma_hat, A, n, P):
    return A * np.asarray(sigma_hat, dtype=float) * math.sqrt(math.log(P) / n)


def estimate_noise_levels(data, order=None, rho0=None, df_correction=True, return_flags=False):
    """Per-unit noise level by the scaled lasso of ``Y_rc`` on ``(X_rc, M_rc, M_-rc)``.

    State and own-treatment columns enter unpenalised. With ``df_correction``
    the fixed-point value ``||r|| / sqrt(n)`` is rescaled to
    ``||r|| / sqrt(n - d - 1 - s)``, ``s`` being the number of selected
    neighbours; the uncorrected value is biased low by the fitted degrees of
    freedom, which the max statistic's upper tail is sensitive to. Units whose
    scaled lasso fails fall back to the residual SD of OLS on ``(X_rc, M_rc)``.
    """
    shape = data.shape
    if data.n <= data.d + 2:
        raise InvalidInput(f"need n > d + 2 observations, got n={data.n}, d={data.d}")
    order = order or neighbor_order(shape)
    Y, M, X = data.Y_flat, data.M_flat, data.X_units
    sigma = np.empty(shape.P)
    flagged = []
    for u in range(shape.P):
        Z = np.column_stack([X[u], M[:, u], M[:, order.index[u]]])
        try:
            gamma, sigma[u] = scaled_lasso(Z, Y[:, u], rho0=rho0, n_unpenalized=data.d + 1)
            if df_correction:
                dof = data.n - data.d - 1 - int(np.count_nonzero(gamma[data.d + 1:]))
                sigma[u] *= math.sqrt(data.n / max(dof, 1))
        except (NonConvergence, NumericalFailure) as exc:
            coords = shape.unit_coords(u)
            logger.warning("noise level at unit %s: %s; using OLS residual SD", coords, exc)
            flagged.append(coords)
            Z0 = Z[:, :data.d + 1]
            coef, *_ = np.linalg.lstsq(Z0, Y[:, u], rcond=None)
            resid = Y[:, u] - Z0 @ coef
            sigma[u] = float(np.sqrt(resid @ resid / max(data.n - data.d - 1, 1)))
    sigma = sigma.reshape(shape.R, shape.C)
    if return_flags:
        return sigma, flagged
    return sigma


def _profile(ws, lam, lam_rc, tau, max_outer_iter, init=None, lasso_tol=1e-7, trace=True):
    """Run the profiling loop; returns ``(coeffs, iters, converged, delta, obj_trace, delta_trace)``."""
    shape, n, P = ws.shape, ws.n, ws.shape.P
    lam_flat = np.ascontiguousarray(np.broadcast_to(lam_rc, (shape.R, shape.C)).ravel(), dtype=float)
    if init is None:
        beta = ws.ols_beta(ws.Y)
        L = np.zeros((shape.R, shape.C))
        S = np.zeros((P, P - 1))
    else:
        beta = init.beta.reshape(P, -1).copy()
        L = init.L.copy()
        S = init.S.reshape(P, P - 1).copy()

    def coeffs(beta, L, S):
        return CoefficientSet(beta.reshape(shape.R, shape.C, -1), L, S.reshape(shape.R, shape.C, P - 1))

    xb = ws.xbeta(beta)
    interf = ws.interference(S)
    state = FistaState.start(L)
    obj_trace = [objective_Q(ws.data, coeffs(beta, L, S), lam, lam_flat, ws.order)] if trace else []
    delta_trace = []
    delta = 1.0
    converged = False
    it = 0
    for it in range(1, max_outer_iter + 1):
        Y_tilde = ws.Y - xb - interf
        state = fista_L_step(state, direct_effect_gradient(ws.M, Y_tilde, shape), lam, eta=2.0)
        L_new = state.L_curr
        ML = ws.M * L_new.ravel()
        beta_new = ws.ols_beta(ws.Y - ML - interf)
        xb = ws.xbeta(beta_new)
        Y_dot = ws.Y - xb - ML
        c = np.einsum("unp,nu->up", ws.nbr, Y_dot)
        S_new = S.copy()
        _kernels.cd_gram_units(ws.G, c, float(n), lam_flat, S_new, ws.skip, lasso_tol, 10_000)
        interf = ws.interference(S_new)

        delta = _rel_change(beta_new, beta) + _rel_change(L_new, L) + _rel_change(S_new, S)
        beta, L, S = beta_new, L_new, S_new
        delta_trace.append(delta)
        if trace:
            obj_trace.append(objective_Q(ws.data, coeffs(beta, L, S), lam, lam_flat, ws.order))
        if delta < tau:
            converged = True
            break
    return coeffs(beta, L, S), it, converged, delta, obj_trace, delta_trace


def fit_profiling(data, cfg=None, sigma_hat=None, order=None, init=None):
    """Fit ``Y = X beta + M L + M_-rc S + eps`` by two-layer profiling.

    Each outer iteration takes one accelerated nuclear-norm step for ``L``,
    refits ``beta`` by OLS and ``S`` by a per-unit lasso, and stops once the
    summed relative Frobenius changes fall below ``cfg.tau``.
    """
    cfg = cfg or FitConfig()
    order = order or neighbor_order(data.shape)
    shape = data.shape
    ws = _Workspace(data, order)
    flagged = []
    if cfg.unpenalized:
        sigma_hat = np.zeros((shape.R, shape.C)) if sigma_hat is None else sigma_hat
        A = 0.0
    else:
        A = cfg.A
        if sigma_hat is None:
            sigma_hat, flagged = estimate_noise_levels(data, order, return_flags=True)
    sigma_hat = np.asarray(sigma_hat, dtype=float).reshape(shape.R, shape.C)
    lam_rc = sparse_penalty_levels(sigma_hat, A, data.n, shape.P)
    if cfg.unpenalized:
        lam = 0.0
    elif cfg.lam == "cv":
        lam = select_lambda_cv(data, cfg, sigma_hat=sigma_hat, order=order)
    else:
        lam = float(cfg.lam)

    coeffs, iters, converged, delta, obj_trace, delta_trace = _profile(
        ws, lam, lam_rc, cfg.tau, cfg.max_outer_iter, init=init, lasso_tol=cfg.lasso_tol)
    if not converged:
        logger.warning("profiling stopped after %d iterations with delta=%.3g", iters, delta)
    return FitResult(
        coeffs=coeffs, sigma_hat=sigma_hat, lambda_used=float(lam), lambda_rc_used=lam_rc,
        A=float(A), tau=cfg.tau, outer_iters=iters, converged=converged, final_delta=float(delta),
        n=data.n, objective_trace=obj_trace, delta_trace=delta_trace, noise_fallback_units=flagged,
    )


def lambda_max(data, order=None):
    """Smallest nuclear level at which the first L-step returns 0 from the OLS initialiser."""
    ws_H = np.stack([ols_operator(x) for x in data.X_units])
    Y = data.Y_flat
    beta0 = np.einsum("ukn,nu->uk", ws_H, Y)
    resid = Y - np.einsum("uik,uk->iu", data.X_units, beta0)
    grad = -2.0 / data.n * np.einsum("iu,iu->u", data.M_flat, resid)
    return float(np.linalg.norm(grad.reshape(data.shape.R, data.shape.C), 2))


def cv_folds(n, k, seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xC5,)))
    return np.array_split(rng.permutation(n), k)


def select_lambda_cv(data, cfg, sigma_hat=None, order=None, return_path=False):
    """K-fold cross-validation of the nuclear-norm level.

    Candidates are 20 log-spaced points on ``[0.01, 1] * lambda_max``; each
    fold refits along the grid from large to small with warm starts and is
    scored by the mean held-out squared prediction error per unit.
    """
    k = cfg.cv_folds
    if k < 2:
        raise InvalidInput("cross-validation needs at least 2 folds")
    if data.n < k:
        raise InvalidInput(f"cannot split n={data.n} observations into {k} folds")
    order = order or neighbor_order(data.shape)
    shape = data.shape
    if sigma_hat is None:
        sigma_hat = estimate_noise_levels(data, order)
    top = lambda_max(data, order)
    grid = top * np.logspace(0.0, -2.0, cfg.cv_grid_size) if top > 0 else np.zeros(1)
    folds = cv_folds(data.n, k, cfg.seed)
    fold_scores = np.zeros((k, grid.size))
    for f, held in enumerate(folds):
        train_rows = np.setdiff1d(np.arange(data.n), held)
        train = data.subset(train_rows)
        test = data.subset(held)
        ws = _Workspace(train, order)
        lam_rc = sparse_penalty_levels(sigma_hat, cfg.A, train.n, shape.P)
        init = None
        for g, lam in enumerate(grid):
            coeffs, *_ = _profile(ws, lam, lam_rc, cfg.tau, cfg.max_outer_iter, init=init,
                                  lasso_tol=cfg.lasso_tol, trace=False)
            init = coeffs
            resid = test.Y - fitted_values(test, coeffs, order)
            fold_scores[f, g] = float(np.mean(resid ** 2))
    scores = fold_scores.mean(axis=0)
    best = float(grid[int(np.argmin(scores))])
    if return_path:
        return best, {"grid": grid, "scores": scores, "fold_scores": fold_scores}
    return best
