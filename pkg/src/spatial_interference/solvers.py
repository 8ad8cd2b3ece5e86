"""Inner solvers of the profiling algorithm.

Lasso objectives throughout use the ``(1/n) ||y - X b||^2 + lam ||b||_1``
scaling, so ``lam`` is compared against ``|(2/n) X_j'(y - X b)|``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import InvalidInput, NonConvergence, NumericalFailure
from .numerics import nuclear_norm, soft_threshold_matrix
from .panel import interference_matrix, neighbor_order

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class LassoConfig:
    lam: float
    tol: float = 1e-7
    max_iter: int = 10_000

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidInput(f"lambda must be non-negative, got {self.lam}")
        if not self.tol > 0:
            raise InvalidInput("tol must be positive")
        if self.max_iter < 1:
            raise InvalidInput("max_iter must be at least 1")


@dataclass(frozen=True)
class FistaState:
    """Iterates and momentum scalars of the accelerated L-update."""

    L_curr: np.ndarray
    L_prev: np.ndarray
    r_curr: float = 1.0
    r_prev: float = 1.0

    @classmethod
    def start(cls, L0):
        L0 = np.array(L0, dtype=float)
        return cls(L0, L0.copy(), 1.0, 1.0)

    @property
    def extrapolated(self):
        return self.L_curr + (self.r_prev - 1.0) / self.r_curr * (self.L_curr - self.L_prev)


def ols(X, y):
    """Least-squares coefficients; refuses designs with cond(X'X) >= 1e12."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise InvalidInput(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[-1] == 0 or (s[0] / s[-1]) ** 2 >= MAX_CONDITION:
        raise NumericalFailure("design is rank deficient or too ill-conditioned for OLS")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def ols_operator(X):
    """``(X'X)^{-1} X'`` for repeated OLS fits against the same design."""
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] == 0 or (s[0] / s[-1]) ** 2 >= MAX_CONDITION:
        raise NumericalFailure("design is rank deficient or too ill-conditioned for OLS")
    return np.linalg.pinv(X)


def lasso_cd(X, y, cfg, warm_start=None, return_info=False):
    """Cyclic coordinate descent for ``(1/n)||y - Xb||^2 + lam ||b||_1``.

    Zero columns are left out and get coefficient 0. On hitting
    ``cfg.max_iter`` a :class:`NonConvergence` carrying the last iterate
    is raised.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise InvalidInput(f"y must have length {n}")
    G = X.T @ X
    c = X.T @ y
    skip = np.diag(G) == 0.0
    b = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    b[skip] = 0.0
    sweeps, ok = _kernels.cd_gram(G, c, float(n), float(cfg.lam), b, skip, cfg.tol, cfg.max_iter)
    if not ok:
        raise NonConvergence(f"lasso did not converge in {cfg.max_iter} sweeps", best=b, n_iter=sweeps)
    if return_info:
        return b, {"sweeps": int(sweeps)}
    return b


def lasso_objective(X, y, b, lam):
    r = y - X @ b
    return float(r @ r / len(y) + lam * np.abs(b).sum())


def default_rho0(q, n):
    """Universal penalty level ``sqrt(2 log q / n)`` in the half-scaled
    convention, doubled to match the (1/n) lasso scaling used here."""
    return 2.0 * math.sqrt(2.0 * math.log(max(q, 2)) / n)


def scaled_lasso(Z, y, rho0=None, n_unpenalized=0, tol=1e-4, max_iter=200, lasso_tol=1e-7):
    """Joint estimate of lasso coefficients and noise level.

    Alternates ``gamma <- lasso(y ~ Z, lam = sigma * rho0)`` and
    ``sigma <- ||y - Z gamma|| / sqrt(n)`` until the relative change in
    sigma is below ``tol``. The first ``n_unpenalized`` columns of ``Z``
    enter without penalty (they are profiled out by projection).

    Returns ``(gamma, sigma_hat)``.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n, q = Z.shape
    if y.shape != (n,):
        raise InvalidInput(f"y must have length {n}")
    if rho0 is None:
        rho0 = default_rho0(q - n_unpenalized, n)
    k = n_unpenalized
    if k:
        H = ols_operator(Z[:, :k])
        Zu = Z[:, :k]
        y_t = y - Zu @ (H @ y)
        Zp = Z[:, k:] - Zu @ (H @ Z[:, k:])
    else:
        y_t, Zp = y, Z
    G = Zp.T @ Zp
    c = Zp.T @ y_t
    skip = np.diag(G) <= 1e-12 * max(1.0, float(np.max(np.diag(G), initial=0.0)))
    b = np.zeros(q - k)

    sigma = float(np.std(y_t))
    floor = 1e-10 * float(np.sqrt(y_t @ y_t / n))
    if sigma <= floor:
        gamma = np.zeros(q)
        if k:
            gamma[:k] = H @ y
        return gamma, 0.0
    for it in range(max_iter):
        _, ok = _kernels.cd_gram(G, c, float(n), sigma * rho0, b, skip, lasso_tol, 10_000)
        if not ok:
            raise NonConvergence("inner lasso of scaled lasso did not converge", best=b)
        resid = y_t - Zp @ b
        new_sigma = float(np.sqrt(resid @ resid / n))
        if new_sigma <= floor or abs(new_sigma - sigma) < tol * sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    else:
        raise NonConvergence(f"scaled lasso did not reach a fixed point in {max_iter} rounds",
                             best=b, n_iter=max_iter)
    gamma = np.empty(q)
    gamma[k:] = b
    if k:
        gamma[:k] = H @ (y - Z[:, k:] @ b)
    return gamma, sigma


def fista_L_step(state, grad_fn, lam, eta=2.0):
    """One accelerated proximal-gradient step on the direct-effect matrix.

    ``grad_fn(L)`` returns the gradient of the smooth loss at ``L``; the
    step is ``Soft(L~ - grad(L~)/eta, lam/eta)`` at the extrapolated point
    ``L~``, after which the momentum scalar advances by
    ``r <- (1 + sqrt(1 + 4 r^2)) / 2``.
    """
    L_tilde = state.extrapolated
    grad = np.asarray(grad_fn(L_tilde), dtype=float)
    if grad.shape != L_tilde.shape:
        raise InvalidInput(f"gradient shape {grad.shape} does not match L {L_tilde.shape}")
    L_new = soft_threshold_matrix(L_tilde - grad / eta, lam / eta)
    r_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * state.r_curr ** 2))
    return FistaState(L_new, state.L_curr, r_next, state.r_curr)


def direct_effect_gradient(M_flat, Y_tilde_flat, shape):
    """Gradient of ``(1/n) sum ||Y~_rc - M_rc L_rc||^2`` as a function of ``L``."""
    n = M_flat.shape[0]
    MtY = np.einsum("iu,iu->u", M_flat, Y_tilde_flat) / n
    MtM = np.einsum("iu,iu->u", M_flat, M_flat) / n

    def grad(L):
        return (-2.0 * (MtY - MtM * L.ravel())).reshape(shape.R, shape.C)

    return grad


def fitted_values(data, coeffs, order=None):
    """Model mean ``X beta + M L + M_-rc S`` as an (n, R, C) array."""
    shape = data.shape
    order = order or neighbor_order(shape)
    n, P = data.n, shape.P
    xb = np.einsum("upk,uk->pu", data.X_units, coeffs.beta.reshape(P, -1))
    direct = data.M_flat * coeffs.L.ravel()
    interf = data.M_flat @ interference_matrix(coeffs.S, order).T
    return (xb + direct + interf).reshape(n, shape.R, shape.C)


def objective_Q(data, coeffs, lam, lam_rc, order=None):
    """Penalised profiling objective: mean squared residual summed over units
    plus ``lam ||L||_*`` plus ``sum_rc lam_rc ||S_rc||_1``."""
    resid = data.Y - fitted_values(data, coeffs, order)
    lam_rc = np.asarray(lam_rc, dtype=float)
    lam_rc = np.broadcast_to(lam_rc.reshape(coeffs.L.shape) if lam_rc.size == coeffs.L.size else lam_rc,
                             coeffs.L.shape)
    loss = float(np.sum(resid ** 2)) / data.n
    return (loss + lam * nuclear_norm(coeffs.L)
            + float(np.sum(lam_rc * np.abs(coeffs.S).sum(axis=2))))
