"""scikit-learn style front end over the profiling fit, bootstrap test,
detection and ATE routines."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .detection import birs_detect, mean_field_ate, post_detection_ate, stepdown_detect
from .estimation import DEFAULT_A, FitConfig, fit_profiling
from .exceptions import InvalidInput
from .inference import bootstrap_null_ensemble, global_test
from .panel import PanelData, neighbor_order

_DETECTORS = {"birs": birs_detect, "stepdown": stepdown_detect}


def check_panel(X, y=None, M=None):
    """Validate panel arrays and return them as float arrays.

    ``X`` has shape ``(n, R, C, d)``, ``y`` and ``M`` shape ``(n, R, C)``.
    A 3-d ``X`` is read as a single state covariate.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise InvalidInput(f"X must have shape (n, R, C, d), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("X contains non-finite values")
    out = [X]
    for name, arr in (("y", y), ("M", M)):
        if arr is None:
            out.append(None)
            continue
        arr = np.asarray(arr, dtype=float)
        if arr.shape != X.shape[:3]:
            raise InvalidInput(f"{name} must have shape {X.shape[:3]}, got {arr.shape}")
        out.append(arr)
    return tuple(out)


class SpatialInterferenceModel(RegressorMixin, BaseEstimator):
    """Low-rank direct effects plus sparse interference on an ``R x C`` grid.

    Parameters
    ----------
    lam : float or "cv"
        Nuclear-norm level for the direct-effect matrix.
    A : float
        Multiplier of the per-unit sparse levels, must exceed ``2 sqrt(2)``.
    tau : float
        Stopping tolerance of the profiling loop.
    max_outer_iter : int
    cv_folds : int
    n_boot : int
        Bootstrap replicates used by :meth:`test` and :meth:`detect`.
    alpha : float
    method : {"birs", "stepdown"}
    random_state : int

    Attributes
    ----------
    result_ : FitResult
    coef_ : ndarray (R, C, d)
        State coefficients.
    direct_effect_ : ndarray (R, C)
    interference_ : ndarray (R, C, RC - 1)
    sigma_ : ndarray (R, C)
    lambda_ : float
    """

    def __init__(self, lam="cv", A=DEFAULT_A, tau=1e-4, max_outer_iter=500, cv_folds=5, n_boot=500,
                 alpha=0.05, method="birs", random_state=0):
        self.lam = lam
        self.A = A
        self.tau = tau
        self.max_outer_iter = max_outer_iter
        self.cv_folds = cv_folds
        self.n_boot = n_boot
        self.alpha = alpha
        self.method = method
        self.random_state = random_state

    def _panel(self, X, y, M):
        X, y, M = check_panel(X, y, M)
        if y is None or M is None:
            raise InvalidInput("both outcomes y and treatments M are required")
        return PanelData(y, X, M)

    def fit(self, X, y, M):
        data = self._panel(X, y, M)
        cfg = FitConfig(lam=self.lam, A=self.A, tau=self.tau, max_outer_iter=self.max_outer_iter,
                        cv_folds=self.cv_folds, seed=self.random_state)
        self.order_ = neighbor_order(data.shape)
        self.result_ = fit_profiling(data, cfg, order=self.order_)
        self.data_ = data
        self.coef_ = self.result_.coeffs.beta
        self.direct_effect_ = self.result_.coeffs.L
        self.interference_ = self.result_.coeffs.S
        self.sigma_ = self.result_.sigma_hat
        self.lambda_ = self.result_.lambda_used
        self.n_features_in_ = data.d
        self.ensemble_ = None
        return self

    def predict(self, X, M):
        from .solvers import fitted_values

        check_is_fitted(self, "result_")
        X, _, M = check_panel(X, None, M)
        if M is None:
            raise InvalidInput("treatments M are required")
        if X.shape[1:3] != self.direct_effect_.shape or X.shape[3] != self.n_features_in_:
            raise InvalidInput("panel dimensions do not match the fitted model")
        skeleton = PanelData(np.zeros(M.shape), X, M)
        return fitted_values(skeleton, self.result_.coeffs, self.order_)

    def score(self, X, y, M):
        """Coefficient of determination over all panel cells."""
        y = np.asarray(y, dtype=float)
        resid = y - self.predict(X, M)
        total = y - y.mean(axis=0)
        return 1.0 - float(np.sum(resid ** 2) / np.sum(total ** 2))

    def bootstrap(self):
        check_is_fitted(self, "result_")
        if self.ensemble_ is None:
            self.ensemble_ = bootstrap_null_ensemble(self.data_, self.sigma_, self.result_.lambda_rc_used,
                                                     self.n_boot, self.random_state, order=self.order_)
        return self.ensemble_

    def test(self):
        """Global bootstrap test of "no interference anywhere"."""
        return global_test(self.result_, self.bootstrap(), self.alpha)

    def detect(self):
        if self.method not in _DETECTORS:
            raise InvalidInput(f"unknown detection method {self.method!r}")
        ens = self.bootstrap()
        U = np.sqrt(self.result_.n) * np.abs(self.result_.S_flat)
        return _DETECTORS[self.method](U, ens, self.alpha, self.data_.shape, order=self.order_)

    def ate(self, mean_field=False):
        check_is_fitted(self, "result_")
        if mean_field:
            return mean_field_ate(self.data_, self.order_)
        return post_detection_ate(self.data_, self.detect(), self.order_)
