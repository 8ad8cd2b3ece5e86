"""Synthetic spatial panels and the Monte-Carlo harness for size, FDR/TPR,
Jaccard and ATE-error tables.

Randomness for replication ``rep`` comes from
``SeedSequence(seed, spawn_key=(rep, component))`` so every replication is
reproducible on its own, identical across the ``delta`` sweep (common
random numbers) and independent of execution order.
"""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

import numpy as np

from .detection import (birs_detect, jaccard, mean_field_ate, post_detection_ate,
                        stepdown_detect)
from .estimation import DEFAULT_A, FitConfig, fit_profiling, select_lambda_cv, estimate_noise_levels
from .exceptions import InvalidInput
from .inference import bootstrap_null_ensemble, global_test
from .numerics import cholesky, svd, truncated_normal_sample
from .panel import CoefficientSet, GridShape, PanelData, neighbor_order

logger = logging.getLogger(__name__)

# Location/scale of synthetic state covariates, in the units of 2 m air
# temperature (deg C), surface pressure (kPa), specific humidity (g/kg)
# and 10 m wind speed (m/s).
METEO_MEANS = (12.0, 100.0, 7.0, 2.5)
METEO_SDS = (10.0, 1.0, 4.0, 1.0)

METRIC_COLUMNS = ["design", "R", "C", "n", "delta", "method", "size", "fdr", "tpr", "jaccard",
                  "ate_rmse_post", "ate_rmse_meanfield", "reps", "failures"]

_COMPONENTS = {"treatment": 0, "state": 1, "coef": 2, "noise": 3, "boot": 4, "cv": 5}


def _rng(seed, rep, component):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, _COMPONENTS[component])))


@dataclass(frozen=True)
class SimConfig:
    R: int = 8
    C: int = 8
    n: int = 100
    d: int = 4
    design: str = "independent"
    delta: Tuple[float, ...] = (0.0,)
    clusters_max: int = 2
    noise_sd: float = 1.0
    replications: int = 100
    seed: int = 0
    state_source: str = "synthetic"
    state_profile: str = "meteo"
    interference: str = "clusters"
    alpha: float = 0.05
    n_boot: int = 300
    lam: object = "cv_pilot"
    A: float = DEFAULT_A
    tau: float = 1e-4
    methods: Tuple[str, ...] = ("birs", "stepdown")

    def __post_init__(self):
        delta = self.delta
        if np.isscalar(delta):
            delta = (float(delta),)
        object.__setattr__(self, "delta", tuple(float(v) for v in delta))
        object.__setattr__(self, "methods", tuple(self.methods))
        GridShape(self.R, self.C)
        if any(v < 0 for v in self.delta) or not self.delta:
            raise InvalidInput("delta values must be non-negative")
        if self.replications < 1:
            raise InvalidInput("replications must be at least 1")
        if self.design not in ("independent", "correlated"):
            raise InvalidInput(f"unknown design {self.design!r}")
        if self.state_source != "synthetic":
            raise InvalidInput("only synthetic state covariates are supported")
        if self.state_profile not in ("meteo", "standard"):
            raise InvalidInput(f"unknown state profile {self.state_profile!r}")
        if self.interference not in ("clusters", "mean_field"):
            raise InvalidInput(f"unknown interference structure {self.interference!r}")
        if not 0 < self.alpha < 1:
            raise InvalidInput("alpha must lie in (0, 1)")
        if not self.noise_sd > 0:
            raise InvalidInput("noise_sd must be positive")
        if self.n_boot < 1 or self.n < self.d + 3 or self.d < 1:
            raise InvalidInput("need n_boot >= 1, d >= 1 and n > d + 2")
        for m in self.methods:
            if m not in ("birs", "stepdown"):
                raise InvalidInput(f"unknown detection method {m!r}")
        if not (self.lam in ("cv", "cv_pilot") or (isinstance(self.lam, (int, float)) and self.lam >= 0)):
            raise InvalidInput(f"lam must be 'cv', 'cv_pilot' or a non-negative number, got {self.lam!r}")

    @property
    def shape(self):
        return GridShape(self.R, self.C)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInput(f"unknown SimConfig fields: {sorted(unknown)}")
        doc = dict(doc)
        if "shape" in doc:
            raise InvalidInput("give the grid as R and C")
        for key in ("delta", "methods"):
            if key in doc and isinstance(doc[key], list):
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self):
        out = asdict(self)
        out["delta"] = list(self.delta)
        out["methods"] = list(self.methods)
        return out


@dataclass
class GroundTruth:
    coeffs: CoefficientSet
    J1: np.ndarray
    true_ate: float
    F: np.ndarray = field(default=None)

    def support_by_unit(self):
        shape = self.coeffs.shape
        out = [[] for _ in range(shape.P)]
        for k in self.J1:
            u, j = divmod(int(k), shape.P - 1)
            out[u].append(j)
        return out


def gen_treatments_independent(shape, n, rng):
    """I.i.d. fair +-1 assignments, shape (n, R, C)."""
    return np.where(rng.random((n, shape.R, shape.C)) < 0.5, -1.0, 1.0)


def treatment_covariance(shape, rho=0.5):
    idx = np.arange(shape.P)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def gen_treatments_correlated(shape, n, rng, rho=0.5):
    """Signs of ``N(0, Sigma)`` draws with ``Sigma_jk = rho^|j-k|`` over row-major unit order."""
    G = cholesky(treatment_covariance(shape, rho))
    Z = rng.standard_normal((n, shape.P)) @ G.T
    return np.where(Z >= 0, 1.0, -1.0).reshape(n, shape.R, shape.C)


def gen_states(shape, n, d, rng, profile="meteo"):
    if profile == "standard":
        return rng.standard_normal((n, shape.R, shape.C, d))
    means = np.resize(np.array(METEO_MEANS), d)
    sds = np.resize(np.array(METEO_SDS), d)
    return means + sds * rng.standard_normal((n, shape.R, shape.C, d))


def interference_sets(shape, rng, clusters_max=2, structure="clusters", order=None):
    """0-based neighbour ranks forming each unit's true interference set.

    ``clusters``: each unit picks 0..clusters_max distance classes uniformly
    (without replacement) and every unit at those distances interferes.
    ``mean_field``: the edge-sharing neighbours.
    """
    order = order or neighbor_order(shape)
    out = []
    for u in range(shape.P):
        d2 = order.squared_distances(u)
        if structure == "mean_field":
            out.append(np.flatnonzero(d2 == 1))
            continue
        values = np.unique(d2)
        k = int(rng.integers(0, clusters_max + 1))
        chosen = rng.choice(values, size=min(k, values.size), replace=False)
        out.append(np.flatnonzero(np.isin(d2, chosen)))
    return out


def gen_coefficients(shape, X, delta, rng, clusters_max=2, interference="clusters", rank=4, order=None):
    """Draw ``beta``, build the rank-``rank`` direct-effect matrix from the
    mean state effect ``F`` and place truncated-normal interference."""
    if min(shape.R, shape.C) < rank:
        raise InvalidInput(f"a rank-{rank} direct effect needs min(R, C) >= {rank}")
    if delta < 0:
        raise InvalidInput("delta must be non-negative")
    order = order or neighbor_order(shape)
    n, d = X.shape[0], X.shape[3]
    beta = rng.standard_normal((shape.R, shape.C, d))
    F = np.einsum("irck,rck->rc", X, beta) / n
    U, s, V = svd(F)
    s = s.copy()
    s[rank:] = 0.0
    L = 0.01 * (U * s) @ V.T

    S = np.zeros((shape.P, shape.P - 1))
    sets = interference_sets(shape, rng, clusters_max, interference, order)
    absF = np.abs(F).ravel()
    for u, ranks in enumerate(sets):
        if ranks.size:
            # always drawn so the delta sweep shares random numbers
            vals = truncated_normal_sample(0.0, np.inf, absF[u], 1.0, rng, size=ranks.size)
            S[u, ranks] = delta * vals
    S = S.reshape(shape.R, shape.C, shape.P - 1)
    coeffs = CoefficientSet(beta, L, S)
    J1 = coeffs.support()
    true_ate = float(np.mean(L + S.sum(axis=2)))
    return GroundTruth(coeffs, J1, true_ate, F)


def gen_outcomes(truth, M, X, noise_sd, rng, order=None):
    """``Y = X beta + M L + M_-rc S + eps`` with ``eps ~ N(0, noise_sd^2)``."""
    from .solvers import fitted_values

    M = np.asarray(M, dtype=float)
    X = np.asarray(X, dtype=float)
    if M.shape[1:] != truth.coeffs.L.shape or X.shape[:3] != M.shape:
        raise InvalidInput("treatment/state shapes do not match the ground truth")
    if X.shape[3] != truth.coeffs.beta.shape[2]:
        raise InvalidInput("state dimension does not match beta")
    skeleton = PanelData(np.zeros(M.shape), X, M)
    mean = fitted_values(skeleton, truth.coeffs, order)
    eps = noise_sd * rng.standard_normal(M.shape) if noise_sd > 0 else 0.0
    return PanelData(mean + eps, X, M)


def generate(cfg, rep, delta, order=None):
    """The (data, truth) pair of replication ``rep`` at strength ``delta``."""
    shape = cfg.shape
    order = order or neighbor_order(shape)
    rng_t = _rng(cfg.seed, rep, "treatment")
    if cfg.design == "independent":
        M = gen_treatments_independent(shape, cfg.n, rng_t)
    else:
        M = gen_treatments_correlated(shape, cfg.n, rng_t)
    X = gen_states(shape, cfg.n, cfg.d, _rng(cfg.seed, rep, "state"), cfg.state_profile)
    truth = gen_coefficients(shape, X, delta, _rng(cfg.seed, rep, "coef"), cfg.clusters_max,
                             cfg.interference, order=order)
    data = gen_outcomes(truth, M, X, cfg.noise_sd, _rng(cfg.seed, rep, "noise"), order)
    return data, truth


def detection_rates(detected, truth_set):
    detected, truth_set = set(map(int, detected)), set(map(int, truth_set))
    fdr = len(detected - truth_set) / max(len(detected), 1)
    tpr = len(detected & truth_set) / max(len(truth_set), 1)
    return fdr, tpr


def pilot_lambda(cfg, delta, order=None):
    """Cross-validated nuclear level from replication 0, reused across replications."""
    data, _ = generate(cfg, 0, delta, order)
    fcfg = FitConfig(lam="cv", A=cfg.A, tau=cfg.tau, seed=cfg.seed)
    return select_lambda_cv(data, fcfg, order=order)


def run_replication(cfg, rep, delta, lam=None, order=None):
    """Fit, test, detect and estimate the ATE on one synthetic panel."""
    order = order or neighbor_order(cfg.shape)
    data, truth = generate(cfg, rep, delta, order)
    fit_lam = cfg.lam if lam is None else lam
    if fit_lam == "cv_pilot":
        fit_lam = "cv"
    fcfg = FitConfig(lam=fit_lam, A=cfg.A, tau=cfg.tau,
                     seed=int(np.random.SeedSequence(cfg.seed, spawn_key=(rep, _COMPONENTS["cv"])).generate_state(1)[0]))
    fit = fit_profiling(data, fcfg, order=order)
    boot_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(rep, _COMPONENTS["boot"])).generate_state(1)[0])
    ens = bootstrap_null_ensemble(data, fit.sigma_hat, fit.lambda_rc_used, cfg.n_boot, boot_seed, order=order)
    test = global_test(fit, ens, cfg.alpha)
    U = np.sqrt(fit.n) * np.abs(fit.S_flat)
    mf = mean_field_ate(data, order)
    out = {
        "rep": rep, "delta": delta, "reject": bool(test.reject), "T_n": test.T_n, "c_B": test.c_B,
        "true_ate": truth.true_ate, "ate_meanfield": mf.value,
        "S_error": float(np.linalg.norm(fit.coeffs.S - truth.coeffs.S)),
        "L_error": float(np.linalg.norm(fit.coeffs.L - truth.coeffs.L)),
        "converged": fit.converged, "outer_iters": fit.outer_iters, "lambda": fit.lambda_used,
        "methods": {},
    }
    for method in cfg.methods:
        detect = birs_detect if method == "birs" else stepdown_detect
        det = detect(U, ens, cfg.alpha, cfg.shape, order=order)
        fdr, tpr = detection_rates(det.rejected, truth.J1)
        try:
            ate = post_detection_ate(data, det, order).value
        except Exception as exc:  # over-detection can exhaust the degrees of freedom
            logger.warning("rep %d: post-detection ATE failed: %s", rep, exc)
            ate = float("nan")
        out["methods"][method] = {
            "fdr": fdr, "tpr": tpr, "jaccard": jaccard(det.rejected, truth.J1),
            "ate_post": ate, "n_detected": int(len(det.rejected)),
        }
    return out


def _relative_rmse(est, truth):
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    ok = np.isfinite(est)
    if not ok.any():
        return float("nan")
    num = math.sqrt(float(np.mean((est[ok] - truth[ok]) ** 2)))
    den = math.sqrt(float(np.mean(truth[ok] ** 2)))
    return num / den if den > 0 else float("nan")


def summarize(cfg, delta, records, failures):
    rows = []
    for method in cfg.methods:
        if records:
            m = [r["methods"][method] for r in records]
            row = {
                "size": float(np.mean([r["reject"] for r in records])),
                "fdr": float(np.mean([x["fdr"] for x in m])),
                "tpr": float(np.mean([x["tpr"] for x in m])),
                "jaccard": float(np.mean([x["jaccard"] for x in m])),
                "ate_rmse_post": _relative_rmse([x["ate_post"] for x in m], [r["true_ate"] for r in records]),
                "ate_rmse_meanfield": _relative_rmse([r["ate_meanfield"] for r in records],
                                                     [r["true_ate"] for r in records]),
            }
        else:
            row = {k: float("nan") for k in ("size", "fdr", "tpr", "jaccard", "ate_rmse_post",
                                             "ate_rmse_meanfield")}
        row.update({"design": cfg.design, "R": cfg.R, "C": cfg.C, "n": cfg.n, "delta": delta,
                    "method": method, "reps": len(records), "failures": failures})
        rows.append(row)
    return rows


def _safe_replication(cfg, rep, delta, lam, order):
    try:
        return run_replication(cfg, rep, delta, lam, order)
    except Exception as exc:
        logger.warning("replication %d (delta=%g) failed: %s", rep, delta, exc)
        return None


def run_monte_carlo(cfg, n_jobs=1, return_records=False):
    """Metrics table (list of row dicts) for every ``(delta, method)`` pair."""
    order = neighbor_order(cfg.shape)
    rows, all_records = [], {}
    for delta in cfg.delta:
        lam = pilot_lambda(cfg, delta, order) if cfg.lam == "cv_pilot" else cfg.lam
        reps = range(cfg.replications)
        if n_jobs == 1:
            results = [_safe_replication(cfg, rep, delta, lam, order) for rep in reps]
        else:
            from joblib import Parallel, delayed
            results = Parallel(n_jobs=n_jobs)(
                delayed(_safe_replication)(cfg, rep, delta, lam, None) for rep in reps)
        records = [r for r in results if r is not None]
        failures = len(results) - len(records)
        rows.extend(summarize(cfg, delta, records, failures))
        all_records[delta] = records
    if return_records:
        return rows, all_records
    return rows


def format_metrics_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k])
                    for k in METRIC_COLUMNS})
    return buf.getvalue()
