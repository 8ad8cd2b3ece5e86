"""Locating interference neighbours from the bootstrap ensemble, and ATE
estimation once the neighbour sets are fixed."""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .estimation import SCHEMA_VERSION, check_schema
from .exceptions import InvalidInput, NumericalFailure
from .inference import _check_alpha
from .numerics import empirical_quantile
from .panel import GridShape, neighbor_order, unflatten_index
from .solvers import MAX_CONDITION


@dataclass
class DetectionResult:
    method: str
    rejected: np.ndarray
    shape: Optional[GridShape]
    alpha: float
    rounds: int
    per_unit: Dict[Tuple[int, int], List[int]] = field(default=None)

    def __post_init__(self):
        self.rejected = np.unique(np.asarray(self.rejected, dtype=np.int64))
        if self.rejected.size and self.rejected[0] < 0:
            raise InvalidInput("rejected indices must be non-negative")
        if self.shape is None:
            self.per_unit = {}
            return
        if self.rejected.size and self.rejected[-1] >= self.shape.p:
            raise InvalidInput("rejected indices out of range")
        per_unit = {unit: [] for unit in self.shape.units()}
        for k in self.rejected:
            unit, j = unflatten_index(k, self.shape)
            per_unit[unit].append(j)
        self.per_unit = per_unit

    def ranks0(self, uid):
        """0-based neighbour ranks detected for flat unit ``uid``."""
        lo = uid * (self.shape.P - 1)
        sel = self.rejected[(self.rejected >= lo) & (self.rejected < lo + self.shape.P - 1)]
        return sel - lo

    def to_dict(self, order=None):
        if self.shape is None:
            raise InvalidInput("a detection without a grid shape cannot be serialised")
        order = order or neighbor_order(self.shape)
        units = []
        for (r, c), ranks in self.per_unit.items():
            if not ranks:
                continue
            uid = self.shape.unit_id((r, c))
            nbrs = [list(self.shape.unit_coords(int(order.index[uid, j - 1]))) for j in ranks]
            units.append({"unit": [r, c], "ranks": ranks, "neighbors": nbrs})
        return {
            "schema_version": SCHEMA_VERSION, "kind": "detection", "method": self.method,
            "alpha": self.alpha, "rounds": self.rounds, "R": self.shape.R, "C": self.shape.C,
            "rejected": self.rejected.tolist(), "per_unit": units,
        }

    @classmethod
    def from_dict(cls, doc):
        check_schema(doc, "detection")
        return cls(method=doc["method"], rejected=np.asarray(doc["rejected"], dtype=np.int64),
                   shape=GridShape(doc["R"], doc["C"]), alpha=float(doc["alpha"]),
                   rounds=int(doc["rounds"]))

    def save(self, path, order=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(order), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _validate(U, ensemble, alpha, shape):
    _check_alpha(alpha)
    U = np.asarray(U, dtype=float).ravel()
    if U.size != ensemble.p or (shape is not None and shape.p != ensemble.p):
        grid = "" if shape is None else f", grid {shape.p}"
        raise InvalidInput(f"statistic has {U.size} coordinates, ensemble {ensemble.p}{grid}")
    if np.any(U < 0) or not np.all(np.isfinite(U)):
        raise InvalidInput("magnitudes must be finite and non-negative")
    return U


def _threshold(ensemble, mask, alpha):
    return empirical_quantile(ensemble.subset_max(mask), 1.0 - alpha)


def stepdown_detect(U, ensemble, alpha, shape=None, nonzero_only=False, order=None):
    """Stepdown multiple testing of the individual coordinates of ``U``.

    Each round rejects every surviving ``j`` with ``U_j > c_B(alpha; survivors)``
    and recomputes the threshold on the new survivor set; it stops after a
    round with no rejection.

    ``shape`` attaches the grid so that the result carries per-unit
    neighbour ranks; without it ``U`` is treated as a plain index vector.
    """
    U = _validate(U, ensemble, alpha, shape)
    alive = np.ones(U.size, dtype=bool)
    candidates = U > 0 if nonzero_only else np.ones(U.size, dtype=bool)
    rounds = 0
    while alive.any() and rounds < U.size:
        rounds += 1
        c = _threshold(ensemble, alive, alpha)
        hit = alive & candidates & (U > c)
        if not hit.any():
            break
        alive &= ~hit
    return DetectionResult("stepdown", np.flatnonzero(~alive), shape, float(alpha), rounds)


def birs_detect(U, ensemble, alpha, shape=None, nonzero_only=False, order=None):
    """Binary segmentation with re-search.

    A pass tests the whole index range; if the maximum exceeds the critical
    value the range is halved recursively, every level testing its segments
    against the critical value over the union of that level's segments, and
    surviving singletons are detections. Detected coordinates are then
    removed from ``U`` and from every replicate and the pass repeats until
    the global test accepts.
    """
    U = _validate(U, ensemble, alpha, shape)
    p = U.size
    removed = np.zeros(p, dtype=bool)
    work = U.copy()
    rounds = 0
    while True:
        rounds += 1
        keep = ~removed
        if not keep.any() or work.max() <= _threshold(ensemble, keep, alpha):
            break
        found = []
        segments = [(0, p)]
        while segments:
            candidates = []
            for lo, hi in segments:
                mid = lo + (hi - lo) // 2
                candidates.extend([(lo, mid), (mid, hi)])
            union = np.zeros(p, dtype=bool)
            for lo, hi in candidates:
                union[lo:hi] = True
            # all-zero segments still shape the level threshold, they just cannot exceed it
            tested = [(lo, hi) for lo, hi in candidates if work[lo:hi].max() > 0] if nonzero_only else candidates
            if not tested:
                break
            c = _threshold(ensemble, union & keep, alpha)
            segments = []
            for lo, hi in tested:
                if work[lo:hi].max() > c:
                    if hi - lo == 1:
                        found.append(lo)
                    else:
                        segments.append((lo, hi))
        if not found:
            break
        removed[found] = True
        work[found] = 0.0
    return DetectionResult("birs", np.flatnonzero(removed), shape, float(alpha), rounds)


def jaccard(I1, I2):
    """``|I1 & I2| / |I1 | I2|``, with two empty sets counting as identical."""
    a, b = set(map(int, I1)), set(map(int, I2))
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


@dataclass(frozen=True)
class AteEstimate:
    value: float
    per_unit_contributions: np.ndarray
    detected_sizes: np.ndarray


def ate_with_neighbors(data, ranks_by_unit, order=None):
    """Per-unit OLS of ``Y_rc`` on ``(X_rc, M_rc, M_-rc[ranks])``; the ATE is the
    mean over units of the summed treatment coefficients."""
    shape = data.shape
    order = order or neighbor_order(shape)
    Y, M, X = data.Y_flat, data.M_flat, data.X_units
    contrib = np.empty(shape.P)
    sizes = np.empty(shape.P, dtype=np.int64)
    for u in range(shape.P):
        ranks = np.asarray(ranks_by_unit[u], dtype=np.int64)
        k = data.d + 1 + ranks.size
        if k >= data.n:
            raise InvalidInput(f"unit {shape.unit_coords(u)}: {ranks.size} neighbours leave no "
                               f"residual degrees of freedom with n={data.n}")
        Z = np.column_stack([X[u], M[:, u], M[:, order.index[u, ranks]]])
        s = np.linalg.svd(Z, compute_uv=False)
        if s[-1] == 0 or (s[0] / s[-1]) ** 2 >= MAX_CONDITION:
            raise NumericalFailure(f"unit {shape.unit_coords(u)}: post-detection design is rank deficient")
        coef, *_ = np.linalg.lstsq(Z, Y[:, u], rcond=None)
        contrib[u] = coef[data.d:].sum()
        sizes[u] = ranks.size
    return AteEstimate(float(contrib.mean()), contrib.reshape(shape.R, shape.C),
                       sizes.reshape(shape.R, shape.C))


def post_detection_ate(data, detected, order=None):
    if detected.shape != data.shape:
        raise InvalidInput("detection grid does not match the data")
    ranks = [detected.ranks0(u) for u in range(data.shape.P)]
    return ate_with_neighbors(data, ranks, order)


def mean_field_ate(data, order=None):
    """ATE assuming each unit is interfered with only by its edge-sharing neighbours."""
    order = order or neighbor_order(data.shape)
    ranks = [order.edge_neighbor_ranks(u) for u in range(data.shape.P)]
    return ate_with_neighbors(data, ranks, order)
