"""Spatial panel containers, the distance-based neighbour ordering and
the flat ``(r, c, j)`` indexing shared by estimation, inference and detection.

Grid coordinates and neighbour ranks are 1-based in every public function
that accepts or returns them; arrays are indexed 0-based, with unit
``(r, c)`` stored at flat position ``(r - 1) * C + (c - 1)``.
"""

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import InvalidInput


@dataclass(frozen=True)
class GridShape:
    R: int
    C: int

    def __post_init__(self):
        if int(self.R) != self.R or int(self.C) != self.C:
            raise InvalidInput("grid dimensions must be integers")
        if self.R < 2 or self.C < 2:
            raise InvalidInput(f"grid must be at least 2x2, got {self.R}x{self.C}")

    @property
    def P(self):
        """Number of units."""
        return self.R * self.C

    @property
    def n_neighbors(self):
        return self.P - 1

    @property
    def p(self):
        """Length of the flattened interference vector."""
        return self.P * (self.P - 1)

    def unit_id(self, unit):
        r, c = unit
        if not (1 <= r <= self.R and 1 <= c <= self.C):
            raise InvalidInput(f"unit {unit} outside {self.R}x{self.C} grid")
        return (r - 1) * self.C + (c - 1)

    def unit_coords(self, uid):
        if not 0 <= uid < self.P:
            raise InvalidInput(f"unit id {uid} out of range")
        return (uid // self.C + 1, uid % self.C + 1)

    def units(self):
        return [(r, c) for r in range(1, self.R + 1) for c in range(1, self.C + 1)]


class NeighborOrder:
    """For every unit, the other units sorted by Euclidean distance.

    Ties are broken row-major (smaller row first, then smaller column).
    ``index[u, j]`` is the flat id of the ``(j + 1)``-th nearest neighbour of
    unit ``u``.
    """

    def __init__(self, shape):
        self.shape = shape
        R, C = shape.R, shape.C
        rows, cols = np.divmod(np.arange(shape.P), C)
        d2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
        index = np.empty((shape.P, shape.P - 1), dtype=np.int64)
        for u in range(shape.P):
            others = np.delete(np.arange(shape.P), u)
            # lexsort: last key is primary; flat id breaks ties row-major
            index[u] = others[np.lexsort((others, d2[u, others]))]
        self.index = index
        self.index.setflags(write=False)
        self._d2 = d2

    def neighbors(self, unit):
        """1-based coordinates of the ordered neighbours of ``unit``."""
        u = self.shape.unit_id(unit)
        return [self.shape.unit_coords(v) for v in self.index[u]]

    def squared_distances(self, uid):
        """Squared distances from flat unit ``uid`` to its ordered neighbours."""
        return self._d2[uid, self.index[uid]]

    @cached_property
    def rank_of(self):
        """``rank_of[u, v]`` is the 0-based rank of unit ``v`` among ``u``'s neighbours (-1 on the diagonal)."""
        P = self.shape.P
        out = np.full((P, P), -1, dtype=np.int64)
        for u in range(P):
            out[u, self.index[u]] = np.arange(P - 1)
        return out

    def edge_neighbor_ranks(self, uid):
        """0-based ranks of the units sharing an edge with ``uid``."""
        d2 = self.squared_distances(uid)
        return np.flatnonzero(d2 == 1)


def neighbor_order(shape):
    return NeighborOrder(shape)


@dataclass(frozen=True, eq=False)
class PanelData:
    """Observed outcomes ``Y`` (n, R, C), states ``X`` (n, R, C, d) and
    treatments ``M`` (n, R, C) with entries in {-1, +1}."""

    Y: np.ndarray
    X: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        Y = np.ascontiguousarray(self.Y, dtype=float)
        X = np.ascontiguousarray(self.X, dtype=float)
        M = np.ascontiguousarray(self.M, dtype=float)
        if Y.ndim != 3:
            raise InvalidInput(f"Y must have shape (n, R, C), got {Y.shape}")
        if X.ndim == 3:
            X = X[..., None]
        if X.ndim != 4 or X.shape[:3] != Y.shape:
            raise InvalidInput(f"X must have shape {Y.shape + ('d',)}, got {X.shape}")
        if M.shape != Y.shape:
            raise InvalidInput(f"M must have shape {Y.shape}, got {M.shape}")
        if X.shape[3] < 1:
            raise InvalidInput("need at least one state variable")
        for name, arr in (("Y", Y), ("X", X), ("M", M)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"{name} contains non-finite values")
        if not np.all(np.abs(M) == 1.0):
            raise InvalidInput("treatments must take values in {-1, +1}")
        GridShape(Y.shape[1], Y.shape[2])
        for name, arr in (("Y", Y), ("X", X), ("M", M)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.X.shape[3]

    @property
    def shape(self):
        return GridShape(self.Y.shape[1], self.Y.shape[2])

    # unit-major flat views
    @property
    def Y_flat(self):
        return self.Y.reshape(self.n, -1)

    @property
    def M_flat(self):
        return self.M.reshape(self.n, -1)

    @property
    def X_units(self):
        """States as (P, n, d)."""
        return self.X.reshape(self.n, -1, self.d).transpose(1, 0, 2)

    def subset(self, rows):
        rows = np.asarray(rows)
        return PanelData(self.Y[rows], self.X[rows], self.M[rows])


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """State effects ``beta`` (R, C, d), direct effects ``L`` (R, C) and
    interference ``S`` (R, C, RC - 1) in neighbour-rank order."""

    beta: np.ndarray
    L: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        L = np.array(self.L, dtype=float)
        S = np.array(self.S, dtype=float)
        if L.ndim != 2:
            raise InvalidInput("L must be an R x C matrix")
        shape = GridShape(*L.shape)
        if beta.ndim != 3 or beta.shape[:2] != L.shape:
            raise InvalidInput(f"beta must have shape {L.shape + ('d',)}")
        if S.shape != L.shape + (shape.P - 1,):
            raise InvalidInput(f"S must have shape {L.shape + (shape.P - 1,)}, got {S.shape}")
        for name, arr in (("beta", beta), ("L", L), ("S", S)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return GridShape(*self.L.shape)

    @classmethod
    def zeros(cls, shape, d):
        return cls(np.zeros((shape.R, shape.C, d)), np.zeros((shape.R, shape.C)),
                   np.zeros((shape.R, shape.C, shape.P - 1)))

    def support(self):
        """Flat indices of the nonzero interference coefficients."""
        return np.flatnonzero(self.S.ravel())


def build_neighbor_design(data, unit, order):
    """``n x (P - 1)`` matrix whose column ``j`` is the treatment series of
    the ``(j + 1)``-th nearest neighbour of ``unit`` (1-based coordinates)."""
    u = data.shape.unit_id(unit)
    return data.M_flat[:, order.index[u]]


def flat_index(unit, j, shape):
    """Position of neighbour rank ``j`` of ``unit`` in ``vec(S)`` (all 1-based inputs, 0-based output)."""
    u = shape.unit_id(unit)
    if not 1 <= j <= shape.P - 1:
        raise InvalidInput(f"neighbour rank {j} outside 1..{shape.P - 1}")
    return u * (shape.P - 1) + (j - 1)


def unflatten_index(k, shape):
    """Inverse of :func:`flat_index`: returns ``((r, c), j)``."""
    if not 0 <= k < shape.p:
        raise InvalidInput(f"flat index {k} outside [0, {shape.p})")
    u, j = divmod(int(k), shape.P - 1)
    return shape.unit_coords(u), j + 1


def interference_matrix(S, order):
    """Scatter ``S`` (P, P - 1) in neighbour order into a (P, P) matrix
    whose row ``u`` multiplies the raw treatment vector of all units."""
    P = order.shape.P
    S = np.asarray(S).reshape(P, P - 1)
    out = np.zeros((P, P))
    out[np.arange(P)[:, None], order.index] = S
    return out


# --------------------------------------------------------------------------
# long-format CSV with a JSON sidecar

def default_meta_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def write_panel_csv(data, csv_path, meta_path=None):
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else default_meta_path(csv_path)
    n, R, C, d = data.X.shape
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["obs", "row", "col", "y"] + [f"x{k + 1}" for k in range(d)] + ["m"])
        for i in range(n):
            for r in range(R):
                for c in range(C):
                    w.writerow([i + 1, r + 1, c + 1, repr(float(data.Y[i, r, c]))]
                               + [repr(float(v)) for v in data.X[i, r, c]]
                               + [int(data.M[i, r, c])])
    meta_path.write_text(json.dumps({"R": R, "C": C, "n": n, "d": d}, indent=2) + "\n")


def read_panel_csv(csv_path, meta_path=None):
    """Load a long-format panel; raises :class:`InvalidInput` naming the bad line."""
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else default_meta_path(csv_path)
    try:
        meta = json.loads(Path(meta_path).read_text())
        R, C, n, d = (int(meta[k]) for k in ("R", "C", "n", "d"))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InvalidInput(f"bad sidecar {meta_path}: {exc}") from exc
    GridShape(R, C)
    Y = np.full((n, R, C), np.nan)
    X = np.full((n, R, C, d), np.nan)
    M = np.full((n, R, C), np.nan)
    expected = ["obs", "row", "col", "y"] + [f"x{k + 1}" for k in range(d)] + ["m"]
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise InvalidInput(f"{csv_path}:1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise InvalidInput(f"{csv_path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                i, r, c = int(row[0]), int(row[1]), int(row[2])
                y = float(row[3])
                x = [float(v) for v in row[4:4 + d]]
                m = float(row[-1])
            except ValueError as exc:
                raise InvalidInput(f"{csv_path}:{lineno}: {exc}") from exc
            if not (1 <= i <= n and 1 <= r <= R and 1 <= c <= C):
                raise InvalidInput(f"{csv_path}:{lineno}: index ({i},{r},{c}) out of range")
            if m not in (-1.0, 1.0):
                raise InvalidInput(f"{csv_path}:{lineno}: treatment must be -1 or 1")
            Y[i - 1, r - 1, c - 1] = y
            X[i - 1, r - 1, c - 1] = x
            M[i - 1, r - 1, c - 1] = m
    if np.isnan(M).any():
        raise InvalidInput(f"{csv_path}: missing (obs, row, col) records")
    return PanelData(Y, X, M)
