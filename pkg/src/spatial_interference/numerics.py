"""Dense linear-algebra primitives and probability utilities."""

import math
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

from .exceptions import InvalidInput, NumericalFailure


class SvdFactors(NamedTuple):
    """Thin SVD ``A = U @ diag(singular_values) @ V.T``."""

    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


def _as_finite_matrix(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise InvalidInput(f"{name} must be a non-empty 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return A


def svd(A):
    """Thin singular value decomposition with non-increasing singular values."""
    A = _as_finite_matrix(A)
    try:
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    return SvdFactors(U, s, Vt.T)


def soft_threshold_matrix(D, delta):
    """Proximal operator of ``delta * ||.||_*``: shrink every singular value by ``delta``.

    Returns the minimiser of ``0.5 * ||X - D||_F^2 + delta * ||X||_*``.
    """
    if not delta >= 0:
        raise InvalidInput(f"threshold must be non-negative, got {delta}")
    U, s, V = svd(D)
    shrunk = np.maximum(s - delta, 0.0)
    keep = shrunk > 0
    if not np.any(keep):
        return np.zeros_like(np.asarray(D, dtype=float))
    return (U[:, keep] * shrunk[keep]) @ V[:, keep].T


def nuclear_norm(A):
    return float(np.sum(svd(A).singular_values))


def cholesky(Sigma):
    """Lower-triangular ``G`` with ``G @ G.T == Sigma``."""
    Sigma = _as_finite_matrix(Sigma, "Sigma")
    if Sigma.shape[0] != Sigma.shape[1]:
        raise NumericalFailure("Sigma must be square")
    if not np.allclose(Sigma, Sigma.T, rtol=1e-12, atol=1e-12 * np.abs(Sigma).max()):
        raise NumericalFailure("Sigma must be symmetric")
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("Sigma is not positive definite") from exc


def empirical_quantile(values, level):
    """The ``ceil(level * N)``-th order statistic of ``values`` (no interpolation)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise InvalidInput("cannot take a quantile of an empty sample")
    if not 0.0 < level < 1.0:
        raise InvalidInput(f"level must lie in (0, 1), got {level}")
    # guard against 0.95 * 100 -> 95.00000000000001
    k = math.ceil(level * values.size - 1e-9)
    k = min(max(k, 1), values.size)
    return float(np.partition(values, k - 1)[k - 1])


def _robert_uniform_better(a, b):
    # uniform proposal on [a, b] beats the exponential one for narrow tail intervals
    return (b - a) < 2.0 * math.sqrt(math.e) / (a + math.sqrt(a * a + 4.0)) * math.exp(
        (a * a - a * math.sqrt(a * a + 4.0)) / 4.0
    )


def _sample_standard(a, b, size, rng):
    """Draw ``size`` standard normals conditioned on ``(a, b)``."""
    out = np.empty(size)
    filled = 0
    mass = ndtr(b) - ndtr(a)

    if mass >= 0.1:
        while filled < size:
            m = max(int(1.2 * (size - filled) / mass) + 8, 16)
            z = rng.standard_normal(m)
            z = z[(z > a) & (z < b)]
            take = min(z.size, size - filled)
            out[filled:filled + take] = z[:take]
            filled += take
        return out

    if a < 0.0 < b:
        # narrow window around the mode: uniform proposal
        while filled < size:
            m = max(2 * (size - filled), 16)
            z = rng.uniform(a, b, m)
            z = z[rng.uniform(size=m) <= np.exp(-0.5 * z * z)]
            take = min(z.size, size - filled)
            out[filled:filled + take] = z[:take]
            filled += take
        return out

    flip = b <= 0.0
    if flip:
        a, b = -b, -a
    if np.isfinite(b) and _robert_uniform_better(a, b):
        while filled < size:
            m = max(2 * (size - filled), 16)
            z = rng.uniform(a, b, m)
            z = z[rng.uniform(size=m) <= np.exp(0.5 * (a * a - z * z))]
            take = min(z.size, size - filled)
            out[filled:filled + take] = z[:take]
            filled += take
    else:
        rate = 0.5 * (a + math.sqrt(a * a + 4.0))
        while filled < size:
            m = max(2 * (size - filled), 16)
            z = a + rng.exponential(1.0 / rate, m)
            ok = (rng.uniform(size=m) <= np.exp(-0.5 * (z - rate) ** 2)) & (z < b)
            z = z[ok]
            take = min(z.size, size - filled)
            out[filled:filled + take] = z[:take]
            filled += take
    return -out if flip else out


def truncated_normal_sample(lo, hi, mu, sigma, rng, size=None):
    """Sample ``N(mu, sigma^2)`` conditioned on the open interval ``(lo, hi)``.

    Plain rejection from the untruncated normal is used when it accepts at
    least 10% of proposals; otherwise exponential-proposal rejection in the
    tail (or a uniform proposal on narrow windows).
    """
    if not lo < hi:
        raise InvalidInput(f"need lo < hi, got ({lo}, {hi})")
    if not sigma > 0:
        raise InvalidInput(f"sigma must be positive, got {sigma}")
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    n = 1 if size is None else int(np.prod(size))
    z = _sample_standard(a, b, n, rng)
    x = mu + sigma * z
    # rounding can land exactly on a finite boundary
    x = np.clip(x, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
    if size is None:
        return float(x[0])
    return x.reshape(size)
