"""Low-rank-plus-jitter multivariate Gaussians.

The covariance is parameterized as ``sigma = factor @ factor.T + jitter * I``
with ``factor`` of shape (dim, rank) and rank typically far below dim. The
jitter keeps the covariance positive definite even when the factor is
rank-deficient, so every log-density is well defined.

Log-densities never materialize the dim x dim covariance: the inverse is
applied through the Woodbury identity and the log-determinant comes from the
matrix determinant lemma, both reduced to a rank x rank Gram matrix

    K = I + factor.T @ factor / jitter

whose Cholesky factor is cached at construction. ``log_density_dense`` is the
deliberately independent reference path (materialize sigma, dense Cholesky)
used by the test suite as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LowRankGaussian:
    """Gaussian with mean ``mu`` and covariance ``factor factor^T + jitter I``.

    Instances are immutable; the derived Gram-matrix workspace is computed
    once in :func:`make` and reused by every density evaluation.
    """

    mu: np.ndarray          # (dim,)
    factor: np.ndarray      # (dim, rank), rank may be 0
    jitter: float
    gram_chol: np.ndarray = field(repr=False, default=None)      # (rank, rank) lower
    logdet_sigma: float = field(repr=False, default=0.0)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def covariance(self) -> np.ndarray:
        """Materialize the dense covariance (small dims / tests only)."""
        return self.factor @ self.factor.T + self.jitter * np.eye(self.dim)


def make(mu, factor, jitter: float) -> LowRankGaussian:
    """Validate inputs and build the distribution plus its cached workspace.

    Raises ``ValueError`` on non-finite entries, ``jitter <= 0`` or
    inconsistent shapes.
    """
    mu = np.asarray(mu, dtype=np.float64)
    factor = np.asarray(factor, dtype=np.float64)
    if mu.ndim != 1:
        raise ValueError(f"mean must be a vector, got shape {mu.shape}")
    if factor.ndim != 2 or factor.shape[0] != mu.shape[0]:
        raise ValueError(
            f"factor shape {factor.shape} incompatible with mean of length {mu.shape[0]}"
        )
    if not np.isfinite(jitter) or jitter <= 0.0:
        raise ValueError(f"jitter must be a positive finite scalar, got {jitter}")
    if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(factor)):
        raise ValueError("mean/factor entries must be finite")

    dim, rank = factor.shape
    gram = np.eye(rank) + (factor.T @ factor) / jitter
    chol = np.linalg.cholesky(gram)
    logdet = dim * np.log(jitter) + 2.0 * np.sum(np.log(np.diag(chol)))
    return LowRankGaussian(mu=mu, factor=factor, jitter=float(jitter),
                           gram_chol=chol, logdet_sigma=float(logdet))


def _solve_gram(g: LowRankGaussian, rhs: np.ndarray) -> np.ndarray:
    """Solve K y = rhs with the cached Cholesky factor. rhs: (..., rank)."""
    if g.rank == 0:
        return rhs
    l = g.gram_chol
    y = np.linalg.solve(l, rhs[..., None] if rhs.ndim == 1 else rhs.T)
    y = np.linalg.solve(l.T, y)
    return y[..., 0] if rhs.ndim == 1 else y.T


def _center(g: LowRankGaussian, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, expected {g.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point entries must be finite")
    return x - g.mu


def mahalanobis_sq(g: LowRankGaussian, x) -> float | np.ndarray:
    """Quadratic form (x - mu)^T sigma^{-1} (x - mu), >= 0.

    Accepts a single point (dim,) or a batch (n, dim); sigma^{-1} is applied
    via Woodbury:  sigma^{-1} z = z/eps - factor K^{-1} factor^T z / eps^2.
    """
    z = _center(g, x)
    eps = g.jitter
    zz = np.sum(z * z, axis=-1)
    if g.rank == 0:
        return zz / eps
    w = z @ g.factor                       # (..., rank)
    y = _solve_gram(g, w)
    quad = zz / eps - np.sum(w * y, axis=-1) / (eps * eps)
    # exact zero at the mean; clip tiny negative round-off
    return np.maximum(quad, 0.0)


def log_density(g: LowRankGaussian, x) -> float | np.ndarray:
    """Gaussian log-density at x, computed without materializing sigma."""
    quad = mahalanobis_sq(g, x)
    return -0.5 * (g.dim * LOG_2PI + g.logdet_sigma + quad)


def log_density_dense(g: LowRankGaussian, x) -> float | np.ndarray:
    """Reference log-density via dense Cholesky of the materialized covariance.

    Test oracle for :func:`log_density`; only sensible for small dims.
    """
    z = _center(g, x)
    sigma = g.covariance()
    chol = np.linalg.cholesky(sigma)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    sol = np.linalg.solve(chol, z[..., None] if z.ndim == 1 else z.T)
    quad = np.sum(sol * sol, axis=0 if z.ndim > 1 else None)
    if z.ndim == 1:
        quad = float(quad)
    return -0.5 * (g.dim * LOG_2PI + logdet + quad)


def push_forward(g: LowRankGaussian, w, jitter: float | None = None) -> LowRankGaussian:
    """Image of the distribution under the linear map w: mean w mu, factor w V.

    The output jitter defaults to the input jitter, keeping the result in the
    same low-rank-plus-jitter family; pass ``jitter`` to override.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != g.dim:
        raise ValueError(f"map shape {w.shape} incompatible with dimension {g.dim}")
    if not np.all(np.isfinite(w)):
        raise ValueError("map entries must be finite")
    return make(w @ g.mu, w @ g.factor, g.jitter if jitter is None else jitter)
