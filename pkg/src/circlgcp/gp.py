"""Gaussian field on the grid: covariance factors and whitened transforms.

Vectors over grid cells are ordered with time fastest, so the field value of
spatial cell ``s`` and time cell ``t`` sits at ``s * M + t``. With that
ordering a separable covariance is ``sigma2 * kron(C_s, C_t)`` and

    (L_s kron L_t) nu == vec(L_s @ mat(nu) @ L_t.T)

where ``mat`` reshapes row-major to ``(N, M)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .covariance import CovarianceParams, cov_nonseparable
from .geomtime import pairwise_space_distances, pairwise_time_distances

log = logging.getLogger(__name__)

JITTER = 1e-8
JITTER_STEPS = 4          # 1e-8, 1e-7, 1e-6, 1e-5 (relative to sigma2)


class NumericalError(RuntimeError):
    """Factorization or evaluation failed numerically."""


class FieldGeometry:
    """Precomputed lag matrices for a set of spatial and temporal centroids."""

    def __init__(self, space_xy, time_t):
        self.space_xy = np.asarray(space_xy, dtype=float).reshape(-1, 2)
        self.time_t = np.asarray(time_t, dtype=float).ravel()
        self.h = pairwise_space_distances(self.space_xy)
        self.u = pairwise_time_distances(self.time_t)
        self._h_full = None
        self._u_full = None

    @classmethod
    def from_grid(cls, grid) -> "FieldGeometry":
        return cls(grid.centroids, grid.time_centroids)

    @property
    def n_space(self) -> int:
        return len(self.space_xy)

    @property
    def n_time(self) -> int:
        return len(self.time_t)

    @property
    def max_distance(self) -> float:
        return float(self.h.max()) if self.n_space > 1 else 0.0

    def full_lags(self):
        """Spatial and temporal lags between all N*M cells (time fastest)."""
        if self._h_full is None:
            N, M = self.n_space, self.n_time
            self._h_full = np.repeat(np.repeat(self.h, M, axis=0), M, axis=1)
            self._u_full = np.tile(self.u, (N, N))
        return self._h_full, self._u_full


def _cholesky(C: np.ndarray, scale: float) -> np.ndarray:
    """Cholesky factor, retrying with diagonal jitter only if the plain factorization fails."""
    n = C.shape[0]
    jitters = [0.0] + [JITTER * 10.0 ** k for k in range(JITTER_STEPS)]
    for jitter in jitters:
        try:
            A = C if jitter == 0.0 else C + jitter * scale * np.eye(n)
            L = linalg.cholesky(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if jitter:
            log.debug("Cholesky needed jitter %g", jitter)
        return L
    raise NumericalError(f"Cholesky failed with jitter up to {jitters[-1]:g} x {scale:g}")


def space_correlation(geom: FieldGeometry, p: CovarianceParams) -> np.ndarray:
    return np.exp(-p.phi_s * geom.h)


def time_correlation(geom: FieldGeometry, p: CovarianceParams) -> np.ndarray:
    return (1.0 + (p.phi_t * geom.u) ** p.alpha) ** (-p.cauchy_shape)


def nonseparable_covariance(geom: FieldGeometry, p: CovarianceParams) -> np.ndarray:
    """Dense N*M x N*M covariance, built from the N x N and M x M lag blocks."""
    N, M = geom.n_space, geom.n_time
    psi = 1.0 + (p.phi_t * geom.u) ** p.alpha                     # (M, M)
    amp = p.sigma2 * psi ** (-(p.cauchy_shape + p.gamma * p.d / 2.0))
    rate = p.phi_s * psi ** (-p.gamma / 2.0)
    # C[(i,a),(j,b)] = amp[a,b] * exp(-rate[a,b] * h[i,j])
    C = np.exp(-geom.h[:, None, :, None] * rate[None, :, None, :])
    C *= amp[None, :, None, :]
    return C.reshape(N * M, N * M)


@dataclass(frozen=True)
class CovFactor:
    """Lower Cholesky factor of the field covariance.

    ``kind == "kronecker"``: ``L_s L_s' = C_s`` and ``L_t L_t' = C_t`` are
    correlation matrices and ``sigma`` carries the scale. ``kind == "dense"``:
    ``L L'`` is the full covariance.
    """

    kind: str
    n_space: int
    n_time: int
    sigma: float = 1.0
    L_s: np.ndarray | None = None
    L_t: np.ndarray | None = None
    L: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.n_space * self.n_time

    def transform(self, nu: np.ndarray) -> np.ndarray:
        """Field ``Z = L nu``; ``nu`` may carry leading batch axes."""
        nu = np.asarray(nu, dtype=float)
        if nu.shape[-1] != self.size:
            raise ValueError(f"nu has length {nu.shape[-1]}, expected {self.size}")
        if self.kind == "kronecker":
            V = nu.reshape(nu.shape[:-1] + (self.n_space, self.n_time))
            Z = self.sigma * (self.L_s @ V @ self.L_t.T)
            return Z.reshape(nu.shape)
        return nu @ self.L.T

    def whiten(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`transform` for a single field vector."""
        z = np.asarray(z, dtype=float)
        if self.kind == "kronecker":
            Z = z.reshape(self.n_space, self.n_time) / self.sigma
            V = linalg.solve_triangular(self.L_s, Z, lower=True, check_finite=False)
            V = linalg.solve_triangular(self.L_t, V.T, lower=True, check_finite=False).T
            return V.reshape(-1)
        return linalg.solve_triangular(self.L, z, lower=True, check_finite=False)

    def dense_factor(self) -> np.ndarray:
        if self.kind == "kronecker":
            return self.sigma * np.kron(self.L_s, self.L_t)
        return self.L

    def covariance(self) -> np.ndarray:
        L = self.dense_factor()
        return L @ L.T

    def logdet(self) -> float:
        if self.kind == "kronecker":
            N, M = self.n_space, self.n_time
            ld_s = 2.0 * np.log(np.diag(self.L_s)).sum()
            ld_t = 2.0 * np.log(np.diag(self.L_t)).sum()
            return float(M * ld_s + N * ld_t + N * M * np.log(self.sigma ** 2))
        return float(2.0 * np.log(np.diag(self.L)).sum())


def assemble_factor(geom, p: CovarianceParams, separable: bool) -> CovFactor:
    """Factor the covariance of the field at the grid centroids.

    ``geom`` is a :class:`FieldGeometry` or a grid. The separable path never
    forms the N*M x N*M matrix.
    """
    if not isinstance(geom, FieldGeometry):
        geom = FieldGeometry.from_grid(geom)
    N, M = geom.n_space, geom.n_time
    if N == 0 or M == 0:
        raise ValueError("empty grid")
    if separable:
        L_s = _cholesky(space_correlation(geom, p), 1.0)
        L_t = _cholesky(time_correlation(geom, p), 1.0)
        return CovFactor("kronecker", N, M, sigma=float(np.sqrt(p.sigma2)), L_s=L_s, L_t=L_t)
    L = _cholesky(nonseparable_covariance(geom, p), p.sigma2)
    return CovFactor("dense", N, M, L=L)


def dense_covariance(geom: FieldGeometry, p: CovarianceParams, kernel=cov_nonseparable) -> np.ndarray:
    """Reference Gram matrix built point by point from ``kernel(h, u, p)``."""
    h, u = geom.full_lags()
    return kernel(h, u, p)


@dataclass
class WhitenedField:
    nu: np.ndarray
    z: np.ndarray

    @classmethod
    def from_nu(cls, factor: CovFactor, nu) -> "WhitenedField":
        nu = np.asarray(nu, dtype=float)
        return cls(nu=nu, z=factor.transform(nu))


def sample_prior_field(factor: CovFactor, rng: np.random.Generator) -> WhitenedField:
    nu = rng.standard_normal(factor.size)
    return WhitenedField(nu=nu, z=factor.transform(nu))
