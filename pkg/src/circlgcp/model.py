"""Intensity surfaces and the grid Poisson likelihood.

log lambda(s, t, w) = sum_k beta_k g_k(s) + log kappa(t, w) [- sigma2/2 + Z(s, t)]

where the bracketed field terms are present only for the Cox process.
"""

from __future__ import annotations

import math
import dataclasses
from dataclasses import dataclass, replace

import numpy as np

from .covariance import CovarianceParams, ParameterError
from .geomtime import TWO_PI, SpaceTimeGrid
from .gp import NumericalError, WhitenedField

EVENING_START = 4.0 * math.pi / 3.0     # 18:00 on the wrapped clock


@dataclass(frozen=True)
class LandmarkSpec:
    location: tuple[float, float]
    sigma1: float
    sigma2: float
    rho: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ParameterError(f"landmark correlation must lie in (-1, 1), got {self.rho}")
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ParameterError("landmark kernel scales must be positive")

    def with_rho(self, rho: float) -> "LandmarkSpec":
        return replace(self, rho=float(rho))


def landmark_covariate(s, lm: LandmarkSpec):
    """Directional Gaussian kernel ``exp(-q/2)`` with ``q`` the Mahalanobis form."""
    if not -1.0 < lm.rho < 1.0:
        raise ParameterError("|rho| must be < 1")
    s = np.asarray(s, dtype=float)
    x = (s[..., 0] - lm.location[0]) / lm.sigma1
    y = (s[..., 1] - lm.location[1]) / lm.sigma2
    q = (x * x - 2.0 * lm.rho * x * y + y * y) / (1.0 - lm.rho ** 2)
    return np.exp(-0.5 * q)


def landmark_matrix(s, landmarks) -> np.ndarray:
    """``(K, n)`` covariate matrix for locations ``s`` of shape ``(n, 2)``."""
    s = np.asarray(s, dtype=float).reshape(-1, 2)
    if not landmarks:
        return np.zeros((0, len(s)))
    return np.stack([landmark_covariate(s, lm) for lm in landmarks])


def log_lambda0(s, landmarks, beta):
    beta = np.asarray(beta, dtype=float)
    if len(beta) != len(landmarks):
        raise ValueError("one coefficient per landmark")
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape[:-1])
    for b, lm in zip(beta, landmarks):
        out = out + b * landmark_covariate(s, lm)
    return out


@dataclass(frozen=True)
class TemporalParams:
    mu: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))
        if self.mu.shape != self.delta.shape:
            raise ValueError("mu and delta need one entry per weekday class")
        if np.any(self.mu <= 0) or np.any(self.delta < 0):
            raise ParameterError("mu must be > 0 and delta >= 0")


def in_evening(t):
    t = np.asarray(t, dtype=float)
    return (t >= EVENING_START) & (t < TWO_PI)


def kappa(t, w, tp: TemporalParams):
    """Two-level time-of-day scale: ``mu_w`` by day, ``mu_w (1 + delta_w)`` from 18:00 to 02:00."""
    return tp.mu[w] * (1.0 + tp.delta[w] * in_evening(t))


def log_kappa_table(time_centroids, tp: TemporalParams) -> np.ndarray:
    """``(M, W)`` table of log kappa."""
    ev = in_evening(time_centroids)[:, None]
    return np.log(tp.mu)[None, :] + np.log1p(tp.delta[None, :] * ev)


@dataclass
class ModelState:
    beta: np.ndarray
    landmarks: list
    temporal: TemporalParams
    cov: CovarianceParams | None = None
    field: WhitenedField | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def is_cox(self) -> bool:
        return self.field is not None

    @property
    def rho(self) -> np.ndarray:
        return np.array([lm.rho for lm in self.landmarks])


def log_intensity_grid(grid: SpaceTimeGrid, state: ModelState) -> np.ndarray:
    """``(N, M, W)`` array of log intensities at cell centroids."""
    a = log_lambda0(grid.centroids, state.landmarks, state.beta)           # (N,)
    lk = log_kappa_table(grid.time_centroids, state.temporal)               # (M, W)
    out = a[:, None, None] + lk[None, :, :]
    if state.is_cox:
        Z = np.asarray(state.field.z).reshape(grid.n_space, grid.n_time)
        out = out + (Z - 0.5 * state.cov.sigma2)[:, :, None]
    return out


def log_intensity(grid: SpaceTimeGrid, state: ModelState, j: int, w: int) -> float:
    """Log intensity of flat cell ``j = s * M + t`` on weekday class ``w``."""
    s, t = divmod(j, grid.n_time)
    a = log_lambda0(grid.centroids[s], state.landmarks, state.beta)
    out = float(a) + float(np.log(kappa(grid.time_centroids[t], w, state.temporal)))
    if state.is_cox:
        out += float(state.field.z[j]) - 0.5 * state.cov.sigma2
    return out


def poisson_loglik(counts: np.ndarray, log_lam: np.ndarray, volume: np.ndarray) -> float:
    """``sum n log(lambda) - lambda * volume`` over all cells; constants dropped."""
    with np.errstate(over="ignore", invalid="ignore"):
        terms = counts * log_lam - np.exp(log_lam) * volume
    if not np.all(np.isfinite(terms)):
        bad = np.argwhere(~np.isfinite(terms))[0]
        raise NumericalError(f"non-finite likelihood contribution at cell {tuple(int(i) for i in bad)}")
    return float(terms.sum())


def log_likelihood(grid: SpaceTimeGrid, state: ModelState) -> float:
    log_lam = log_intensity_grid(grid, state)
    return poisson_loglik(grid.counts, log_lam, grid.volumes[:, :, None])


class GridLikelihood:
    """Likelihood evaluator reduced to sufficient statistics.

    Because ``kappa`` does not depend on space and ``Z`` does not depend on
    the weekday, the likelihood needs only the weekday-summed counts per
    cell, the space-summed counts per (time, weekday), and
    ``K_t = sum_w kappa(t, w)``.
    """

    def __init__(self, grid: SpaceTimeGrid, flat: bool = False):
        self.grid = grid
        self.flat = flat
        counts = np.asarray(grid.counts, dtype=float)
        self.n_st = counts.sum(axis=2)                  # (N, M)
        self.n_s = self.n_st.sum(axis=1)                # (N,)
        self.n_tw = counts.sum(axis=0)                  # (M, W)
        self.vol = grid.volumes                         # (N, M)
        self.evening = in_evening(grid.time_centroids)  # (M,)
        self.total = float(counts.sum())

    def log_kappa(self, mu, delta) -> np.ndarray:
        return np.log(mu)[None, :] + np.log1p(np.asarray(delta)[None, :] * self.evening[:, None])

    def __call__(self, a, log_k, z=None, sigma2=0.0) -> float:
        """``a``: (N,) log baseline; ``log_k``: (M, W); ``z``: (N, M) or None."""
        if self.flat:
            return 0.0
        K_t = np.exp(log_k).sum(axis=1)
        with np.errstate(over="ignore", invalid="ignore"):
            if z is None:
                eta = np.broadcast_to(a[:, None], self.vol.shape)
                lin = float(a @ self.n_s)
            else:
                eta = z + (a[:, None] - 0.5 * sigma2)
                lin = float(np.vdot(self.n_st, eta))
            val = (lin + float(np.vdot(self.n_tw, log_k))
                   - float(np.vdot(self.vol * K_t[None, :], np.exp(eta))))
        if not np.isfinite(val):
            return -np.inf
        return val
