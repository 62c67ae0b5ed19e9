"""Covariance kernels on the plane crossed with the circle.

Circular correlations come from completely monotone families restricted to
arc lengths in [0, pi]; both need ``alpha`` in (0, 1] to stay positive
definite on the circle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import linalg

from .geomtime import circular_distance


class ParameterError(ValueError):
    """Kernel parameters outside their valid ranges."""


@dataclass(frozen=True)
class CovarianceParams:
    sigma2: float = 1.0
    phi_s: float = 0.1
    phi_t: float = 1.0
    alpha: float = 1.0
    cauchy_shape: float = 1.0
    gamma: float = 0.0
    d: int = 2

    def __post_init__(self):
        check_params(self)

    def replace(self, **kw) -> "CovarianceParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def check_params(p: CovarianceParams) -> None:
    if not p.sigma2 > 0:
        raise ParameterError(f"sigma2 must be > 0, got {p.sigma2}")
    if not p.phi_s > 0:
        raise ParameterError(f"phi_s must be > 0, got {p.phi_s}")
    if not p.phi_t > 0:
        raise ParameterError(f"phi_t must be > 0, got {p.phi_t}")
    _check_alpha(p.alpha)
    if not p.cauchy_shape > 0:
        raise ParameterError(f"cauchy_shape must be > 0, got {p.cauchy_shape}")
    if not 0.0 <= p.gamma <= 1.0:
        raise ParameterError(f"gamma must lie in [0, 1], got {p.gamma}")
    if p.d != 2:
        raise ParameterError("only d = 2 is supported")


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(
            f"alpha={alpha} outside (0, 1]; the circular kernel is not positive definite")


def _check_lag(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u > math.pi + 1e-12):
        raise ParameterError("circular lag must lie in [0, pi]")
    return u


def ccf_powered_exponential(u, phi_t: float, alpha: float):
    _check_alpha(alpha)
    u = _check_lag(u)
    return np.exp(-(phi_t * u) ** alpha)


def ccf_generalized_cauchy(u, phi_t: float, alpha: float, shape: float):
    """``(1 + (phi_t u)^alpha)^(-shape / alpha)``."""
    _check_alpha(alpha)
    if not shape > 0:
        raise ParameterError("Cauchy shape must be > 0")
    u = _check_lag(u)
    return (1.0 + (phi_t * u) ** alpha) ** (-shape / alpha)


def scf_exponential(h, phi_s: float):
    return np.exp(-phi_s * np.asarray(h, dtype=float))


def phi_for_correlation(max_distance: float, correlation: float = 0.05) -> float:
    """Exponential decay giving ``correlation`` at ``max_distance``."""
    return -math.log(correlation) / max_distance


def cov_separable(h, u, p: CovarianceParams):
    """``sigma2 * exp(-phi_s h) * GC(u)``.

    The Cauchy exponent is ``cauchy_shape * alpha`` so that this kernel is
    exactly the ``gamma = 0`` member of :func:`cov_nonseparable`.
    """
    return (p.sigma2 * scf_exponential(h, p.phi_s)
            * ccf_generalized_cauchy(u, p.phi_t, p.alpha, p.cauchy_shape * p.alpha))


def cov_nonseparable(h, u, p: CovarianceParams):
    """Gneiting-type kernel with circular time; ``gamma`` couples space to time."""
    u = _check_lag(u)
    h = np.asarray(h, dtype=float)
    psi = 1.0 + (p.phi_t * u) ** p.alpha
    return (p.sigma2 * psi ** (-(p.cauchy_shape + p.gamma * p.d / 2.0))
            * np.exp(-p.phi_s * h / psi ** (p.gamma / 2.0)))


def gram(kernel, points) -> np.ndarray:
    """Gram matrix of ``kernel(h, u)`` over points given as rows ``(x, y, t)``."""
    pts = np.asarray(points, dtype=float)
    xy = pts[:, :2]
    h = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    u = circular_distance(pts[:, None, 2], pts[None, :, 2])
    return kernel(h, u)


def check_positive_definite(kernel, points) -> float:
    """Smallest eigenvalue of the Gram matrix over at most 500 points."""
    pts = np.asarray(points, dtype=float)
    if len(pts) > 500:
        raise ValueError("at most 500 points")
    K = gram(kernel, pts)
    return float(linalg.eigvalsh(K, subset_by_index=[0, 0])[0])


def is_positive_definite(kernel, points, sigma2: float, jitter_tol: float = 1e-8) -> bool:
    return check_positive_definite(kernel, points) >= -jitter_tol * sigma2
