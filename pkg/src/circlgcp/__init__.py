"""Log Gaussian Cox and Poisson process models on planar space x circular time."""

from .covariance import CovarianceParams, cov_nonseparable, cov_separable
from .geomtime import EventRecord, Region, SpaceTimeGrid, Weekday, build_grid, project, wrap_time
from .mcmc import CovConfig, MCMCConfig, PosteriorChain, PriorSpec, fit_lgcp, fit_nhpp
from .model import LandmarkSpec, ModelState, TemporalParams

__version__ = "0.1.0"

__all__ = [
    "CovConfig", "CovarianceParams", "EventRecord", "LandmarkSpec", "MCMCConfig", "ModelState",
    "PosteriorChain", "PriorSpec", "Region", "SpaceTimeGrid", "TemporalParams", "Weekday",
    "build_grid", "cov_nonseparable", "cov_separable", "fit_lgcp", "fit_nhpp", "project", "wrap_time",
]
