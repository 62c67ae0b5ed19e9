"""Posterior sampling for the Poisson and log Gaussian Cox models.

One sweep of the Cox-process sampler is

1. an elliptical slice move on the whitened field ``nu`` (``Z = L_theta nu``),
2. a random-walk Metropolis move on the covariance hyperparameters with
   ``nu`` held fixed, so the Gaussian prior density of ``Z`` is not needed,
3. a second hyperparameter move with ``Z`` held fixed instead, which mixes
   well exactly when the first one does not (many events per cell),
4. scalar random-walk moves for each ``beta_k``, ``mu_w`` and ``delta_w``
   (and ``rho_k`` for the Poisson model),
5. "ridge" moves that shift ``beta_k``, ``log mu`` or ``log(1 + delta)``
   and take the same shift out of the field, leaving the intensity unchanged.

Every random walk runs on an unconstrained scale (log or logit) with the
Jacobian folded into the target, and its step size is tuned by
Robbins-Monro during burn-in only.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .covariance import CovarianceParams
from .gp import FieldGeometry, NumericalError, WhitenedField, assemble_factor
from .model import GridLikelihood, LandmarkSpec, ModelState, TemporalParams, landmark_matrix

log = logging.getLogger(__name__)

TARGET_BLOCK = 0.234
TARGET_SCALAR = 0.44


# --------------------------------------------------------------------------
# priors and transforms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Gamma priors use (shape, rate); the inverse gamma uses (shape, scale)."""

    mu_shape: float = 2.0
    mu_rate: float = 0.05
    delta_shape: float = 2.0
    delta_rate: float = 0.05
    beta_var: float = 100.0
    sigma2_shape: float = 2.0
    sigma2_scale: float = 0.05
    phi_s_max: float = 0.3
    phi_t_max: float = 6.0
    gamma_max: float = 1.0
    rho_max: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conventions"] = "Gamma(shape, rate); InverseGamma(shape, scale)"
        return d

    def bounds(self, name: str) -> tuple[float, float]:
        return {
            "phi_s": (0.0, self.phi_s_max),
            "phi_t": (0.0, self.phi_t_max),
            "gamma": (0.0, self.gamma_max),
            "rho": (-self.rho_max, self.rho_max),
        }.get(name, (0.0, math.inf))

    def log_density(self, name: str, x) -> float:
        """Log prior density (up to constants shared by all values)."""
        x = float(x)
        if name in ("mu", "delta"):
            a = self.mu_shape if name == "mu" else self.delta_shape
            b = self.mu_rate if name == "mu" else self.delta_rate
            if x <= 0:
                return -math.inf
            return (a - 1.0) * math.log(x) - b * x
        if name == "beta":
            return -0.5 * x * x / self.beta_var
        if name == "sigma2":
            if x <= 0:
                return -math.inf
            return -(self.sigma2_shape + 1.0) * math.log(x) - self.sigma2_scale / x
        lo, hi = self.bounds(name)
        if name in ("phi_s", "phi_t", "gamma", "rho"):
            return 0.0 if lo < x < hi else -math.inf
        raise KeyError(name)

    def frozen(self, name: str):
        """scipy.stats distribution of a parameter's prior (used for checks)."""
        from scipy import stats
        if name in ("mu", "delta"):
            a = self.mu_shape if name == "mu" else self.delta_shape
            b = self.mu_rate if name == "mu" else self.delta_rate
            return stats.gamma(a, scale=1.0 / b)
        if name == "beta":
            return stats.norm(0.0, math.sqrt(self.beta_var))
        if name == "sigma2":
            return stats.invgamma(self.sigma2_shape, scale=self.sigma2_scale)
        lo, hi = self.bounds(name)
        return stats.uniform(lo, hi - lo)

    def sample(self, name: str, rng: np.random.Generator, size=None):
        return self.frozen(name).rvs(size=size, random_state=rng)


class Transform:
    """Map between a constrained parameter and the real line."""

    def __init__(self, kind: str, lo: float = 0.0, hi: float = 1.0):
        self.kind, self.lo, self.hi = kind, lo, hi

    @classmethod
    def for_param(cls, name: str, priors: PriorSpec) -> "Transform":
        if name in ("mu", "delta", "sigma2"):
            return cls("log")
        if name == "beta":
            return cls("identity")
        lo, hi = priors.bounds(name)
        return cls("logit", lo, hi)

    def to_real(self, theta: float) -> float:
        if self.kind == "log":
            return math.log(theta)
        if self.kind == "logit":
            return float(special.logit((theta - self.lo) / (self.hi - self.lo)))
        return float(theta)

    def from_real(self, x: float) -> float:
        if self.kind == "log":
            return math.exp(x)
        if self.kind == "logit":
            return self.lo + (self.hi - self.lo) * float(special.expit(x))
        return float(x)

    def log_jacobian(self, x: float) -> float:
        """``log |d theta / d x|``."""
        if self.kind == "log":
            return x
        if self.kind == "logit":
            return math.log(self.hi - self.lo) - math.log1p(math.exp(-abs(x))) * 2.0 - abs(x)
        return 0.0


# --------------------------------------------------------------------------
# proposal tuning
# --------------------------------------------------------------------------

def adapt_proposal(scale: float, accept_rate: float, step: int, target: float = TARGET_BLOCK) -> float:
    """Robbins-Monro step on the log scale with gain ``step ** -0.6``."""
    return float(scale * math.exp(step ** -0.6 * (accept_rate - target)))


class RandomWalkProposal:
    """Gaussian random walk ``x* = x + scale * chol(cov) @ e`` on the real line.

    During adaptation the scale follows :func:`adapt_proposal`; with
    ``adapt_cov`` the shape matrix follows a running covariance estimate
    with the same gain sequence.
    """

    def __init__(self, dim: int, scale: float, target: float | None = None,
                 adapt_cov: bool = False):
        self.dim = dim
        self.scale = float(scale)
        self.target = target if target is not None else (TARGET_SCALAR if dim == 1 else TARGET_BLOCK)
        self.adapt_cov = adapt_cov and dim > 1
        self.cov = np.eye(dim)
        self._chol = np.eye(dim)
        self._mean = None
        self.step = 0
        self.adapting = True
        self.history: list[float] = []

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return x + self.scale * (self._chol @ rng.standard_normal(self.dim))

    def update(self, x: np.ndarray, accept_prob: float) -> None:
        if not self.adapting:
            return
        self.step += 1
        self.scale = adapt_proposal(self.scale, accept_prob, self.step, self.target)
        if self.adapt_cov:
            g = (self.step + 100) ** -0.6
            if self._mean is None:
                self._mean = np.array(x, dtype=float)
            d = x - self._mean
            self._mean = self._mean + g * d
            self.cov = self.cov + g * (np.outer(d, d) - self.cov)
            if self.step % 50 == 0:
                try:
                    self._chol = np.linalg.cholesky(self.cov + 1e-8 * np.eye(self.dim))
                except np.linalg.LinAlgError:
                    pass
        if self.step % 100 == 0:
            self.history.append(self.scale)

    def freeze(self) -> None:
        self.adapting = False


# --------------------------------------------------------------------------
# elementary moves
# --------------------------------------------------------------------------

def ess_update(nu, factor, loglik, rng: np.random.Generator, cur_ll=None, z=None):
    """One elliptical slice move for ``nu ~ N(0, I)`` with field ``Z = factor(nu)``.

    ``loglik`` maps a field vector to a log-likelihood. Returns
    ``(nu', z', loglik', n_evaluations)``; the move never rejects.
    """
    if z is None:
        z = factor.transform(nu)
    if cur_ll is None:
        cur_ll = loglik(z)
    eta = rng.standard_normal(nu.shape)
    z_eta = factor.transform(eta)
    log_y = cur_ll + math.log(rng.uniform())
    omega = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = omega - 2.0 * math.pi, omega
    n_eval = 0
    while True:
        c, s = math.cos(omega), math.sin(omega)
        z_new = z * c + z_eta * s
        ll = loglik(z_new)
        n_eval += 1
        if ll > log_y:
            return nu * c + eta * s, z_new, ll, n_eval
        if omega < 0.0:
            lo = omega
        else:
            hi = omega
        omega = rng.uniform(lo, hi)


@dataclass
class HyperStep:
    cov: CovarianceParams
    factor: object
    z: np.ndarray
    loglik: float
    accepted: bool
    accept_prob: float


def hyper_update(cov: CovarianceParams, nu, names, geom: FieldGeometry, separable: bool,
                 loglik, priors: PriorSpec, proposal: RandomWalkProposal,
                 rng: np.random.Generator, cur_ll: float, factor=None, z=None,
                 propose=None, jacobian: bool = True) -> HyperStep:
    """Metropolis move on covariance hyperparameters with ``nu`` fixed.

    ``loglik(z, sigma2)`` is the data log-likelihood. The proposal is a random
    walk on the transformed scale unless ``propose(cov, rng) -> cov*`` is
    given (then it must be symmetric in the original scale).
    """
    transforms = [Transform.for_param(n, priors) for n in names]
    theta = np.array([getattr(cov, n) for n in names])
    x = np.array([t.to_real(v) for t, v in zip(transforms, theta)])
    if propose is None:
        x_star = proposal.propose(x, rng)
        theta_star = np.array([t.from_real(v) for t, v in zip(transforms, x_star)])
        log_jac = sum(t.log_jacobian(v) for t, v in zip(transforms, x_star)) \
            - sum(t.log_jacobian(v) for t, v in zip(transforms, x))
        if not jacobian:
            log_jac = 0.0
    else:
        cand = propose(cov, rng)
        theta_star = np.array([getattr(cand, n) for n in names])
        x_star = None
        log_jac = 0.0

    def reject(prob=0.0):
        return HyperStep(cov, factor, z, cur_ll, False, prob)

    lp_star = sum(priors.log_density(n, v) for n, v in zip(names, theta_star))
    if not np.isfinite(lp_star):
        return reject()
    lp = sum(priors.log_density(n, v) for n, v in zip(names, theta))
    try:
        cov_star = cov.replace(**{n: float(v) for n, v in zip(names, theta_star)})
        factor_star = assemble_factor(geom, cov_star, separable)
    except (NumericalError, ValueError) as exc:
        warnings.warn(f"hyperparameter proposal rejected: {exc}", RuntimeWarning)
        return reject()
    z_star = factor_star.transform(nu)
    ll_star = loglik(z_star, cov_star.sigma2)
    log_r = ll_star - cur_ll + lp_star - lp + log_jac
    prob = 1.0 if log_r >= 0 else (math.exp(log_r) if np.isfinite(log_r) else 0.0)
    if rng.uniform() < prob:
        return HyperStep(cov_star, factor_star, z_star, ll_star, True, prob)
    return reject(prob)


def field_log_density(factor, z) -> float:
    """Gaussian log density of the field ``z`` under ``factor``, up to a constant."""
    v = factor.whiten(z)
    return -0.5 * factor.logdet() - 0.5 * float(v @ v)


def hyper_update_centered(cov: CovarianceParams, z, names, geom: FieldGeometry, separable: bool,
                          priors: PriorSpec, proposal: RandomWalkProposal, rng: np.random.Generator,
                          cur_ll: float, factor, jacobian: bool = True) -> HyperStep:
    """Metropolis move on covariance hyperparameters with the field ``Z`` fixed.

    The likelihood does not change apart from the ``-sigma2 / 2`` offset,
    which is absorbed by holding ``Z - sigma2 / 2`` fixed instead. The GP
    prior density of the field enters the ratio. Complements
    :func:`hyper_update`, which mixes poorly when the data pin the field down.
    The returned ``z`` is the new field; the caller re-whitens it.
    """
    transforms = [Transform.for_param(n, priors) for n in names]
    theta = np.array([getattr(cov, n) for n in names])
    x = np.array([t.to_real(v) for t, v in zip(transforms, theta)])
    x_star = proposal.propose(x, rng)
    theta_star = np.array([t.from_real(v) for t, v in zip(transforms, x_star)])
    log_jac = 0.0
    if jacobian:
        log_jac = sum(t.log_jacobian(v) for t, v in zip(transforms, x_star)) \
            - sum(t.log_jacobian(v) for t, v in zip(transforms, x))

    def reject(prob=0.0):
        return HyperStep(cov, factor, z, cur_ll, False, prob)

    lp_star = sum(priors.log_density(n, v) for n, v in zip(names, theta_star))
    if not np.isfinite(lp_star):
        return reject()
    lp = sum(priors.log_density(n, v) for n, v in zip(names, theta))
    try:
        cov_star = cov.replace(**{n: float(v) for n, v in zip(names, theta_star)})
        factor_star = assemble_factor(geom, cov_star, separable)
    except (NumericalError, ValueError) as exc:
        warnings.warn(f"hyperparameter proposal rejected: {exc}", RuntimeWarning)
        return reject()
    z_star = z + 0.5 * (cov_star.sigma2 - cov.sigma2)
    log_r = (field_log_density(factor_star, z_star) - field_log_density(factor, z)
             + lp_star - lp + log_jac)
    prob = 1.0 if log_r >= 0 else (math.exp(log_r) if np.isfinite(log_r) else 0.0)
    if rng.uniform() < prob:
        return HyperStep(cov_star, factor_star, z_star, cur_ll, True, prob)
    return reject(prob)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    return acf / acf[0]


def inefficiency_factor(trace, lag_window: int | None = None) -> float:
    """``1 + 2 sum_s rho_s`` of a (thinned) trace.

    Without ``lag_window`` the sum is truncated by Geyer's initial positive
    sequence rule. A constant trace gives NaN.
    """
    x = np.asarray(trace, dtype=float)
    if len(x) < 100:
        raise ValueError("need at least 100 draws")
    if np.ptp(x) == 0:
        warnings.warn("constant trace; inefficiency factor undefined", RuntimeWarning)
        return float("nan")
    rho = autocorrelation(x)
    if lag_window is not None:
        return max(0.0, float(1.0 + 2.0 * rho[1:lag_window + 1].sum()))
    n_pairs = (len(rho) - 1) // 2
    pairs = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs:2]
    stop = np.flatnonzero(pairs <= 0)
    k = stop[0] if len(stop) else n_pairs
    return max(0.0, float(-1.0 + 2.0 * pairs[:k].sum()))


# --------------------------------------------------------------------------
# chains
# --------------------------------------------------------------------------

@dataclass
class MCMCConfig:
    iters: int = 20000
    burn_in: int | None = None
    thin: int = 50
    store_intensity: bool = True
    store_field: bool = False
    flat_likelihood: bool = False
    jacobian: bool = True
    tie_weekdays: bool = False
    fixed: tuple = ()
    init: dict = field(default_factory=dict)

    @property
    def burn(self) -> int:
        return self.iters // 2 if self.burn_in is None else self.burn_in


@dataclass
class CovConfig:
    separable: bool = True
    alpha: float = 1.0
    cauchy_shape: float = 1.0

    @property
    def names(self) -> tuple:
        base = ("sigma2", "phi_s", "phi_t")
        return base if self.separable else base + ("gamma",)


@dataclass
class PosteriorChain:
    variant: str
    params: dict
    loglik: np.ndarray
    acceptance: dict
    adaptation: dict
    landmarks: list
    weekday_totals: np.ndarray
    intensity: np.ndarray | None = None
    nu: np.ndarray | None = None
    cov_fixed: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.params["loglik"])

    def scalar_traces(self) -> dict:
        """Flatten vector parameters into ``name[i]`` traces; add identifiable products."""
        out = {}
        for k, v in self.params.items():
            if k == "loglik":
                continue
            v = np.asarray(v)
            if v.ndim == 1:
                out[k] = v
            else:
                for i in range(v.shape[1]):
                    out[f"{k}[{i}]"] = v[:, i]
        if "sigma2" in self.params:
            out["sigma2*phi_s"] = self.params["sigma2"] * self.params["phi_s"]
            out["sigma2*phi_t"] = self.params["sigma2"] * self.params["phi_t"]
        return out

    def interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        x = self.scalar_traces()[name]
        a = (1.0 - level) / 2.0
        return float(np.quantile(x, a)), float(np.quantile(x, 1.0 - a))

    def mean(self, name: str) -> float:
        return float(np.mean(self.scalar_traces()[name]))

    def rho_plugin(self) -> np.ndarray:
        """Posterior means of the landmark correlations."""
        return np.asarray(self.params["rho"]).mean(axis=0)

    def state(self, i: int, grid=None) -> ModelState:
        """Draw ``i`` as a :class:`ModelState`; the field needs stored ``nu`` and the grid."""
        p = self.params
        lms = [lm.with_rho(r) for lm, r in zip(self.landmarks, np.atleast_1d(p["rho"][i]))] \
            if "rho" in p else list(self.landmarks)
        cov = None
        fld = None
        if "sigma2" in p:
            kw = dict(self.cov_fixed)
            for n in ("sigma2", "phi_s", "phi_t", "gamma"):
                if n in p:
                    kw[n] = float(p[n][i])
            cov = CovarianceParams(**kw)
            if self.nu is not None and grid is not None:
                factor = assemble_factor(grid, cov, self.variant != "lgcp-nonsep")
                fld = WhitenedField.from_nu(factor, self.nu[i])
        mu, delta = np.atleast_1d(p["mu"][i]), np.atleast_1d(p["delta"][i])
        n_w = self.config.get("n_weekdays", len(mu))
        if len(mu) != n_w:
            mu, delta = np.repeat(mu, n_w), np.repeat(delta, n_w)
        return ModelState(beta=np.asarray(p["beta"][i]), landmarks=lms,
                          temporal=TemporalParams(mu, delta), cov=cov, field=fld)

    # ---- persistence ----------------------------------------------------
    def to_jsonl(self, path, extra: dict | None = None) -> None:
        """One header line (config, acceptance, adaptation) then one line per draw."""
        header = {
            "variant": self.variant,
            "config": self.config,
            "acceptance": self.acceptance,
            "adaptation": self.adaptation,
            "cov_fixed": self.cov_fixed,
            "landmarks": [asdict(lm) for lm in self.landmarks],
        }
        if extra:
            header.update(extra)
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
            for i in range(self.n_draws):
                row = {k: np.asarray(v[i]).tolist() for k, v in self.params.items()}
                row["weekday_totals"] = self.weekday_totals[i].tolist()
                row["draw"] = i
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "PosteriorChain":
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        header = lines[0]["header"]
        rows = lines[1:]
        keys = [k for k in rows[0] if k not in ("draw", "weekday_totals")] if rows else []
        params = {k: np.array([r[k] for r in rows]) for k in keys}
        landmarks = [LandmarkSpec(tuple(d["location"]), d["sigma1"], d["sigma2"], d["rho"], d["name"])
                     for d in header["landmarks"]]
        return cls(
            variant=header["variant"], params=params,
            loglik=params.get("loglik", np.array([])),
            acceptance=header["acceptance"], adaptation=header["adaptation"],
            landmarks=landmarks,
            weekday_totals=np.array([r["weekday_totals"] for r in rows]),
            cov_fixed=header.get("cov_fixed", {}), config=header.get("config", {}),
        )


class _Sampler:
    """Mutable sampler state for one chain."""

    def __init__(self, grid, landmarks, priors: PriorSpec, cfg: MCMCConfig,
                 rng: np.random.Generator, cox: bool, cov_config: CovConfig | None,
                 sample_rho: bool):
        self.grid = grid
        self.priors = priors
        self.cfg = cfg
        self.rng = rng
        self.cox = cox
        self.cov_config = cov_config
        self.sample_rho = sample_rho and len(landmarks) > 0 and "rho" not in cfg.fixed
        self.lik = GridLikelihood(grid, flat=cfg.flat_likelihood)
        self.K = len(landmarks)
        self.W = grid.n_weekdays
        self.Wp = 1 if cfg.tie_weekdays else self.W
        self.N, self.M = grid.n_space, grid.n_time
        init = cfg.init

        self.landmarks = list(landmarks)
        self.rho = np.array(init.get("rho", [lm.rho for lm in landmarks]), dtype=float)
        self.landmarks = [lm.with_rho(r) for lm, r in zip(self.landmarks, self.rho)]
        self.G = landmark_matrix(grid.centroids, self.landmarks)               # (K, N)
        self.beta = np.array(init.get("beta", np.zeros(self.K)), dtype=float)
        self.a = self.beta @ self.G if self.K else np.zeros(self.N)

        vol_k = grid.volumes.sum(axis=0) * (1.0 + 0.5 * self.lik.evening)     # (M,)
        n_w = self.lik.n_tw.sum(axis=0)
        mu0 = (n_w + 1.0) / vol_k.sum()
        if cfg.tie_weekdays:
            mu0 = mu0.mean()
        self.mu = np.broadcast_to(np.array(init.get("mu", mu0), dtype=float), (self.Wp,)).copy()
        self.delta = np.broadcast_to(np.array(init.get("delta", 0.5), dtype=float), (self.Wp,)).copy()
        self.log_k = self._log_kappa(self.mu, self.delta)

        if cox:
            self.geom = FieldGeometry.from_grid(grid)
            cinit = init.get("cov", {})
            self.cov = CovarianceParams(
                sigma2=cinit.get("sigma2", 1.0),
                phi_s=cinit.get("phi_s", 0.5 * priors.phi_s_max),
                phi_t=cinit.get("phi_t", 0.5 * priors.phi_t_max),
                alpha=cov_config.alpha, cauchy_shape=cov_config.cauchy_shape,
                gamma=0.0 if cov_config.separable else cinit.get("gamma", 0.5),
            )
            self.names = tuple(n for n in cov_config.names if n not in cfg.fixed)
            self.factor = assemble_factor(self.geom, self.cov, cov_config.separable)
            self.nu = np.array(init.get("nu", np.zeros(self.N * self.M)), dtype=float)
            self.z = self.factor.transform(self.nu).reshape(self.N, self.M)
            self.hyper_prop = RandomWalkProposal(len(self.names), 0.3 / math.sqrt(max(len(self.names), 1)),
                                                 adapt_cov=True) if self.names else None
            self.centered_prop = RandomWalkProposal(len(self.names), 0.3 / math.sqrt(max(len(self.names), 1)),
                                                    adapt_cov=True) if self.names else None
        self.ll = self._loglik()

        self.props = {}
        for k in range(self.K):
            self.props[f"beta[{k}]"] = RandomWalkProposal(1, 0.2)
            if self.sample_rho:
                self.props[f"rho[{k}]"] = RandomWalkProposal(1, 0.2)
        for w in range(self.Wp):
            self.props[f"mu[{w}]"] = RandomWalkProposal(1, 0.1)
            self.props[f"delta[{w}]"] = RandomWalkProposal(1, 0.3)
        self.ridge = cox and "nu" not in cfg.fixed
        if self.ridge:
            if "beta" not in cfg.fixed:
                for k in range(self.K):
                    self.props[f"ridge:beta[{k}]"] = RandomWalkProposal(1, 0.2)
            if "mu" not in cfg.fixed:
                self.props["ridge:mu"] = RandomWalkProposal(1, 0.1)
            if "delta" not in cfg.fixed and self.lik.evening.any():
                self.props["ridge:delta"] = RandomWalkProposal(1, 0.1)
        self._whitened = {}
        self.accepts = {k: 0 for k in self.props}
        self.tries = {k: 0 for k in self.props}
        if cox:
            for k in ("field", "hyper", "hyper_centered"):
                self.accepts[k] = 0
                self.tries[k] = 0

    # ---- likelihood ---------------------------------------------------
    def _log_kappa(self, mu, delta) -> np.ndarray:
        lk = self.lik.log_kappa(mu, delta)
        return np.repeat(lk, self.W, axis=1) if self.Wp != self.W else lk

    def _loglik(self, a=None, log_k=None, z=None, sigma2=None) -> float:
        a = self.a if a is None else a
        log_k = self.log_k if log_k is None else log_k
        if not self.cox:
            return self.lik(a, log_k)
        z = self.z if z is None else z
        sigma2 = self.cov.sigma2 if sigma2 is None else sigma2
        return self.lik(a, log_k, z, sigma2)

    # ---- moves ----------------------------------------------------------
    def _scalar_mh(self, key: str, name: str, current: float, ll_fn, adapt: bool):
        prop = self.props[key]
        tr = Transform.for_param(name, self.priors)
        x = tr.to_real(current)
        x_star = float(prop.propose(np.array([x]), self.rng)[0])
        cand = tr.from_real(x_star)
        lp_star = self.priors.log_density(name, cand)
        self.tries[key] += 1
        if not np.isfinite(lp_star):
            prob = 0.0
            accepted = False
            ll_star = None
        else:
            ll_star = ll_fn(cand)
            log_r = (ll_star - self.ll + lp_star - self.priors.log_density(name, current)
                     + tr.log_jacobian(x_star) - tr.log_jacobian(x))
            prob = 1.0 if log_r >= 0 else (math.exp(log_r) if np.isfinite(log_r) else 0.0)
            accepted = self.rng.uniform() < prob
        if adapt:
            prop.update(np.array([x]), prob)
        if accepted:
            self.accepts[key] += 1
            self.ll = ll_star
            return cand, True
        return current, False

    def _centered_hyper(self, adapt: bool) -> None:
        step = hyper_update_centered(
            self.cov, self.z.ravel(), self.names, self.geom, self.cov_config.separable,
            self.priors, self.centered_prop, self.rng, self.ll, self.factor, jacobian=self.cfg.jacobian)
        if adapt:
            x = np.array([Transform.for_param(n, self.priors).to_real(getattr(self.cov, n))
                          for n in self.names])
            self.centered_prop.update(x, step.accept_prob)
        self.tries["hyper_centered"] += 1
        if step.accepted:
            self.accepts["hyper_centered"] += 1
            self.cov, self.factor = step.cov, step.factor
            self.z = step.z.reshape(self.N, self.M)
            self.nu = self.factor.whiten(step.z)

    def _ridge_mh(self, key: str, d: np.ndarray, log_prior_ratio, adapt: bool) -> float | None:
        """Shift fixed effects by ``c`` along ``d`` and the field by ``-c d``.

        The log intensity is unchanged, so only the priors enter the ratio;
        the whitened field moves by ``-c L^{-1} d``. Returns the accepted
        shift or None.
        """
        prop = self.props[key]
        c = float(prop.propose(np.zeros(1), self.rng)[0])
        cached = self._whitened.get(key)
        if cached is None or cached[0] is not self.factor:
            cached = (self.factor, self.factor.whiten(d.ravel()))
            self._whitened[key] = cached
        nu_star = self.nu - c * cached[1]
        log_r = log_prior_ratio(c) - 0.5 * (nu_star @ nu_star - self.nu @ self.nu)
        prob = 1.0 if log_r >= 0 else (math.exp(log_r) if np.isfinite(log_r) else 0.0)
        self.tries[key] += 1
        if adapt:
            prop.update(np.zeros(1), prob)
        if self.rng.uniform() >= prob:
            return None
        self.accepts[key] += 1
        self.nu = nu_star
        self.z = self.z - c * d
        return c

    def _ridge_moves(self, adapt: bool) -> None:
        pr = self.priors
        for k in range(self.K):
            key = f"ridge:beta[{k}]"
            if key not in self.props:
                continue
            b = self.beta[k]
            d = np.broadcast_to(self.G[k][:, None], (self.N, self.M))
            c = self._ridge_mh(key, d, lambda c: pr.log_density("beta", b + c) - pr.log_density("beta", b), adapt)
            if c is not None:
                self.beta[k] = b + c
                self.a = self.a + c * self.G[k]
        if "ridge:mu" in self.props:
            mu = self.mu.copy()

            def ratio(c):
                return sum(pr.log_density("mu", m * math.exp(c)) - pr.log_density("mu", m) + c for m in mu)
            c = self._ridge_mh("ridge:mu", np.ones((self.N, self.M)), ratio, adapt)
            if c is not None:
                self.mu = mu * math.exp(c)
                self.log_k = self._log_kappa(self.mu, self.delta)
        if "ridge:delta" in self.props:
            # log(1 + delta) moves by c on every evening cell
            delta = self.delta.copy()

            def ratio_d(c):
                new = (1.0 + delta) * math.exp(c) - 1.0
                return sum(pr.log_density("delta", b) - pr.log_density("delta", a) + c
                           for a, b in zip(delta, new))
            d = np.broadcast_to(self.lik.evening.astype(float)[None, :], (self.N, self.M))
            c = self._ridge_mh("ridge:delta", d, ratio_d, adapt)
            if c is not None:
                self.delta = (1.0 + delta) * math.exp(c) - 1.0
                self.log_k = self._log_kappa(self.mu, self.delta)
        self.ll = self._loglik()

    def sweep(self, adapt: bool) -> None:
        fixed = self.cfg.fixed
        if self.cox:
            if "nu" not in fixed:
                zfun = lambda z: self._loglik(z=z.reshape(self.N, self.M))
                nu, z, ll, _ = ess_update(self.nu, self.factor, zfun, self.rng,
                                          cur_ll=self.ll, z=self.z.ravel())
                self.nu, self.z, self.ll = nu, z.reshape(self.N, self.M), ll
                self.tries["field"] += 1
                self.accepts["field"] += 1
            if self.names:
                step = hyper_update(
                    self.cov, self.nu, self.names, self.geom, self.cov_config.separable,
                    lambda z, s2: self._loglik(z=z.reshape(self.N, self.M), sigma2=s2),
                    self.priors, self.hyper_prop, self.rng, self.ll,
                    factor=self.factor, z=self.z.ravel(), jacobian=self.cfg.jacobian)
                if adapt:
                    x = np.array([Transform.for_param(n, self.priors).to_real(getattr(self.cov, n))
                                  for n in self.names])
                    self.hyper_prop.update(x, step.accept_prob)
                self.tries["hyper"] += 1
                if step.accepted:
                    self.accepts["hyper"] += 1
                    self.cov, self.factor, self.ll = step.cov, step.factor, step.loglik
                    self.z = step.z.reshape(self.N, self.M)
                if "nu" not in fixed:
                    self._centered_hyper(adapt)

        for k in range(self.K):
            if "beta" not in fixed:
                g = self.G[k]
                b0 = self.beta[k]
                new, ok = self._scalar_mh(f"beta[{k}]", "beta", b0,
                                          lambda b: self._loglik(a=self.a + (b - b0) * g), adapt)
                if ok:
                    self.beta[k] = new
                    self.a = self.a + (new - b0) * g
            if self.sample_rho:
                def ll_rho(r, k=k):
                    lm = self.landmarks[k].with_rho(r)
                    gk = landmark_matrix(self.grid.centroids, [lm])[0]
                    return self._loglik(a=self.a + self.beta[k] * (gk - self.G[k]))
                new, ok = self._scalar_mh(f"rho[{k}]", "rho", self.rho[k], ll_rho, adapt)
                if ok:
                    self.rho[k] = new
                    self.landmarks[k] = self.landmarks[k].with_rho(new)
                    gk = landmark_matrix(self.grid.centroids, [self.landmarks[k]])[0]
                    self.a = self.a + self.beta[k] * (gk - self.G[k])
                    self.G[k] = gk

        for w in range(self.Wp):
            for name, arr in (("mu", self.mu), ("delta", self.delta)):
                if name in fixed:
                    continue

                def ll_w(v, name=name, w=w):
                    mu, delta = self.mu.copy(), self.delta.copy()
                    (mu if name == "mu" else delta)[w] = v
                    return self._loglik(log_k=self._log_kappa(mu, delta))
                new, ok = self._scalar_mh(f"{name}[{w}]", name, arr[w], ll_w, adapt)
                if ok:
                    arr[w] = new
                    self.log_k = self._log_kappa(self.mu, self.delta)

        if self.ridge:
            self._ridge_moves(adapt)

    def freeze(self) -> None:
        for p in self.props.values():
            p.freeze()
        if self.cox and self.hyper_prop is not None:
            self.hyper_prop.freeze()
            self.centered_prop.freeze()

    # ---- output -----------------------------------------------------------
    def eta(self) -> np.ndarray:
        """(N, M) log intensity without the weekday factor."""
        if self.cox:
            return self.a[:, None] + self.z - 0.5 * self.cov.sigma2
        return np.broadcast_to(self.a[:, None], (self.N, self.M))

    def intensity(self) -> np.ndarray:
        return np.exp(self.eta())[:, :, None] * np.exp(self.log_k)[None, :, :]

    def weekday_totals(self) -> np.ndarray:
        base = (np.exp(self.eta()) * self.grid.volumes).sum(axis=0)          # (M,)
        return base @ np.exp(self.log_k)                                      # (W,)


def _run(grid, landmarks, priors, cfg: MCMCConfig, rng, cox, cov_config, sample_rho, variant) -> PosteriorChain:
    s = _Sampler(grid, landmarks, priors, cfg, rng, cox, cov_config, sample_rho)
    burn = cfg.burn
    if burn >= cfg.iters:
        raise ValueError("burn-in must be shorter than the chain")
    keep = range(burn + cfg.thin - 1, cfg.iters, cfg.thin)
    n_keep = len(keep)
    store = {"beta": np.zeros((n_keep, s.K)), "mu": np.zeros((n_keep, s.Wp)),
             "delta": np.zeros((n_keep, s.Wp)), "loglik": np.zeros(n_keep)}
    if sample_rho and s.K:
        store["rho"] = np.zeros((n_keep, s.K))
    if cox:
        for n in cov_config.names:
            store[n] = np.zeros(n_keep)
    totals = np.zeros((n_keep, s.W))
    intensity = np.zeros((n_keep, s.N, s.M, s.W)) if cfg.store_intensity else None
    nus = np.zeros((n_keep, s.N * s.M)) if (cox and cfg.store_field) else None
    trace = np.zeros(cfg.iters)
    j = 0
    for it in range(cfg.iters):
        if it == burn:
            s.freeze()
            s.accepts = {k: 0 for k in s.accepts}
            s.tries = {k: 0 for k in s.tries}
        s.sweep(adapt=it < burn)
        if not np.isfinite(s.ll):
            raise NumericalError(f"non-finite log-likelihood at iteration {it}: "
                                 f"beta={s.beta.tolist()} mu={s.mu.tolist()}")
        trace[it] = s.ll
        if j < n_keep and it == keep[j]:
            store["beta"][j] = s.beta
            store["mu"][j] = s.mu
            store["delta"][j] = s.delta
            store["loglik"][j] = s.ll
            if "rho" in store:
                store["rho"][j] = s.rho
            if cox:
                for n in cov_config.names:
                    store[n][j] = getattr(s.cov, n)
                if nus is not None:
                    nus[j] = s.nu
            totals[j] = s.weekday_totals()
            if intensity is not None:
                intensity[j] = s.intensity()
            j += 1
    acceptance = {k: (s.accepts[k] / s.tries[k] if s.tries[k] else float("nan")) for k in s.accepts}
    adaptation = {k: p.history for k, p in s.props.items()}
    if cox and s.hyper_prop is not None:
        adaptation["hyper"] = s.hyper_prop.history
        adaptation["hyper_centered"] = s.centered_prop.history
    cov_fixed = {}
    if cox:
        cov_fixed = {"alpha": cov_config.alpha, "cauchy_shape": cov_config.cauchy_shape}
        for n in ("sigma2", "phi_s", "phi_t", "gamma"):
            if n not in store:
                cov_fixed[n] = getattr(s.cov, n)
    config = {"iters": cfg.iters, "burn_in": burn, "thin": cfg.thin, "variant": variant,
              "tie_weekdays": cfg.tie_weekdays, "n_weekdays": s.W, "priors": priors.to_dict()}
    return PosteriorChain(variant=variant, params=store, loglik=trace, acceptance=acceptance,
                          adaptation=adaptation, landmarks=list(s.landmarks) if not sample_rho else list(landmarks),
                          weekday_totals=totals, intensity=intensity, nu=nus,
                          cov_fixed=cov_fixed, config=config)


def fit_nhpp(grid, landmarks, priors: PriorSpec, iters: int, rng: np.random.Generator,
             config: MCMCConfig | None = None) -> PosteriorChain:
    """Metropolis-within-Gibbs for the Poisson model, including the landmark correlations."""
    cfg = config or MCMCConfig()
    cfg.iters = iters
    return _run(grid, landmarks, priors, cfg, rng, False, None, True, "nhpp")


def fit_lgcp(grid, landmarks, rho_fixed, priors: PriorSpec, cov_config: CovConfig, iters: int,
             rng: np.random.Generator, config: MCMCConfig | None = None) -> PosteriorChain:
    """Cox-process sampler with the landmark correlations held at ``rho_fixed``."""
    cfg = config or MCMCConfig()
    cfg.iters = iters
    lms = [lm.with_rho(r) for lm, r in zip(landmarks, np.atleast_1d(rho_fixed))] if landmarks else []
    variant = "lgcp-sep" if cov_config.separable else "lgcp-nonsep"
    return _run(grid, lms, priors, cfg, rng, True, cov_config, False, variant)
