import math
import warnings

import numpy as np
import pytest
from scipy import integrate, stats

from circlgcp.covariance import CovarianceParams
from circlgcp.geomtime import Region, build_grid
from circlgcp.gp import FieldGeometry, assemble_factor
from circlgcp.model import LandmarkSpec, ModelState, TemporalParams, log_intensity_grid
from circlgcp.mcmc import (
    CovConfig, MCMCConfig, PosteriorChain, PriorSpec, RandomWalkProposal, Transform, adapt_proposal,
    ess_update, fit_lgcp, fit_nhpp, hyper_update, inefficiency_factor,
)


def mc_se(x):
    x = np.asarray(x)
    ifac = inefficiency_factor(x)
    return x.std() * math.sqrt(max(ifac, 1.0) / len(x))


# ---- priors and transforms ----------------------------------------------

def test_prior_conventions():
    pr = PriorSpec()
    assert pr.frozen("mu").mean() == pytest.approx(40.0)              # shape 2, rate 0.05
    assert pr.frozen("sigma2").mean() == pytest.approx(0.05)          # shape 2, scale 0.05
    assert pr.log_density("phi_s", 0.31) == -math.inf
    assert pr.log_density("gamma", 0.5) == 0.0
    assert pr.log_density("sigma2", -1.0) == -math.inf


@pytest.mark.parametrize("name,value", [("mu", 3.0), ("phi_s", 0.12), ("rho", -0.4), ("beta", 1.5)])
def test_transform_round_trip_and_jacobian(name, value):
    tr = Transform.for_param(name, PriorSpec())
    x = tr.to_real(value)
    assert tr.from_real(x) == pytest.approx(value, rel=1e-12)
    eps = 1e-6
    numeric = (tr.from_real(x + eps) - tr.from_real(x - eps)) / (2 * eps)
    assert tr.log_jacobian(x) == pytest.approx(math.log(numeric), abs=1e-6)


# ---- adaptation ----------------------------------------------------------

def test_adapt_proposal_directions():
    assert adapt_proposal(0.5, 0.234, 10) == pytest.approx(0.5)
    assert adapt_proposal(0.5, 1.0, 10) > 0.5
    assert adapt_proposal(0.5, 0.0, 10) < 0.5


def test_frozen_proposal_does_not_adapt():
    p = RandomWalkProposal(1, 0.5)
    p.freeze()
    p.update(np.zeros(1), 1.0)
    assert p.scale == 0.5


# ---- inefficiency factor -------------------------------------------------

def test_if_iid():
    x = np.random.default_rng(0).standard_normal(10_000)
    assert 0.8 <= inefficiency_factor(x) <= 1.3


def test_if_ar1():
    rng = np.random.default_rng(1)
    e = rng.standard_normal(100_000)
    x = np.empty_like(e)
    x[0] = e[0]
    for i in range(1, len(e)):
        x[i] = 0.5 * x[i - 1] + e[i]
    assert inefficiency_factor(x) == pytest.approx(3.0, rel=0.2)


def test_if_alternating():
    x = np.tile([1.0, -1.0], 500) + 1e-3 * np.random.default_rng(2).standard_normal(1000)
    assert inefficiency_factor(x) < 1.0


def test_if_constant_and_short():
    with pytest.warns(RuntimeWarning):
        assert math.isnan(inefficiency_factor(np.ones(200)))
    with pytest.raises(ValueError):
        inefficiency_factor(np.arange(50.0))


# ---- elliptical slice ----------------------------------------------------

def test_ess_flat_likelihood_accepts_first_angle():
    rng = np.random.default_rng(3)
    f = assemble_factor(FieldGeometry(rng.uniform(0, 5, (3, 2)), [0.5, 2.0]),
                        CovarianceParams(sigma2=1.0, phi_s=0.2, phi_t=1.0), separable=True)
    nu = rng.standard_normal(6)
    new, _, _, n_eval = ess_update(nu, f, lambda z: 0.0, rng)
    assert n_eval == 1
    assert not np.allclose(new, nu)


def test_ess_one_cell_matches_importance_sampling():
    rng = np.random.default_rng(4)
    sigma2, n, a, vol = 1.0, 4, 0.3, 2.0
    f = assemble_factor(FieldGeometry([[0.0, 0.0]], [1.0]), CovarianceParams(sigma2=sigma2), separable=True)

    def loglik(z):
        eta = a + z[0] - 0.5 * sigma2
        return n * eta - math.exp(eta) * vol

    nu, z = np.zeros(1), f.transform(np.zeros(1))
    ll = loglik(z)
    draws = np.empty(100_000)
    for i in range(len(draws)):
        nu, z, ll, _ = ess_update(nu, f, loglik, rng, cur_ll=ll, z=z)
        draws[i] = z[0]
    draws = np.sort(draws[1000:])
    # importance sampling from the prior
    zs = rng.normal(0.0, math.sqrt(sigma2), 1_000_000)
    eta = a + zs - 0.5 * sigma2
    lw = n * eta - np.exp(eta) * vol
    w = np.exp(lw - lw.max())
    order = np.argsort(zs)
    cdf_w = np.cumsum(w[order]) / w.sum()
    ref = cdf_w[np.clip(np.searchsorted(zs[order], draws, side="right") - 1, 0, None)]
    emp = np.arange(1, len(draws) + 1) / len(draws)
    assert np.max(np.abs(emp - ref)) < 0.02


# ---- hyperparameter move -------------------------------------------------

def _hyper_setup():
    rng = np.random.default_rng(5)
    geom = FieldGeometry(rng.uniform(0, 5, (3, 2)), [0.5, 2.0, 4.0])
    cov = CovarianceParams(sigma2=1.0, phi_s=0.1, phi_t=1.0)
    nu = rng.standard_normal(9)
    return rng, geom, cov, nu


def test_hyper_zero_move_always_accepted():
    rng, geom, cov, nu = _hyper_setup()
    loglik = lambda z, s2: -float(np.sum((z - 1.0) ** 2))
    f = assemble_factor(geom, cov, True)
    ll = loglik(f.transform(nu), cov.sigma2)
    for _ in range(50):
        step = hyper_update(cov, nu, ("sigma2", "phi_s", "phi_t"), geom, True, loglik, PriorSpec(), None,
                            rng, ll, factor=f, propose=lambda c, r: c)
        assert step.accepted and step.accept_prob == 1.0


def test_hyper_out_of_support_rejected():
    rng, geom, cov, nu = _hyper_setup()
    f = assemble_factor(geom, cov, True)
    for _ in range(20):
        step = hyper_update(cov, nu, ("phi_s",), geom, True, lambda z, s2: 0.0, PriorSpec(), None, rng, 0.0,
                            factor=f, propose=lambda c, r: c.replace(phi_s=0.5))
        assert not step.accepted
        assert step.cov is cov


def _hyper_chain(jacobian, n=20_000, thin=5):
    rng, geom, cov, nu = _hyper_setup()
    pr = PriorSpec()
    names = ("sigma2", "phi_s", "phi_t")
    prop = RandomWalkProposal(3, 1.0)
    f = assemble_factor(geom, cov, True)
    out = []
    for i in range(n):
        step = hyper_update(cov, nu, names, geom, True, lambda z, s2: 0.0, pr, prop, rng, 0.0,
                            factor=f, jacobian=jacobian)
        cov, f = step.cov, step.factor
        if i % thin == 0:
            out.append([cov.sigma2, cov.phi_s, cov.phi_t])
    return np.array(out[200:]), pr


def test_hyper_update_preserves_prior_with_jacobian():
    draws, pr = _hyper_chain(True)
    for j, name in enumerate(("sigma2", "phi_s", "phi_t")):
        assert stats.kstest(draws[:, j], pr.frozen(name).cdf).pvalue > 0.01, name


def test_dropping_jacobian_breaks_prior_preservation():
    draws, pr = _hyper_chain(False)
    pvals = [stats.kstest(draws[:, j], pr.frozen(n).cdf).pvalue for j, n in enumerate(("sigma2", "phi_s", "phi_t"))]
    assert min(pvals) < 1e-6


# ---- full samplers -------------------------------------------------------

def test_full_sampler_preserves_prior():
    g = build_grid(Region.square(4.0), 2, 2, 3, n_weekdays=1)
    lms = [LandmarkSpec((1.0, 1.0), 2.0, 2.0, 0.2, "L")]
    pr = PriorSpec()
    cfg = MCMCConfig(thin=10, burn_in=2000, flat_likelihood=True, store_intensity=False, store_field=True)
    ch = fit_lgcp(g, lms, [0.2], pr, CovConfig(), 12_000, np.random.default_rng(6), cfg)
    assert ch.n_draws == 1000
    tr = ch.scalar_traces()
    for name in ("beta[0]", "mu[0]", "delta[0]", "sigma2", "phi_s", "phi_t"):
        assert stats.kstest(tr[name], pr.frozen(name.split("[")[0]).cdf).pvalue > 0.01, name
    for j in (0, 5, 11):
        assert stats.kstest(ch.nu[:, j], stats.norm.cdf).pvalue > 0.01


def _two_cell_grid(n_day, n_eve):
    g = build_grid(Region.square(1.0), 1, 1, 2, n_weekdays=1)
    return g.with_counts(np.array([[[n_day], [n_eve]]]))


def test_two_cell_quadrature_oracle():
    n_day, n_eve = 20, 45
    g = _two_cell_grid(n_day, n_eve)
    vol = float(g.volumes[0, 0])
    pr = PriorSpec()

    def log_post(mu, delta):
        return (pr.log_density("mu", mu) + pr.log_density("delta", delta)
                + (n_day + n_eve) * math.log(mu) + n_eve * math.log1p(delta) - mu * vol * (2.0 + delta))

    mode = log_post((n_day) / vol, n_eve / n_day - 1.0)
    dens = lambda d, m: math.exp(log_post(m, d) - mode)
    box = dict(a=1.0, b=15.0, gfun=lambda m: 0.0, hfun=lambda m: 8.0)
    Z = integrate.dblquad(dens, **box)[0]
    m_mu = integrate.dblquad(lambda d, m: m * dens(d, m), **box)[0] / Z
    m_delta = integrate.dblquad(lambda d, m: d * dens(d, m), **box)[0] / Z

    ch = fit_nhpp(g, [], pr, 40_000, np.random.default_rng(7),
                  MCMCConfig(thin=4, burn_in=4000, store_intensity=False))
    mu, delta = ch.params["mu"][:, 0], ch.params["delta"][:, 0]
    assert abs(mu.mean() - m_mu) < 3 * mc_se(mu)
    assert abs(delta.mean() - m_delta) < 3 * mc_se(delta)


def test_conjugate_gamma_poisson():
    rng = np.random.default_rng(8)
    g = build_grid(Region.square(2.0), 2, 2, 4, n_weekdays=1)
    g = g.with_counts(rng.poisson(1.5 * g.volumes[:, :, None]))
    pr = PriorSpec()
    cfg = MCMCConfig(thin=2, burn_in=2000, store_intensity=False, fixed=("delta",), init={"delta": 0.0})
    ch = fit_nhpp(g, [], pr, 22_000, rng, cfg)
    mu = ch.params["mu"][:, 0]
    post = stats.gamma(pr.mu_shape + g.counts.sum(), scale=1.0 / (pr.mu_rate + g.volumes.sum()))
    assert abs(mu.mean() - post.mean()) < 3 * mc_se(mu)
    assert np.all(ch.params["delta"] == 0.0)


def _nhpp_data(rng, rho, beta=(3.0, 3.0), mu=0.5):
    g = build_grid(Region.square(10.0), 10, 10, 8, n_weekdays=1)
    dx, dy = g.spacing
    lms = [LandmarkSpec((3.0, 6.5), dx, dy, rho[0], "A"), LandmarkSpec((6.0, 3.5), dx, dy, rho[1], "B")]
    st = ModelState(np.array(beta), lms, TemporalParams([mu], [0.5]))
    counts = rng.poisson(np.exp(log_intensity_grid(g, st)) * g.volumes[:, :, None])
    return g.with_counts(counts), [lm.with_rho(0.0) for lm in lms]


def test_rho_sign_recovered():
    rng = np.random.default_rng(9)
    g, lms = _nhpp_data(rng, (0.3, -0.5))
    ch = fit_nhpp(g, lms, PriorSpec(), 6000, rng, MCMCConfig(thin=5, store_intensity=False))
    rho = ch.rho_plugin()
    assert rho[1] < 0 < rho[0]


def test_nhpp_beta_calibration():
    hits = np.zeros(2, dtype=int)
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        g, lms = _nhpp_data(rng, (0.097, -0.142))
        ch = fit_nhpp(g, lms, PriorSpec(), 3000, rng, MCMCConfig(thin=3, store_intensity=False))
        for k in range(2):
            lo, hi = ch.interval(f"beta[{k}]")
            hits[k] += lo <= 3.0 <= hi
    assert np.all(hits >= 18), hits


def _small_lgcp(seed, iters=400, **kw):
    g = build_grid(Region.square(3.0), 2, 2, 3, n_weekdays=7)
    rng = np.random.default_rng(seed)
    g = g.with_counts(rng.poisson(2.0, (4, 3, 7)))
    lms = [LandmarkSpec((1.0, 1.0), 1.5, 1.5, 0.1, "L")]
    cfg = MCMCConfig(thin=10, **kw)
    return fit_lgcp(g, lms, [0.1], PriorSpec(), CovConfig(separable=False), iters, np.random.default_rng(seed), cfg), g


def test_draw_count_and_supports():
    ch, _ = _small_lgcp(10)
    assert ch.n_draws == (400 - 200) // 10
    pr = PriorSpec()
    for n in ("sigma2", "phi_s", "phi_t", "gamma"):
        assert np.all(np.isfinite([pr.log_density(n, v) for v in ch.params[n]]))
    assert ch.intensity.shape == (20, 4, 3, 7)
    assert np.all(ch.intensity > 0)


def test_identical_seeds_give_identical_chains():
    a, _ = _small_lgcp(11)
    b, _ = _small_lgcp(11)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    np.testing.assert_array_equal(a.intensity, b.intensity)


def test_jsonl_round_trip(tmp_path):
    ch, g = _small_lgcp(12, store_field=True)
    ch.to_jsonl(tmp_path / "c.jsonl")
    back = PosteriorChain.from_jsonl(tmp_path / "c.jsonl")
    assert back.variant == "lgcp-nonsep"
    for k in ch.params:
        np.testing.assert_array_equal(back.params[k], ch.params[k])
    np.testing.assert_array_equal(back.weekday_totals, ch.weekday_totals)
    assert back.landmarks == ch.landmarks
    st = ch.state(3, g)
    assert st.is_cox and st.cov.gamma == ch.params["gamma"][3]
