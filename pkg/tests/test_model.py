import math

import numpy as np
import pytest
from scipy import optimize

from circlgcp.covariance import CovarianceParams, ParameterError
from circlgcp.geomtime import TWO_PI, Region, build_grid
from circlgcp.gp import NumericalError, WhitenedField, assemble_factor, sample_prior_field
from circlgcp.model import (
    EVENING_START, GridLikelihood, LandmarkSpec, ModelState, TemporalParams, kappa, landmark_covariate,
    log_intensity, log_intensity_grid, log_kappa_table, log_lambda0, log_likelihood, poisson_loglik,
)


def lm(loc=(0.0, 0.0), s1=1.0, s2=1.0, rho=0.0):
    return LandmarkSpec(loc, s1, s2, rho)


# ---- landmark covariate ---------------------------------------------------

def test_covariate_is_one_at_landmark():
    assert landmark_covariate(np.array([2.0, 3.0]), lm((2.0, 3.0), rho=0.4)) == 1.0


def test_one_sd_offset():
    assert landmark_covariate(np.array([0.7, 0.0]), lm(s1=0.7, s2=0.3)) == pytest.approx(math.exp(-0.5))
    assert math.exp(-0.5) == pytest.approx(0.6065, abs=1e-4)


def test_correlated_offset():
    v = landmark_covariate(np.array([1.0, 1.0]), lm(rho=0.5))
    assert v == pytest.approx(math.exp(-0.5 * 4.0 / 3.0), rel=1e-14)
    assert v == pytest.approx(0.5134, abs=1e-4)


def test_covariate_matches_mahalanobis_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s1, s2, rho = rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0), rng.uniform(-0.95, 0.95)
        S = np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])
        d = rng.normal(size=2)
        expected = math.exp(-0.5 * d @ np.linalg.solve(S, d))
        assert landmark_covariate(d, lm(s1=s1, s2=s2, rho=rho)) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
def test_invalid_rho(rho):
    with pytest.raises(ParameterError):
        lm(rho=rho)


def test_log_lambda0_examples():
    s = np.array([[0.0, 0.0]])
    assert log_lambda0(s, [lm()], [0.0])[0] == 0.0
    assert log_lambda0(s, [lm()], [3.0])[0] == 3.0
    # two landmarks each with g = 0.5 at s
    d = math.sqrt(2.0 * math.log(2.0))
    lms = [lm((d, 0.0)), lm((0.0, -d))]
    assert log_lambda0(s, lms, [3.0, 3.0])[0] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        log_lambda0(s, lms, [1.0])


# ---- temporal scale ------------------------------------------------------

def test_kappa_examples():
    tp = TemporalParams(np.full(7, 2.0), np.full(7, 0.5))
    assert kappa(0.0, 3, tp) == 2.0
    assert kappa(EVENING_START, 3, tp) == pytest.approx(3.0)
    assert kappa(EVENING_START - 1e-9, 3, tp) == 2.0
    flat = TemporalParams(np.full(7, 2.0), np.zeros(7))
    assert np.all(kappa(np.linspace(0, TWO_PI, 50, endpoint=False), 1, flat) == 2.0)


def test_temporal_params_validation():
    with pytest.raises(ParameterError):
        TemporalParams([0.0], [0.1])
    with pytest.raises(ParameterError):
        TemporalParams([1.0], [-0.1])
    with pytest.raises(ValueError):
        TemporalParams([1.0, 1.0], [0.1])


# ---- intensity -----------------------------------------------------------

def small_grid(counts=None, W=7):
    g = build_grid(Region.square(2.0), 2, 2, 4, n_weekdays=W)
    return g if counts is None else g.with_counts(counts)


def cox_state(grid, rng, sigma2=1.5):
    p = CovarianceParams(sigma2=sigma2, phi_s=0.3, phi_t=1.0)
    fld = sample_prior_field(assemble_factor(grid, p, separable=True), rng)
    W = grid.counts.shape[2]
    return ModelState(np.array([1.0]), [lm((0.5, 0.5))], TemporalParams(rng.uniform(0.5, 2, W), rng.uniform(0, 1, W)),
                      p, fld)


def test_nhpp_log_intensity_is_log_mu():
    g = small_grid()
    st = ModelState(np.zeros(1), [lm()], TemporalParams(np.full(7, 2.5), np.zeros(7)))
    np.testing.assert_allclose(log_intensity_grid(g, st), math.log(2.5))


def test_mean_correction_cancels():
    g = small_grid()
    rng = np.random.default_rng(1)
    st = cox_state(g, rng)
    st.field = WhitenedField(np.zeros(16), np.full(16, st.cov.sigma2 / 2))
    a = log_lambda0(g.centroids, st.landmarks, st.beta)
    expected = a[:, None, None] + log_kappa_table(g.time_centroids, st.temporal)[None]
    np.testing.assert_allclose(log_intensity_grid(g, st), expected, atol=1e-13)


def test_scalar_and_grid_intensity_agree():
    g = small_grid()
    st = cox_state(g, np.random.default_rng(2))
    L = log_intensity_grid(g, st)
    for j in range(16):
        for w in range(7):
            s, t = divmod(j, 4)
            assert log_intensity(g, st, j, w) == pytest.approx(L[s, t, w], abs=1e-12)


def test_field_shared_across_weekdays():
    g = small_grid()
    st = cox_state(g, np.random.default_rng(3))
    base = log_intensity_grid(g, st)
    z = st.field.z.copy()
    z[5] += 0.7
    st.field = WhitenedField(st.field.nu, z)
    diff = log_intensity_grid(g, st) - base
    s, t = divmod(5, 4)
    np.testing.assert_allclose(diff[s, t, :], 0.7, atol=1e-12)
    diff[s, t, :] = 0.0
    np.testing.assert_allclose(diff, 0.0, atol=1e-12)


def test_lognormal_mean_identity():
    rng = np.random.default_rng(4)
    p = CovarianceParams(sigma2=1.2, phi_s=0.3, phi_t=1.0)
    f = assemble_factor(small_grid(), p, separable=True)
    Z = f.transform(rng.standard_normal((40_000, 16)))
    v = np.exp(-0.5 * p.sigma2 + Z[:, 0])
    assert abs(v.mean() - 1.0) < 3 * v.std() / math.sqrt(len(v))


# ---- likelihood ----------------------------------------------------------

def test_one_cell_likelihood():
    val = poisson_loglik(np.array([3.0]), np.array([math.log(2.0)]), np.array([1.0]))
    assert val == pytest.approx(3 * math.log(2.0) - 2.0)
    assert val == pytest.approx(0.0794, abs=1e-4)


def test_zero_counts_likelihood():
    g = small_grid()
    st = ModelState(np.zeros(1), [lm()], TemporalParams(np.full(7, 2.0), np.zeros(7)))
    assert log_likelihood(g, st) == pytest.approx(-2.0 * g.volumes.sum() * 7)


def test_constant_rate_mle():
    rng = np.random.default_rng(5)
    g = small_grid(rng.poisson(3.0, (4, 4, 1)), W=1)

    def negll(log_mu):
        st = ModelState(np.zeros(1), [lm()], TemporalParams([math.exp(log_mu)], [0.0]))
        return -log_likelihood(g, st)

    res = optimize.minimize_scalar(negll, bounds=(-5, 5), method="bounded", options={"xatol": 1e-10})
    mle = g.counts.sum() / g.volumes.sum()
    assert math.exp(res.x) == pytest.approx(mle, rel=1e-6)


def test_likelihood_additive_over_weekdays():
    rng = np.random.default_rng(6)
    g = small_grid(rng.poisson(2.0, (4, 4, 7)))
    st = cox_state(g, rng)
    L = log_intensity_grid(g, st)
    per_w = sum(poisson_loglik(g.counts[:, :, w], L[:, :, w], g.volumes) for w in range(7))
    assert per_w == pytest.approx(log_likelihood(g, st), rel=1e-13)


def test_nonfinite_intensity_reports_cell():
    log_lam = np.zeros((2, 2, 1))
    log_lam[1, 0, 0] = np.inf
    with pytest.raises(NumericalError, match=r"\(1, 0, 0\)"):
        poisson_loglik(np.ones((2, 2, 1)), log_lam, np.ones((2, 2, 1)))


def test_grid_likelihood_matches_direct():
    rng = np.random.default_rng(7)
    for W in (7, 1):
        g = small_grid(rng.poisson(2.0, (4, 4, W)), W=W)
        st = cox_state(g, rng)
        gl = GridLikelihood(g)
        a = log_lambda0(g.centroids, st.landmarks, st.beta)
        lk = gl.log_kappa(st.temporal.mu, st.temporal.delta)
        z = st.field.z.reshape(4, 4)
        assert gl(a, lk, z, st.cov.sigma2) == pytest.approx(log_likelihood(g, st), rel=1e-12)
        st.field = None
        assert gl(a, lk) == pytest.approx(log_likelihood(g, st), rel=1e-12)
    assert GridLikelihood(g, flat=True)(a, lk) == 0.0
