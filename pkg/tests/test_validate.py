import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from circlgcp.geomtime import Region, build_grid
from circlgcp.validate import (
    TIME_RANGES, draw_subsets, evaluate, interval_covers_zero, local_pic, p_thin, pic, predictive_residuals,
    rescale_test_intensity, rps, rps_batch, score_subsets,
)


def rps_cdf(lam, y, kmax=400):
    k = np.arange(kmax)
    return float(np.sum((stats.poisson.cdf(k, lam) - (k >= y)) ** 2))


# ---- thinning ------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_thinning_conserves_counts(seed, p):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(3.0, (5, 4, 7))
    split = p_thin(counts, p, rng)
    np.testing.assert_array_equal(split.train + split.test, counts)
    assert np.all(split.train >= 0) and np.all(split.test >= 0)


def test_thinning_totals():
    rng = np.random.default_rng(0)
    split = p_thin(np.ones(10_000, dtype=int), 0.5, rng)
    assert abs(split.train.sum() - 5000) <= 200
    near_one = p_thin(np.full(1000, 5), 1 - 1e-12, rng)
    assert near_one.test.sum() == 0


def test_thinning_event_lists():
    events = list(range(100))
    split = p_thin(events, 0.3, np.random.default_rng(1))
    assert sorted(split.train + split.test) == events


@pytest.mark.parametrize("p", [0.0, 1.0, -0.5])
def test_thinning_rejects_bad_p(p):
    with pytest.raises(ValueError):
        p_thin(np.ones(3, dtype=int), p, np.random.default_rng(0))


def test_rescale_factors():
    lam = np.array([0.0, 1.0, 2.5])
    np.testing.assert_array_equal(rescale_test_intensity(lam, 0.5), lam)
    np.testing.assert_allclose(rescale_test_intensity(lam, 0.2), 4.0 * lam)
    assert rescale_test_intensity(0.0, 0.3) == 0.0


# ---- subsets -------------------------------------------------------------

def grid20(W=1):
    return build_grid(Region.square(20.0), 20, 20, 12, n_weekdays=W)


def test_subset_area_rule():
    g = grid20()
    subs = draw_subsets(g, 0.05, 1000, "10:00-18:00", np.random.default_rng(2))
    rel = np.array([b.area for b in subs]) / g.total_area
    assert 0.045 <= rel.mean() <= 0.06
    cell = g.areas.max() / g.total_area
    assert np.all((rel >= 0.05 - 1e-12) & (rel <= 0.05 + cell + 1e-12))
    assert all(len(set(b.space)) == len(b.space) for b in subs)


def test_subset_time_cells_follow_range():
    g = grid20()
    for name in TIME_RANGES:
        b = draw_subsets(g, 0.1, 1, name, np.random.default_rng(3))[0]
        assert len(b.time) == 4
    evening = draw_subsets(g, 0.1, 1, "18:00-02:00", np.random.default_rng(3))[0]
    np.testing.assert_array_equal(evening.time, [8, 9, 10, 11])


def test_full_coverage_subset():
    g = grid20()
    b = draw_subsets(g, 1.0, 1, "02:00-10:00", np.random.default_rng(4))[0]
    np.testing.assert_array_equal(b.space, np.arange(g.n_space))


def test_subsets_overlap():
    g = grid20()
    subs = draw_subsets(g, 0.1, 1000, "02:00-10:00", np.random.default_rng(5))
    overlaps = [len(np.intersect1d(subs[i].space, subs[i + 1].space)) for i in range(0, 999)]
    assert np.mean(overlaps) > 0


def test_subset_smaller_than_a_cell_rejected():
    with pytest.raises(ValueError):
        draw_subsets(build_grid(Region.square(2.0), 2, 2, 3), 0.1, 1, "02:00-10:00", np.random.default_rng(0))


# ---- residuals and PIC ---------------------------------------------------

def test_perfect_oracle_residuals_centered():
    g = build_grid(Region.square(4.0), 4, 4, 6, n_weekdays=1)
    rng = np.random.default_rng(6)
    lam_vol = rng.uniform(0.5, 2.0, (g.n_space, g.n_time, 1))
    b = draw_subsets(g, 0.25, 1, "10:00-18:00", rng)[0]
    res = np.array([predictive_residuals(lam_vol[None], rng.poisson(lam_vol), g, b, rng)[0] for _ in range(1000)])
    assert abs(res.mean()) < 4 * res.std() / math.sqrt(len(res))


def test_residual_degenerate_cases():
    g = build_grid(Region.square(4.0), 4, 4, 6, n_weekdays=1)
    rng = np.random.default_rng(7)
    b = draw_subsets(g, 0.25, 1, "10:00-18:00", rng)[0]
    zero = np.zeros((200, 16, 6, 1))
    np.testing.assert_array_equal(predictive_residuals(zero, np.zeros((16, 6, 1)), g, b, rng), 0)
    test = np.zeros((16, 6, 1))
    test[b.space[0], b.time[0], 0] = 7
    np.testing.assert_array_equal(predictive_residuals(zero, test, g, b, rng), 7)


def test_pic_examples():
    assert pic(np.zeros((5, 200))) == 1.0
    assert pic(np.ones((5, 200))) == 0.0
    with pytest.raises(ValueError):
        pic(np.zeros((5, 50)))


def test_pic_monotone_in_nominal():
    rng = np.random.default_rng(8)
    r = rng.normal(rng.normal(0, 1.5, (300, 1)), 1.0, (300, 400))
    levels = [0.8, 0.85, 0.9, 0.95]
    cov = [pic(r, lv) for lv in levels]
    assert all(a <= b for a, b in zip(cov, cov[1:]))
    assert 0.0 <= min(cov) and max(cov) <= 1.0


def test_interval_uses_linear_quantiles():
    r = np.arange(1, 21, dtype=float)[None] - 1.5      # -0.5 .. 18.5
    # 5% linear quantile = -0.5 + 0.95 = 0.45 > 0
    assert not interval_covers_zero(r, 0.90)[0]


# ---- RPS -----------------------------------------------------------------

def test_rps_examples():
    assert rps([4, 4, 4], 4) == 0.0
    assert rps([6, 6, 6, 6], 4) == 2.0
    with pytest.raises(ValueError):
        rps([3], 3)


def test_rps_matches_pairwise_display():
    rng = np.random.default_rng(9)
    x = rng.poisson(5.0, 60)
    y = 3
    L = len(x)
    direct = np.mean(np.abs(x - y)) - np.abs(x[:, None] - x[None, :]).sum() / (2 * L * L)
    assert rps(x, y) == pytest.approx(direct, abs=1e-12)
    assert rps(rng.permutation(x), y) == pytest.approx(rps(x, y), abs=1e-12)
    draws = rng.poisson(3.0, (4, 50))
    obs = np.array([0, 2, 5, 9])
    np.testing.assert_allclose(rps_batch(draws, obs), [rps(d, o) for d, o in zip(draws, obs)], atol=1e-12)


@pytest.mark.parametrize("lam", [0.5, 2.0, 10.0])
@pytest.mark.parametrize("y", [0, 2, 15])
def test_rps_matches_cdf_oracle(lam, y):
    rng = np.random.default_rng(int(lam * 100) + y)
    vals = np.array([rps(rng.poisson(lam, 200), y) for _ in range(400)])
    assert abs(vals.mean() - rps_cdf(lam, y)) < 3 * vals.std() / math.sqrt(len(vals)) + 1e-12


def test_rps_propriety():
    rng = np.random.default_rng(10)
    lam0 = 4.0
    ys = rng.poisson(lam0, 1000)
    true = np.mean([rps(rng.poisson(lam0, 300), y) for y in ys])
    wide = np.mean([rps(rng.poisson(1.5 * lam0, 300), y) for y in ys])
    assert true < wide


# ---- aggregate report ----------------------------------------------------

def test_evaluate_prefers_true_intensity_and_reports_all_cells():
    g = build_grid(Region.square(10.0), 10, 10, 12, n_weekdays=1)
    rng = np.random.default_rng(11)
    x = g.centroids[:, 0]
    lam = np.exp(0.3 * x - 1.0)[:, None, None] * np.ones((1, 12, 1))
    counts = rng.poisson(lam * g.volumes[:, :, None])
    split = p_thin(counts, 0.5, rng)
    L = 200
    true_draws = np.broadcast_to(0.5 * lam, (L,) + lam.shape)
    flat = np.full_like(true_draws, 0.5 * lam.mean())
    rep = evaluate({"true": true_draws, "flat": flat}, split, g, [0.05, 0.1], 200, rng, local_q=0.05)
    assert len(rep.rows) == 2 * 2 * 3
    for q in (0.05, 0.1):
        for tr in TIME_RANGES:
            assert rep.value("true", q, tr, "rps") < rep.value("flat", q, tr, "rps")
            assert 0.0 <= rep.value("true", q, tr, "pic") <= 1.0
    assert rep.local["true"].shape == (100,)


def test_local_pic_flags_zeroed_region():
    g = build_grid(Region.square(10.0), 10, 10, 12, n_weekdays=1)
    rng = np.random.default_rng(12)
    lam_vol = np.full((g.n_space, g.n_time, 1), 2.0)
    test = rng.poisson(lam_vol)
    model = np.broadcast_to(lam_vol, (200,) + lam_vol.shape).copy()
    dead = g.centroids[:, 0] < 3.0
    model[:, dead] = 0.0
    loc = local_pic(model, test, g, 0.01, 400, rng)
    assert np.nanmean(loc[dead]) < 0.05
    assert np.nanmean(loc[~dead]) > 0.8


def test_local_pic_single_covering_subset_is_constant():
    g = build_grid(Region.square(4.0), 4, 4, 6, n_weekdays=1)
    rng = np.random.default_rng(13)
    lam_vol = np.full((16, 6, 1), 1.0)
    loc = local_pic(np.broadcast_to(lam_vol, (200, 16, 6, 1)), rng.poisson(lam_vol), g, 1.0, 1, rng)
    assert np.all(np.isfinite(loc))
    # every cell lies in the same three subsets, one per time range
    assert len(set(loc)) == 1
