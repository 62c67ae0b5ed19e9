"""Out-of-sample checks from p-thinned point patterns.

A fit on the retained (training) events gives draws of ``lambda_train``;
``(1 - p) / p * lambda_train`` is then the intensity of the held-out events.
Random unions of spatial cells ``B_k`` (crossed with a time-of-day range)
are scored by predictive interval coverage (PIC) and rank probability
score (RPS).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geomtime import TWO_PI, SpaceTimeGrid, time_cells_in_range

TIME_RANGES = {
    "02:00-10:00": (0.0, TWO_PI / 3.0),
    "10:00-18:00": (TWO_PI / 3.0, 2.0 * TWO_PI / 3.0),
    "18:00-02:00": (2.0 * TWO_PI / 3.0, TWO_PI),
}


@dataclass
class ThinningSplit:
    p: float
    train: np.ndarray
    test: np.ndarray


def p_thin(counts, p: float, rng: np.random.Generator) -> ThinningSplit:
    """Keep each event in the training pattern independently with probability ``p``.

    ``counts`` may be a count array (any shape) or a list of events; for a
    list, ``train`` and ``test`` are lists.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("retention probability must lie in (0, 1)")
    if isinstance(counts, (list, tuple)):
        keep = rng.uniform(size=len(counts)) < p
        return ThinningSplit(p, [e for e, k in zip(counts, keep) if k],
                             [e for e, k in zip(counts, keep) if not k])
    counts = np.asarray(counts, dtype=np.int64)
    train = rng.binomial(counts, p)
    return ThinningSplit(p, train, counts - train)


def rescale_test_intensity(lam_train, p: float):
    if not 0.0 < p < 1.0:
        raise ValueError("retention probability must lie in (0, 1)")
    return np.asarray(lam_train) * ((1.0 - p) / p)


@dataclass
class EvalSubset:
    space: np.ndarray          # spatial cell indices
    time: np.ndarray           # time cell indices
    q: float
    time_range: str
    area: float

    def mask(self, grid: SpaceTimeGrid) -> np.ndarray:
        m = np.zeros((grid.n_space, grid.n_time), dtype=bool)
        m[np.ix_(self.space, self.time)] = True
        return m


def draw_subsets(grid: SpaceTimeGrid, q: float, count: int, time_range: str,
                 rng: np.random.Generator) -> list[EvalSubset]:
    """Random unions of spatial cells with area first reaching ``q * |D|``.

    Cells are sampled without replacement inside one subset; different
    subsets are drawn independently and may overlap.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if count < 1:
        raise ValueError("count must be >= 1")
    target = q * grid.total_area
    if target < grid.areas.min():
        raise ValueError(f"q * |D| = {target:g} is smaller than the smallest cell")
    start, stop = TIME_RANGES[time_range]
    tcells = time_cells_in_range(grid, start, stop)
    out = []
    for _ in range(count):
        order = rng.permutation(grid.n_space)
        cum = np.cumsum(grid.areas[order])
        k = int(np.searchsorted(cum, target * (1.0 - 1e-12))) + 1
        k = min(k, grid.n_space)
        cells = np.sort(order[:k])
        out.append(EvalSubset(cells, tcells, q, time_range, float(cum[k - 1])))
    return out


def subset_totals(values: np.ndarray, grid: SpaceTimeGrid, subsets) -> np.ndarray:
    """Sum ``values`` of shape ``(..., N, M[, W])`` over each subset -> ``(..., K)``."""
    v = np.asarray(values, dtype=float)
    if v.ndim >= 3 and v.shape[-3:-1] == (grid.n_space, grid.n_time):
        v = v.sum(axis=-1)
    out = np.empty(v.shape[:-2] + (len(subsets),))
    for k, b in enumerate(subsets):
        out[..., k] = v[..., b.space, :][..., b.time].sum(axis=(-2, -1))
    return out


def predictive_residuals(lam_test_volume: np.ndarray, test_counts: np.ndarray, grid: SpaceTimeGrid,
                         subset: EvalSubset, rng: np.random.Generator) -> np.ndarray:
    """``N_test(B) - N_l(B)`` with ``N_l(B) ~ Poisson(Lambda_test_l(B))`` for each draw ``l``.

    ``lam_test_volume`` has shape ``(L, N, M[, W])`` and already includes the
    thinning rescale and cell volumes.
    """
    means = subset_totals(lam_test_volume, grid, [subset])[:, 0]
    observed = subset_totals(test_counts, grid, [subset])[0]
    return observed - rng.poisson(means)


def interval_covers_zero(residuals: np.ndarray, nominal: float = 0.90) -> np.ndarray:
    """Central ``nominal`` interval (linear-interpolated quantiles) of each row contains 0."""
    r = np.atleast_2d(residuals)
    a = (1.0 - nominal) / 2.0
    lo, hi = np.quantile(r, [a, 1.0 - a], axis=1)
    return (lo <= 0) & (0 <= hi)


def pic(residuals, nominal: float = 0.90) -> float:
    """Fraction of subsets whose predictive-residual interval contains zero.

    ``residuals``: array ``(K, L)`` or list of per-subset residual draws.
    """
    r = np.asarray(residuals, dtype=float)
    if r.shape[-1] < 100:
        raise ValueError("need at least 100 draws per subset")
    return float(np.mean(interval_covers_zero(r, nominal)))


def rps(draws, observed) -> float:
    """Monte Carlo rank probability score of a count forecast.

    ``mean|N_l - y| - mean_{l,l'}|N_l - N_l'| / 2``; the pairwise term uses
    the sorted-sample identity so the cost is O(L log L).
    """
    x = np.sort(np.asarray(draws, dtype=float))
    L = len(x)
    if L < 2:
        raise ValueError("need at least 2 draws")
    first = np.mean(np.abs(x - observed))
    pair_sum = 2.0 * np.sum((2.0 * np.arange(1, L + 1) - L - 1) * x)
    return float(first - pair_sum / (2.0 * L * L))


def rps_batch(draws: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Row-wise :func:`rps` for draws ``(K, L)`` and observations ``(K,)``."""
    x = np.sort(np.asarray(draws, dtype=float), axis=1)
    L = x.shape[1]
    first = np.mean(np.abs(x - np.asarray(observed, dtype=float)[:, None]), axis=1)
    w = 2.0 * np.arange(1, L + 1) - L - 1
    return first - (2.0 * x @ w) / (2.0 * L * L)


@dataclass
class ValidationReport:
    rows: list = field(default_factory=list)
    local: dict = field(default_factory=dict)

    def table(self, model: str | None = None) -> list:
        return [r for r in self.rows if model is None or r["model"] == model]

    def value(self, model: str, q: float, time_range: str, key: str) -> float:
        for r in self.rows:
            if r["model"] == model and math.isclose(r["q"], q) and r["time_range"] == time_range:
                return r[key]
        raise KeyError((model, q, time_range))


def score_subsets(lam_test_volume: np.ndarray, test_counts: np.ndarray, grid: SpaceTimeGrid,
                  subsets, rng: np.random.Generator, nominal: float = 0.90):
    """Per-subset RPS and interval-coverage indicators for one fitted model."""
    means = subset_totals(lam_test_volume, grid, subsets)          # (L, K)
    observed = subset_totals(test_counts, grid, subsets)           # (K,)
    draws = rng.poisson(means).T                                    # (K, L)
    residuals = observed[:, None] - draws
    return rps_batch(draws, observed), interval_covers_zero(residuals, nominal)


def evaluate(models: dict, split: ThinningSplit, grid: SpaceTimeGrid, qs, n_subsets: int,
             rng: np.random.Generator, nominal: float = 0.90, local_q: float | None = None) -> ValidationReport:
    """Score fitted models on the held-out pattern.

    ``models`` maps a label to draws of ``lambda_train`` with shape
    ``(L, N, M, W)``. The same subsets are used for every model.
    """
    report = ValidationReport()
    vol = grid.volumes[None, :, :, None]
    lam_test = {m: rescale_test_intensity(lam, split.p) * vol for m, lam in models.items()}
    for q in qs:
        for tr in TIME_RANGES:
            subsets = draw_subsets(grid, q, n_subsets, tr, rng)
            for m, lv in lam_test.items():
                scores, covers = score_subsets(lv, split.test, grid, subsets, rng, nominal)
                report.rows.append({"model": m, "q": float(q), "time_range": tr,
                                    "rps": float(scores.mean()), "pic": float(covers.mean()),
                                    "n_subsets": n_subsets})
    if local_q is not None:
        for m, lv in lam_test.items():
            report.local[m] = local_pic(lv, split.test, grid, local_q, n_subsets, rng, nominal)
    return report


def local_pic(lam_test_volume: np.ndarray, test_counts: np.ndarray, grid: SpaceTimeGrid, q: float,
              count: int, rng: np.random.Generator, nominal: float = 0.90) -> np.ndarray:
    """Per spatial cell: coverage rate over every subset (all time ranges) containing it.

    Cells that fall in no subset are NaN.
    """
    hits = np.zeros(grid.n_space)
    seen = np.zeros(grid.n_space)
    for tr in TIME_RANGES:
        subsets = draw_subsets(grid, q, count, tr, rng)
        _, covers = score_subsets(lam_test_volume, test_counts, grid, subsets, rng, nominal)
        for b, c in zip(subsets, covers):
            seen[b.space] += 1
            hits[b.space] += c
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(seen > 0, hits / np.maximum(seen, 1), np.nan)
