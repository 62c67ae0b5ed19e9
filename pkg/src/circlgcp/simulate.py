"""Forward simulation of Poisson and log Gaussian Cox patterns on the grid."""

from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass

import numpy as np

from .geomtime import TWO_PI, SpaceTimeGrid, Weekday
from .gp import WhitenedField, assemble_factor, sample_prior_field
from .model import ModelState, log_intensity_grid

MAX_CELL_MEAN = 1e9
# 2012-01-01 was a Sunday; simulated dates fall in that year
BASE_SUNDAY = _dt.date(2012, 1, 1)


class OverflowGuardError(RuntimeError):
    pass


@dataclass
class SimConfig:
    truth: ModelState
    grid: SpaceTimeGrid
    seed: int | None = None
    emit_exact_points: bool = False
    separable: bool = True
    cox: bool = True


@dataclass
class SimPoint:
    easting: float
    northing: float
    second: int        # seconds after 02:00, in [0, 86400)
    weekday: int
    week: int

    @property
    def clock_angle(self) -> float:
        return self.second / 86400.0 * TWO_PI

    def timestamp(self) -> _dt.datetime:
        day = BASE_SUNDAY + _dt.timedelta(days=7 * self.week + self.weekday)
        return _dt.datetime.combine(day, _dt.time(2)) + _dt.timedelta(seconds=self.second)


@dataclass
class SimResult:
    counts: np.ndarray
    truth: ModelState
    points: list | None = None


def _draw_field(cfg: SimConfig, rng) -> ModelState:
    t = cfg.truth
    if not cfg.cox or t.field is not None:
        return t
    factor = assemble_factor(cfg.grid, t.cov, cfg.separable)
    fld = sample_prior_field(factor, rng)
    return ModelState(beta=t.beta, landmarks=t.landmarks, temporal=t.temporal, cov=t.cov,
                      field=fld, meta=dict(t.meta))


def _uniform_in_cell(grid: SpaceTimeGrid, s: int, n: int, rng, margin: float = 1e-4):
    x0, x1, y0, y1 = grid.cell_bounds(s)
    out = np.empty((0, 2))
    while len(out) < n:
        k = max(2 * (n - len(out)), 8)
        pts = np.column_stack([rng.uniform(x0 + margin, x1 - margin, k),
                               rng.uniform(y0 + margin, y1 - margin, k)])
        if grid.region.polygon is not None:
            sidx, _ = grid.locate(pts[:, 0], pts[:, 1], np.zeros(k))
            pts = pts[sidx == s]
        out = np.vstack([out, pts])
    return out[:n]


def _seconds_in_slice(grid: SpaceTimeGrid, t: int, n: int, rng) -> np.ndarray:
    lo = grid.time_edges[t] / TWO_PI * 86400.0
    hi = grid.time_edges[t + 1] / TWO_PI * 86400.0
    first, last = math.floor(lo) + 1, math.ceil(hi) - 1
    if last < first:
        raise ValueError("time cells narrower than two seconds cannot be emitted")
    return rng.integers(first, last + 1, size=n)


def simulate_pattern(cfg: SimConfig, rng: np.random.Generator | None = None) -> SimResult:
    """Draw the field once (shared by weekdays), then Poisson counts per cell.

    With ``emit_exact_points`` each event is placed uniformly within its
    spatial cell and at a whole second uniformly within its time slice.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    truth = _draw_field(cfg, rng)
    grid = cfg.grid
    mean = np.exp(log_intensity_grid(grid, truth)) * grid.volumes[:, :, None]
    if not np.all(mean <= MAX_CELL_MEAN):
        raise OverflowGuardError("expected cell count exceeds 1e9")
    counts = rng.poisson(mean)
    points = None
    if cfg.emit_exact_points:
        points = []
        for s, t, w in zip(*np.nonzero(counts)):
            c = int(counts[s, t, w])
            xy = _uniform_in_cell(grid, int(s), c, rng)
            secs = _seconds_in_slice(grid, int(t), c, rng)
            weeks = rng.integers(0, 52, size=c)
            for (x, y), sec, wk in zip(xy, secs, weeks):
                wd = int(w) if grid.n_weekdays == 7 else int(rng.integers(0, 7))
                points.append(SimPoint(float(x), float(y), int(sec), wd, int(wk)))
    return SimResult(counts=counts, truth=truth, points=points)


def intensity_volume(chain, grid: SpaceTimeGrid) -> np.ndarray:
    """``(L, N, M, W)`` expected counts ``lambda * volume`` for every stored draw."""
    if chain.intensity is None:
        raise ValueError("chain was run without storing intensities")
    return chain.intensity * grid.volumes[None, :, :, None]


def posterior_predictive_counts(chain, grid: SpaceTimeGrid, cells, rng: np.random.Generator,
                                scale: float = 1.0) -> np.ndarray:
    """One Poisson count per stored draw for the union of ``cells``.

    ``cells`` is a boolean ``(N, M)`` mask or a sequence of flat indices
    ``s * M + t``; all weekdays are included.
    """
    mask = np.zeros(grid.n_space * grid.n_time, dtype=bool)
    cells = np.asarray(cells)
    if cells.dtype == bool:
        mask = cells.reshape(-1)
    elif cells.size:
        mask[cells.astype(int)] = True
    lam = intensity_volume(chain, grid).sum(axis=3).reshape(chain.n_draws, -1)
    means = scale * lam[:, mask].sum(axis=1)
    return rng.poisson(means)


def weekday_name(w: int) -> str:
    return Weekday(w).label
