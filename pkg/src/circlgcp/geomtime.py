"""Planar projection, circular clock time and the space x circular-time grid.

Clock times are wrapped onto the circle with 02:00 at angle 0, so the
"day" used for weekday marks runs from 02:00 to 02:00.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon, box

EARTH_RADIUS_KM = 6371.0
TWO_PI = 2.0 * math.pi
DAY_ORIGIN_HOURS = 2.0


class InputError(ValueError):
    """Raised for malformed or out-of-range user input."""


class Weekday(IntEnum):
    SUN = 0
    MON = 1
    TUE = 2
    WED = 3
    THU = 4
    FRI = 5
    SAT = 6

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class EventRecord:
    easting: float
    northing: float
    clock_angle: float
    weekday: Weekday
    type_label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.clock_angle < TWO_PI:
            raise InputError(f"clock_angle {self.clock_angle} outside [0, 2pi)")


# --------------------------------------------------------------------------
# projection and time
# --------------------------------------------------------------------------

def project(latitude, longitude, reference):
    """Equirectangular projection (km) about ``reference = (lat, lon)``.

    Accepts scalars or arrays. Returns ``(easting, northing)``.
    """
    lat = np.asarray(latitude, dtype=float)
    lon = np.asarray(longitude, dtype=float)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > 90.0):
        raise InputError("latitude outside [-90, 90]")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon) > 180.0):
        raise InputError("longitude outside [-180, 180]")
    lat0, lon0 = reference
    coslat0 = math.cos(math.radians(lat0))
    east = EARTH_RADIUS_KM * coslat0 * np.radians(lon - lon0)
    north = EARTH_RADIUS_KM * np.radians(lat - lat0)
    if east.ndim == 0:
        return float(east), float(north)
    return east, north


def unproject(easting, northing, reference):
    """Inverse of :func:`project`; returns ``(latitude, longitude)``."""
    lat0, lon0 = reference
    coslat0 = math.cos(math.radians(lat0))
    lat = lat0 + np.degrees(np.asarray(northing, dtype=float) / EARTH_RADIUS_KM)
    lon = lon0 + np.degrees(np.asarray(easting, dtype=float) / (EARTH_RADIUS_KM * coslat0))
    if np.ndim(lat) == 0:
        return float(lat), float(lon)
    return lat, lon


def wrap_time(clock):
    """Map hours-of-day in [0, 24) to an angle in [0, 2pi) with 02:00 at 0."""
    c = np.asarray(clock, dtype=float)
    if np.any(~np.isfinite(c)) or np.any((c < 0.0) | (c >= 24.0)):
        raise InputError("clock time must lie in [0, 24)")
    angle = np.mod(c - DAY_ORIGIN_HOURS, 24.0) / 24.0 * TWO_PI
    # guard the rounding edge where mod returns exactly 24
    angle = np.where(angle >= TWO_PI, 0.0, angle)
    return float(angle) if angle.ndim == 0 else angle


def unwrap_time(angle):
    """Inverse of :func:`wrap_time`: angle in [0, 2pi) to hours in [0, 24)."""
    a = np.asarray(angle, dtype=float)
    if np.any((a < 0.0) | (a >= TWO_PI)):
        raise InputError("angle must lie in [0, 2pi)")
    clock = np.mod(a / TWO_PI * 24.0 + DAY_ORIGIN_HOURS, 24.0)
    return float(clock) if clock.ndim == 0 else clock


def assign_day_of_week(timestamp: _dt.datetime) -> Weekday:
    """Weekday under a 02:00-to-02:00 day: small hours belong to the previous date."""
    if not isinstance(timestamp, _dt.datetime):
        raise InputError(f"not a datetime: {timestamp!r}")
    day = timestamp.date()
    clock = timestamp.hour + timestamp.minute / 60.0 + timestamp.second / 3600.0
    if clock < DAY_ORIGIN_HOURS:
        day = day - _dt.timedelta(days=1)
    # date.weekday(): Monday=0 ... Sunday=6
    return Weekday((day.weekday() + 1) % 7)


def circular_distance(t1, t2):
    """Arc length between two angles, in [0, pi]."""
    d = np.abs(np.mod(np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float), TWO_PI))
    d = np.minimum(d, TWO_PI - d)
    return float(d) if d.ndim == 0 else d


# --------------------------------------------------------------------------
# region and grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """Rectangle in projected km, optionally clipped by a simple polygon."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    polygon: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise InputError("region rectangle must have positive area")
        if self.polygon is not None:
            poly = Polygon(self.polygon)
            if not poly.is_valid or not poly.is_simple:
                raise InputError("boundary polygon is not simple")
            if not box(self.xmin, self.ymin, self.xmax, self.ymax).buffer(1e-9).covers(poly):
                raise InputError("boundary polygon leaves the bounding rectangle")

    @classmethod
    def square(cls, side: float, origin: tuple[float, float] = (0.0, 0.0)) -> "Region":
        x0, y0 = origin
        return cls(x0, x0 + side, y0, y0 + side)

    @property
    def shape(self):
        rect = box(self.xmin, self.ymin, self.xmax, self.ymax)
        return rect if self.polygon is None else Polygon(self.polygon)

    @property
    def area(self) -> float:
        return float(self.shape.area)

    def contains(self, x, y) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        inside = (x >= self.xmin) & (x < self.xmax) & (y >= self.ymin) & (y < self.ymax)
        if self.polygon is not None and inside.any():
            poly = self.shape
            shapely.prepare(poly)
            idx = np.flatnonzero(inside)
            inside[idx] = shapely.covers(poly, shapely.points(x[idx], y[idx]))
        return inside


@dataclass
class SpaceTimeGrid:
    """Spatial cells x equal-width circular time cells, with weekday counts.

    ``counts`` has shape ``(n_space, n_time, n_weekdays)``; flattening the
    first two axes puts time fastest (cell ``(s, t)`` -> ``s * n_time + t``).
    """

    region: Region
    nx: int
    ny: int
    cell_ids: np.ndarray          # (N,) lattice index iy * nx + ix of each kept cell
    centroids: np.ndarray         # (N, 2) km
    areas: np.ndarray             # (N,) km^2, clipped
    time_edges: np.ndarray        # (M + 1,) radians, from 0 to 2pi
    counts: np.ndarray            # (N, M, W) int
    rejected: list = field(default_factory=list)

    @property
    def n_space(self) -> int:
        return len(self.areas)

    @property
    def n_time(self) -> int:
        return len(self.time_edges) - 1

    @property
    def n_weekdays(self) -> int:
        return self.counts.shape[2]

    @property
    def n_cells(self) -> int:
        return self.n_space * self.n_time

    @property
    def time_centroids(self) -> np.ndarray:
        return 0.5 * (self.time_edges[:-1] + self.time_edges[1:])

    @property
    def time_widths(self) -> np.ndarray:
        return np.diff(self.time_edges)

    @property
    def volumes(self) -> np.ndarray:
        """Cell volume in km^2 * radians, shape (N, M); identical for each weekday."""
        return np.outer(self.areas, self.time_widths)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @property
    def spacing(self) -> tuple[float, float]:
        """Centroid-to-centroid easting and northing distances between adjacent cells."""
        r = self.region
        return (r.xmax - r.xmin) / self.nx, (r.ymax - r.ymin) / self.ny

    def cell_bounds(self, s: int) -> tuple[float, float, float, float]:
        cid = int(self.cell_ids[s])
        ix, iy = cid % self.nx, cid // self.nx
        dx, dy = self.spacing
        x0 = self.region.xmin + ix * dx
        y0 = self.region.ymin + iy * dy
        return x0, x0 + dx, y0, y0 + dy

    def with_counts(self, counts: np.ndarray) -> "SpaceTimeGrid":
        counts = np.asarray(counts)
        if counts.shape[:2] != (self.n_space, self.n_time):
            raise ValueError(f"counts shape {counts.shape} does not match grid")
        return SpaceTimeGrid(self.region, self.nx, self.ny, self.cell_ids, self.centroids,
                             self.areas, self.time_edges, counts.astype(np.int64), [])

    def locate(self, x, y, t):
        """Spatial and time cell indices for points; -1 where outside the grid."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        dx, dy = self.spacing
        r = self.region
        ix = np.floor((x - r.xmin) / dx).astype(np.int64)
        iy = np.floor((y - r.ymin) / dy).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny) & r.contains(x, y)
        lookup = np.full(self.nx * self.ny, -1, dtype=np.int64)
        lookup[self.cell_ids] = np.arange(self.n_space)
        s = np.full(x.shape, -1, dtype=np.int64)
        s[ok] = lookup[iy[ok] * self.nx + ix[ok]]
        tt = np.searchsorted(self.time_edges, t, side="right") - 1
        tt = np.where((t >= 0) & (t < TWO_PI), np.clip(tt, 0, self.n_time - 1), -1)
        return s, tt

    # ---- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        r = self.region
        return {
            "region": {"xmin": r.xmin, "xmax": r.xmax, "ymin": r.ymin, "ymax": r.ymax,
                       "polygon": None if r.polygon is None else [list(p) for p in r.polygon]},
            "nx": self.nx,
            "ny": self.ny,
            "cells": [
                {"id": int(c), "centroid": [float(a), float(b)], "area": float(ar)}
                for c, (a, b), ar in zip(self.cell_ids, self.centroids, self.areas)
            ],
            "time_edges": [float(e) for e in self.time_edges],
            "counts": self.counts.tolist(),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceTimeGrid":
        rd = d["region"]
        poly = None if rd.get("polygon") is None else tuple(tuple(p) for p in rd["polygon"])
        region = Region(rd["xmin"], rd["xmax"], rd["ymin"], rd["ymax"], poly)
        cells = d["cells"]
        return cls(
            region=region,
            nx=int(d["nx"]),
            ny=int(d["ny"]),
            cell_ids=np.array([c["id"] for c in cells], dtype=np.int64),
            centroids=np.array([c["centroid"] for c in cells], dtype=float).reshape(-1, 2),
            areas=np.array([c["area"] for c in cells], dtype=float),
            time_edges=np.array(d["time_edges"], dtype=float),
            counts=np.array(d["counts"], dtype=np.int64),
        )

    @classmethod
    def from_json(cls, path) -> "SpaceTimeGrid":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_grid(region: Region, nx: int, ny: int, n_time: int,
               events: Iterable[EventRecord] = (), n_weekdays: int = 7) -> SpaceTimeGrid:
    """Lattice of ``nx * ny`` rectangles clipped to the region, with event counts.

    Cells whose intersection with the boundary polygon has zero area are
    dropped; intervals are half-open so boundary points go to the higher
    index. Events that fall outside are returned in ``grid.rejected``.
    ``n_weekdays=1`` pools all weekdays into a single class.
    """
    if nx < 1 or ny < 1 or n_time < 1:
        raise InputError("grid dimensions must be >= 1")
    if n_weekdays not in (1, 7):
        raise InputError("n_weekdays must be 1 (pooled) or 7")
    dx = (region.xmax - region.xmin) / nx
    dy = (region.ymax - region.ymin) / ny
    ids, cents, areas = [], [], []
    shape = region.shape if region.polygon is not None else None
    for iy in range(ny):
        for ix in range(nx):
            x0 = region.xmin + ix * dx
            y0 = region.ymin + iy * dy
            cell = box(x0, y0, x0 + dx, y0 + dy)
            if shape is not None:
                cell = cell.intersection(shape)
                if cell.area <= 0.0:
                    continue
            ids.append(iy * nx + ix)
            c = cell.centroid
            cents.append((c.x, c.y))
            areas.append(cell.area)
    edges = np.linspace(0.0, TWO_PI, n_time + 1)
    grid = SpaceTimeGrid(
        region=region, nx=nx, ny=ny,
        cell_ids=np.array(ids, dtype=np.int64),
        centroids=np.array(cents, dtype=float).reshape(-1, 2),
        areas=np.array(areas, dtype=float),
        time_edges=edges,
        counts=np.zeros((len(ids), n_time, n_weekdays), dtype=np.int64),
    )
    events = list(events)
    if not events:
        return grid
    x = np.array([e.easting for e in events])
    y = np.array([e.northing for e in events])
    t = np.array([e.clock_angle for e in events])
    w = np.array([int(e.weekday) for e in events]) if n_weekdays == 7 else np.zeros(len(events), int)
    s, tt = grid.locate(x, y, t)
    ok = (s >= 0) & (tt >= 0)
    np.add.at(grid.counts, (s[ok], tt[ok], w[ok]), 1)
    grid.rejected = [(i, events[i], "outside region") for i in np.flatnonzero(~ok)]
    return grid


def time_cells_in_range(grid: SpaceTimeGrid, start: float, stop: float) -> np.ndarray:
    """Indices of time cells whose centroid lies in the wrapped interval [start, stop)."""
    c = grid.time_centroids
    if start <= stop:
        sel = (c >= start) & (c < stop)
    else:
        sel = (c >= start) | (c < stop)
    return np.flatnonzero(sel)


def pairwise_space_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def pairwise_time_distances(angles: Sequence[float]) -> np.ndarray:
    a = np.asarray(angles, dtype=float)
    return circular_distance(a[:, None], a[None, :])
