"""Run configuration: YAML file, environment overrides and resolved defaults.

Environment variables ``CIRCLGCP_<SECTION>__<KEY>=value`` override file
values; the value is parsed as YAML, so ``CIRCLGCP_MCMC__ITERS=500`` gives
an integer and ``CIRCLGCP_VALIDATION__Q='[0.02, 0.1]'`` a list.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict

import yaml

from .geomtime import Region, project
from .ingest import ConfigError
from .mcmc import CovConfig, MCMCConfig, PriorSpec
from .model import LandmarkSpec

ENV_PREFIX = "CIRCLGCP_"
VARIANTS = ("nhpp", "lgcp-sep", "lgcp-nonsep")

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "paths": {"events": None, "output": "circlgcp-out", "grid": None, "chain": None, "truth": None},
    "region": {
        "reference": [37.7749, -122.4194],   # (lat, lon) of the projection origin
        "bounds_km": None,                   # [xmin, xmax, ymin, ymax] in projected km
        "polygon": None,                     # list of [lat, lon] vertices
    },
    "grid": {"nx": 20, "ny": 20, "n_time": 48, "n_weekdays": 7},
    "landmarks": [],                         # {name, lat, lon[, rho]}
    "crime_types": None,
    "model": {"variant": "lgcp-sep", "alpha": 1.0, "cauchy_shape": 1.0, "tie_weekdays": False},
    "priors": {k: v for k, v in asdict(PriorSpec()).items()},
    "mcmc": {"iters": 20000, "burn_in": None, "thin": 50, "chains": 1, "nhpp_iters": None,
             "store_intensity": True},
    "validation": {"p": 0.5, "q": [0.02, 0.04, 0.06, 0.08, 0.1], "subsets": 1000, "nominal": 0.9,
                   "local_q": 0.05, "models": ["nhpp", "lgcp-sep"]},
    "simulate": {
        "variant": "lgcp-sep",
        "emit_points": True,
        "type_label": "simulated",
        "truth": {"beta": [3.0, 3.0], "mu": 1.0, "delta": 0.5, "sigma2": 3.0, "phi_s": 0.02,
                  "phi_t": 0.1, "gamma": 0.8},
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    over: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = over
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return over


class RunConfig:
    """Resolved configuration; ``data`` is the plain nested dict echoed into outputs."""

    def __init__(self, data: dict):
        self.data = data
        self.validate()

    @classmethod
    def load(cls, path=None, environ=None, **cli) -> "RunConfig":
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
            if not isinstance(user, dict):
                raise ConfigError("config file must hold a mapping")
            data = _merge(data, user)
        data = _merge(data, env_overrides(environ))
        if cli.get("seed") is not None:
            data["seed"] = int(cli["seed"])
        if cli.get("threads") is not None:
            data["threads"] = int(cli["threads"])
        if cli.get("output") is not None:
            data["paths"]["output"] = str(cli["output"])
        return cls(data)

    def validate(self) -> None:
        d = self.data
        for section in ("model", "simulate"):
            if d[section]["variant"] not in VARIANTS:
                raise ConfigError(f"{section}.variant must be one of {VARIANTS}")
        g = d["grid"]
        for k in ("nx", "ny", "n_time"):
            if int(g[k]) < 1:
                raise ConfigError(f"grid.{k} must be >= 1")
        if int(g["n_weekdays"]) not in (1, 7):
            raise ConfigError("grid.n_weekdays must be 1 or 7")
        m = d["mcmc"]
        if int(m["iters"]) < 1 or int(m["thin"]) < 1 or int(m["chains"]) < 1:
            raise ConfigError("mcmc.iters, mcmc.thin and mcmc.chains must be >= 1")
        if m["burn_in"] is not None and not 0 <= int(m["burn_in"]) < int(m["iters"]):
            raise ConfigError("mcmc.burn_in must lie in [0, iters)")
        v = d["validation"]
        if not 0.0 < float(v["p"]) < 1.0:
            raise ConfigError("validation.p must lie in (0, 1)")
        if any(not 0.0 < float(q) <= 1.0 for q in v["q"]):
            raise ConfigError("validation.q entries must lie in (0, 1]")
        for name in v["models"]:
            if name not in VARIANTS:
                raise ConfigError(f"validation model {name!r} is not a known variant")
        for i, lm in enumerate(d["landmarks"]):
            for k in ("lat", "lon"):
                if k not in lm:
                    raise ConfigError(f"landmark {i} lacks {k!r}")
        if int(d["threads"]) < 1:
            raise ConfigError("threads must be >= 1")

    # ---- typed views ------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def variant(self) -> str:
        return self.data["model"]["variant"]

    @property
    def reference(self) -> tuple[float, float]:
        lat, lon = self.data["region"]["reference"]
        return float(lat), float(lon)

    def region(self) -> Region:
        r = self.data["region"]
        poly = None
        if r["polygon"]:
            poly = tuple(project(float(lat), float(lon), self.reference) for lat, lon in r["polygon"])
        if r["bounds_km"]:
            xmin, xmax, ymin, ymax = (float(v) for v in r["bounds_km"])
        elif poly is not None:
            xs, ys = zip(*poly)
            xmin, xmax, ymin, ymax = min(xs), max(xs), min(ys), max(ys)
        else:
            raise ConfigError("region needs bounds_km or polygon")
        return Region(xmin, xmax, ymin, ymax, polygon=poly)

    def priors(self) -> PriorSpec:
        return PriorSpec(**{k: float(v) for k, v in self.data["priors"].items()})

    def landmarks(self, spacing: tuple[float, float]) -> list[LandmarkSpec]:
        """Landmark kernels with scales equal to the centroid spacing of the grid."""
        out = []
        for i, lm in enumerate(self.data["landmarks"]):
            loc = project(float(lm["lat"]), float(lm["lon"]), self.reference)
            out.append(LandmarkSpec(loc, spacing[0], spacing[1], float(lm.get("rho") or 0.0),
                                    str(lm.get("name", f"L{i + 1}"))))
        return out

    def rho_override(self):
        """Landmark correlations given in the config, or None if any is missing."""
        vals = [lm.get("rho") for lm in self.data["landmarks"]]
        if not vals or any(v is None for v in vals):
            return None
        return [float(v) for v in vals]

    def mcmc(self, store_intensity: bool | None = None) -> MCMCConfig:
        m = self.data["mcmc"]
        return MCMCConfig(iters=int(m["iters"]),
                          burn_in=None if m["burn_in"] is None else int(m["burn_in"]),
                          thin=int(m["thin"]),
                          store_intensity=bool(m["store_intensity"] if store_intensity is None
                                               else store_intensity),
                          tie_weekdays=bool(self.data["model"]["tie_weekdays"]))

    def nhpp_iters(self) -> int:
        m = self.data["mcmc"]
        return int(m["nhpp_iters"] or m["iters"])

    def cov_config(self, variant: str | None = None) -> CovConfig:
        md = self.data["model"]
        variant = variant or self.variant
        return CovConfig(separable=variant != "lgcp-nonsep", alpha=float(md["alpha"]),
                         cauchy_shape=float(md["cauchy_shape"]))

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True)
