"""Command line front end.

Subcommands: ingest, simulate, fit, validate, summarize. Exit status 0 on
success, 1 for user errors (bad config, bad input) and 2 for numerical
failures; errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import report
from .config import RunConfig
from .covariance import CovarianceParams, ParameterError
from .geomtime import InputError, SpaceTimeGrid, build_grid
from .gp import NumericalError
from .ingest import ConfigError, ingest, write_events, write_rejections
from .mcmc import PosteriorChain, fit_lgcp, fit_nhpp
from .model import ModelState, TemporalParams
from .simulate import OverflowGuardError, SimConfig, simulate_pattern
from .validate import evaluate, p_thin

log = logging.getLogger("circlgcp")

EXIT_OK, EXIT_USER, EXIT_NUMERICAL = 0, 1, 2


class Run:
    """Shared state of one CLI invocation: resolved config, output dir and seeds."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.data["paths"]["output"])
        self.out.mkdir(parents=True, exist_ok=True)

    def rng(self, stream: int) -> np.random.Generator:
        """Independent generator per pipeline stage, reproducible from the seed alone."""
        return np.random.default_rng(np.random.SeedSequence(self.cfg.seed, spawn_key=(stream,)))

    @property
    def provenance(self) -> dict:
        return {"seed": self.cfg.seed, "config": self.cfg.data}

    @property
    def comment(self) -> str:
        return "circlgcp " + json.dumps(self.provenance, sort_keys=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, obj: dict) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8") as fh:
            json.dump({**obj, **self.provenance}, fh, indent=1, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return p


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serialisable: {type(x).__name__}")


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def _empty_grid(cfg: RunConfig, events=()) -> SpaceTimeGrid:
    g = cfg.data["grid"]
    return build_grid(cfg.region(), int(g["nx"]), int(g["ny"]), int(g["n_time"]), events,
                      n_weekdays=int(g["n_weekdays"]))


def _ingest(run: Run):
    cfg = run.cfg
    src = cfg.data["paths"]["events"]
    if not src:
        raise ConfigError("paths.events is required")
    region = cfg.region()
    res = ingest(src, cfg.reference, region, cfg.data["crime_types"])
    grid = _empty_grid(cfg, res.events)
    return res, grid


def _load_grid(run: Run) -> SpaceTimeGrid:
    p = run.cfg.data["paths"]["grid"]
    if p:
        return SpaceTimeGrid.from_json(p)
    _, grid = _ingest(run)
    return grid


def cmd_ingest(run: Run) -> dict:
    res, grid = _ingest(run)
    grid.to_json(run.path("grid.json"))
    write_rejections(run.path("rejections.csv"), res.rejections)
    summary = {"accepted": len(res.events), "rejected": len(res.rejections),
               "skipped_type": res.skipped_type, "binned": int(grid.counts.sum()),
               "outside_grid": len(grid.rejected)}
    run.write_json("ingest.json", summary)
    return summary


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _truth_state(cfg: RunConfig, grid: SpaceTimeGrid, variant: str) -> ModelState:
    tr = cfg.data["simulate"]["truth"]
    lms = cfg.landmarks(grid.spacing)
    beta = np.atleast_1d(np.asarray(tr["beta"], dtype=float))
    if len(beta) != len(lms):
        raise ConfigError(f"simulate.truth.beta has {len(beta)} entries for {len(lms)} landmarks")
    W = grid.n_weekdays
    mu = np.broadcast_to(np.asarray(tr["mu"], dtype=float), (W,)).copy()
    delta = np.broadcast_to(np.asarray(tr["delta"], dtype=float), (W,)).copy()
    cov = None
    if variant != "nhpp":
        md = cfg.data["model"]
        cov = CovarianceParams(sigma2=float(tr["sigma2"]), phi_s=float(tr["phi_s"]), phi_t=float(tr["phi_t"]),
                               alpha=float(md["alpha"]), cauchy_shape=float(md["cauchy_shape"]),
                               gamma=float(tr["gamma"]) if variant == "lgcp-nonsep" else 0.0)
    return ModelState(beta=beta, landmarks=lms, temporal=TemporalParams(mu, delta), cov=cov)


def cmd_simulate(run: Run) -> dict:
    cfg = run.cfg
    sim = cfg.data["simulate"]
    variant = sim["variant"]
    grid = _empty_grid(cfg)
    truth = _truth_state(cfg, grid, variant)
    sc = SimConfig(truth=truth, grid=grid, emit_exact_points=bool(sim["emit_points"]),
                   separable=variant != "lgcp-nonsep", cox=variant != "nhpp")
    res = simulate_pattern(sc, run.rng(0))
    grid = grid.with_counts(res.counts)
    grid.to_json(run.path("grid.json"))
    truth_out = {"variant": variant, "beta": truth.beta, "rho": truth.rho,
                 "mu": truth.temporal.mu, "delta": truth.temporal.delta}
    if truth.cov is not None:
        truth_out.update(truth.cov.to_dict())
        truth_out["z"] = res.truth.field.z
    run.write_json("truth.json", truth_out)
    if res.points is not None:
        write_events(run.path("events.csv"), res.points, cfg.reference, sim["type_label"], run.comment)
    return {"events": int(res.counts.sum())}


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def _chain_job(args):
    grid, lms, rho, priors, cov_config, mcfg, variant, seed_key = args
    rng = np.random.default_rng(np.random.SeedSequence(seed_key[0], spawn_key=seed_key[1]))
    if variant == "nhpp":
        return fit_nhpp(grid, lms, priors, mcfg.iters, rng, mcfg)
    return fit_lgcp(grid, lms, rho, priors, cov_config, mcfg.iters, rng, mcfg)


def _fan_out(jobs, threads: int):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_chain_job, jobs))
    return [_chain_job(j) for j in jobs]


def _fit_models(run: Run, grid: SpaceTimeGrid, variants, stream: int, store_intensity=True):
    """Fit each variant; Cox variants use the Poisson-stage landmark correlations
    unless they are fixed in the config. Returns ``{variant: [chains]}`` and rho."""
    cfg = run.cfg
    lms = cfg.landmarks(grid.spacing)
    priors = cfg.priors()
    n_chains = int(cfg.data["mcmc"]["chains"])
    threads = int(cfg.data["threads"])
    out = {}
    rho = cfg.rho_override()
    need_nhpp = "nhpp" in variants or (rho is None and lms and any(v != "nhpp" for v in variants))
    if need_nhpp:
        mcfg = cfg.mcmc(store_intensity and "nhpp" in variants)
        if "nhpp" not in variants:
            mcfg.iters = cfg.nhpp_iters()
            mcfg.burn_in = None
        jobs = [(grid, lms, None, priors, None, mcfg, "nhpp", (cfg.seed, (stream, 0, c))) for c in range(n_chains)]
        out["nhpp"] = _fan_out(jobs, threads)
        if rho is None and lms:
            rho = np.mean([ch.rho_plugin() for ch in out["nhpp"]], axis=0).tolist()
    if rho is None:
        rho = [0.0] * len(lms)
    for k, v in enumerate(v for v in variants if v != "nhpp"):
        mcfg = cfg.mcmc(store_intensity)
        jobs = [(grid, lms, rho, priors, cfg.cov_config(v), mcfg, v, (cfg.seed, (stream, k + 1, c)))
                for c in range(n_chains)]
        out[v] = _fan_out(jobs, threads)
    return out, rho


def _chain_name(variant: str, c: int, n: int) -> str:
    return f"chain_{variant}.jsonl" if n == 1 else f"chain_{variant}_{c}.jsonl"


def cmd_fit(run: Run) -> dict:
    cfg = run.cfg
    grid = _load_grid(run)
    variant = cfg.variant
    fits, rho = _fit_models(run, grid, [variant], stream=1)
    written = []
    for v, chains in fits.items():
        for c, ch in enumerate(chains):
            name = _chain_name(v, c, len(chains))
            ch.to_jsonl(run.path(name), extra={**run.provenance, "chain_index": c})
            written.append(name)
    chains = fits[variant]
    if chains[0].intensity is not None:
        lam = np.concatenate([ch.intensity for ch in chains])
        np.savez_compressed(run.path(f"intensity_{variant}.npz"), intensity=lam,
                            provenance=np.array(json.dumps(run.provenance, sort_keys=True)))
        report.write_csv(run.path(f"intensity_surface_{variant}.csv"),
                         report.intensity_surface_rows(lam, grid), run.comment)
    rows = report.summary_table(chains[0])
    report.write_csv(run.path(f"summary_{variant}.csv"), rows, run.comment)
    run.write_json("fit.json", {"variant": variant, "rho": rho, "chains": written,
                                "acceptance": chains[0].acceptance})
    return {"chains": written, "rho": rho}


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

def cmd_validate(run: Run) -> dict:
    cfg = run.cfg
    v = cfg.data["validation"]
    grid = _load_grid(run)
    split = p_thin(grid.counts, float(v["p"]), run.rng(2))
    train = grid.with_counts(split.train)
    fits, rho = _fit_models(run, train, list(v["models"]), stream=3)
    models = {m: np.concatenate([ch.intensity for ch in fits[m]]) for m in v["models"]}
    rep = evaluate(models, split, grid, [float(q) for q in v["q"]], int(v["subsets"]), run.rng(4),
                   nominal=float(v["nominal"]), local_q=v["local_q"])
    report.write_csv(run.path("validation.csv"), rep.rows, run.comment)
    local_rows = []
    for m, vals in rep.local.items():
        for s in range(grid.n_space):
            local_rows.append({"model": m, "cell_id": int(grid.cell_ids[s]), "x": float(grid.centroids[s, 0]),
                               "y": float(grid.centroids[s, 1]), "local_pic": float(vals[s])})
    if local_rows:
        report.write_csv(run.path("local_pic.csv"), local_rows, run.comment)
    report.plot_validation(rep.rows, run.path("validation.png"), float(v["nominal"]), run.comment)
    run.write_json("validation.json", {"rows": rep.rows, "rho": rho,
                                       "n_train": int(split.train.sum()), "n_test": int(split.test.sum())})
    return {"rows": len(rep.rows)}


# --------------------------------------------------------------------------
# summarize
# --------------------------------------------------------------------------

def cmd_summarize(run: Run) -> dict:
    cfg = run.cfg
    paths = cfg.data["paths"]
    src = paths["chain"] or run.path(_chain_name(cfg.variant, 0, 1))
    chain = PosteriorChain.from_jsonl(src)
    truth = None
    if paths["truth"]:
        with open(paths["truth"], encoding="utf-8") as fh:
            truth = json.load(fh)
    grid = SpaceTimeGrid.from_json(paths["grid"]) if paths["grid"] else None
    rows = report.summary_table(chain, truth)
    report.write_csv(run.path("summary.csv"), rows, run.comment)
    (run.path("summary.txt")).write_text(report.format_table(rows) + "\n", encoding="utf-8")
    wk = report.weekday_table(chain, grid)
    report.write_csv(run.path("weekday.csv"), wk, run.comment)
    report.plot_weekday_panels(wk, run.path("weekday.png"), run.comment)
    report.plot_traces(chain, run.path("traces.png"), run.comment)
    return {"parameters": len(rows)}


COMMANDS = {"ingest": cmd_ingest, "simulate": cmd_simulate, "fit": cmd_fit,
            "validate": cmd_validate, "summarize": cmd_summarize}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="circlgcp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="worker processes for chains")
    p.add_argument("--output", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, threads=args.threads, output=args.output)
        run = Run(cfg)
        result = COMMANDS[args.command](run)
    except (NumericalError, OverflowGuardError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (InputError, ConfigError, ParameterError, OSError, yaml.YAMLError, ValueError, KeyError) as exc:
        return _fail(EXIT_USER, exc)
    print(json.dumps({"command": args.command, "output": str(run.out), **result}, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
