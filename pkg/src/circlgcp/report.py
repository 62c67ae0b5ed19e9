"""Posterior summary tables, delimited exports and report figures.

Figures are written with the non-interactive Agg backend; every table can
also be exported as CSV for external plotting.
"""

from __future__ import annotations

import csv
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geomtime import TWO_PI, SpaceTimeGrid, Weekday, unwrap_time  # noqa: E402
from .mcmc import PosteriorChain, inefficiency_factor  # noqa: E402

_ORDER = ("beta", "rho", "mu", "delta", "sigma2", "phi_s", "phi_t", "gamma", "sigma2*phi_s", "sigma2*phi_t")


def _sort_key(name: str):
    base = name.split("[")[0]
    idx = int(name.split("[")[1].rstrip("]")) if "[" in name else 0
    return (_ORDER.index(base) if base in _ORDER else len(_ORDER), idx, name)


def truth_values(truth: dict, chain: PosteriorChain) -> dict:
    """Map a truth dict (``beta``, ``mu``, ``sigma2``, ...) onto the chain's trace names."""
    out = {}
    traces = chain.scalar_traces()
    for name in traces:
        base = name.split("[")[0]
        if base not in truth or "*" in name:
            continue
        v = np.atleast_1d(np.asarray(truth[base], dtype=float))
        idx = int(name.split("[")[1].rstrip("]")) if "[" in name else 0
        out[name] = float(v[idx] if idx < len(v) else v[0])
    if "sigma2" in truth and "sigma2*phi_s" in traces:
        out["sigma2*phi_s"] = float(truth["sigma2"]) * float(truth["phi_s"])
        out["sigma2*phi_t"] = float(truth["sigma2"]) * float(truth["phi_t"])
    return out


def summary_table(chain: PosteriorChain, truth: dict | None = None, level: float = 0.95) -> list[dict]:
    """One row per scalar parameter: true value, mean, central interval and inefficiency factor."""
    tv = truth_values(truth, chain) if truth else {}
    traces = chain.scalar_traces()
    rows = []
    for name in sorted(traces, key=_sort_key):
        x = np.asarray(traces[name], dtype=float)
        lo, hi = chain.interval(name, level)
        ineff = float("nan")
        if len(x) >= 100 and np.ptp(x) > 0:
            ineff = inefficiency_factor(x)
        rows.append({"parameter": name, "true": tv.get(name, float("nan")), "mean": float(x.mean()),
                     "lower": lo, "upper": hi, "if": ineff})
    return rows


def weekday_table(chain: PosteriorChain, grid: SpaceTimeGrid | None = None, level: float = 0.95) -> list[dict]:
    """Posterior of the expected weekly count per weekday class and of ``delta_w``."""
    a = (1.0 - level) / 2.0
    tot = np.asarray(chain.weekday_totals)
    W = tot.shape[1]
    delta = np.asarray(chain.params["delta"]).reshape(len(tot), -1)
    observed = grid.counts.sum(axis=(0, 1)) if grid is not None else None
    rows = []
    for w in range(W):
        dw = delta[:, w if delta.shape[1] == W else 0]
        rows.append({
            "weekday": Weekday(w).label if W == 7 else "all",
            "total_mean": float(tot[:, w].mean()),
            "total_lower": float(np.quantile(tot[:, w], a)),
            "total_upper": float(np.quantile(tot[:, w], 1.0 - a)),
            "observed": float(observed[w]) if observed is not None else float("nan"),
            "delta_mean": float(dw.mean()),
            "delta_lower": float(np.quantile(dw, a)),
            "delta_upper": float(np.quantile(dw, 1.0 - a)),
        })
    return rows


def intensity_surface_rows(intensity: np.ndarray, grid: SpaceTimeGrid) -> list[dict]:
    """Per time cell, spatial cell and weekday class: posterior mean and 95% band of lambda."""
    mean = intensity.mean(axis=0)
    lo, hi = np.quantile(intensity, [0.025, 0.975], axis=0)
    tc = grid.time_centroids
    rows = []
    for t in range(grid.n_time):
        clock = clock_label(grid.time_edges[t])
        for s in range(grid.n_space):
            for w in range(intensity.shape[3]):
                rows.append({"time_cell": t, "time_start": clock, "time_centroid": float(tc[t]),
                             "cell_id": int(grid.cell_ids[s]), "x": float(grid.centroids[s, 0]),
                             "y": float(grid.centroids[s, 1]),
                             "weekday": Weekday(w).label if intensity.shape[3] == 7 else "all",
                             "mean": float(mean[s, t, w]), "q025": float(lo[s, t, w]),
                             "q975": float(hi[s, t, w])})
    return rows


def write_csv(path, rows: list[dict], comment: str | None = None) -> None:
    """Write dict rows; an optional first line ``# comment`` carries provenance."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def format_table(rows: list[dict]) -> str:
    """Plain-text rendering of :func:`summary_table` rows."""
    def f(v):
        return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"
    lines = [f"{'Parameter':<16}{'True':>9}{'Mean':>9}  {'95% CI':<20}{'IF':>8}"]
    for r in rows:
        ci = f"({f(r['lower'])}, {f(r['upper'])})"
        ineff = "-" if math.isnan(r["if"]) else f"{r['if']:.1f}"
        lines.append(f"{r['parameter']:<16}{f(r['true']):>9}{f(r['mean']):>9}  {ci:<20}{ineff:>8}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# figures
# --------------------------------------------------------------------------

def _save(fig, path, description: str | None) -> None:
    meta = {"Description": description} if description else None
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=meta)
    plt.close(fig)


def plot_weekday_panels(rows: list[dict], path, description: str | None = None) -> None:
    """Expected weekly count per weekday (left) and evening uplift ``delta_w`` (right)."""
    labels = [r["weekday"] for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    ax = axes[0]
    m = np.array([r["total_mean"] for r in rows])
    err = np.array([[r["total_mean"] - r["total_lower"] for r in rows],
                    [r["total_upper"] - r["total_mean"] for r in rows]])
    ax.errorbar(x, m, yerr=err, fmt="o", color="k", capsize=3, label="posterior")
    obs = np.array([r["observed"] for r in rows])
    if np.all(np.isfinite(obs)):
        ax.plot(x, obs, "x", color="tab:red", label="observed")
        ax.legend(frameon=False, fontsize=8)
    ax.set_ylabel("expected count")
    ax = axes[1]
    m = np.array([r["delta_mean"] for r in rows])
    err = np.array([[r["delta_mean"] - r["delta_lower"] for r in rows],
                    [r["delta_upper"] - r["delta_mean"] for r in rows]])
    ax.errorbar(x, m, yerr=err, fmt="o", color="k", capsize=3)
    ax.set_ylabel(r"$\delta_w$")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
    fig.tight_layout()
    _save(fig, path, description)


def plot_validation(rows: list[dict], path, nominal: float = 0.9, description: str | None = None) -> None:
    """Mean RPS (top) and PIC (bottom) against relative subset size, one column per time range."""
    ranges = list(dict.fromkeys(r["time_range"] for r in rows))
    models = list(dict.fromkeys(r["model"] for r in rows))
    fig, axes = plt.subplots(2, len(ranges), figsize=(3.2 * len(ranges), 5.5), squeeze=False, sharex=True)
    for j, tr in enumerate(ranges):
        for m in models:
            sel = sorted((r for r in rows if r["model"] == m and r["time_range"] == tr), key=lambda r: r["q"])
            q = [r["q"] for r in sel]
            axes[0, j].plot(q, [r["rps"] for r in sel], "o-", ms=3, label=m)
            axes[1, j].plot(q, [r["pic"] for r in sel], "o-", ms=3, label=m)
        axes[1, j].axhline(nominal, color="grey", lw=0.8, ls="--")
        axes[0, j].set_title(tr, fontsize=9)
        axes[1, j].set_xlabel("q")
        axes[1, j].set_ylim(0, 1.02)
    axes[0, 0].set_ylabel("RPS")
    axes[1, 0].set_ylabel("PIC")
    axes[0, 0].legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path, description)


def plot_traces(chain: PosteriorChain, path, description: str | None = None, max_panels: int = 12) -> None:
    traces = chain.scalar_traces()
    names = sorted(traces, key=_sort_key)[:max_panels]
    ncol = 3
    nrow = max(1, math.ceil(len(names) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(10, 1.8 * nrow), squeeze=False)
    for ax, name in zip(axes.ravel(), names):
        ax.plot(traces[name], lw=0.5, color="k")
        ax.set_title(name, fontsize=8)
        ax.tick_params(labelsize=7)
    for ax in axes.ravel()[len(names):]:
        ax.axis("off")
    fig.tight_layout()
    _save(fig, path, description)


def clock_label(angle: float) -> str:
    h = (unwrap_time(angle % TWO_PI)) % 24.0
    return f"{int(h):02d}:{int(round((h % 1) * 60)) % 60:02d}"
