"""Standard figures from the engine's versioned CSV outputs.

Five figure kinds, one per CSV schema:

  population  population.csv   mean population vs time, optional analytic overlay
  picard      iterates.csv     distance decay per iteration (log scale)
  chaos       chaos.csv        distance vs system size, log-log with error bars
  martingale  battery.csv      z-scores per statistic with the +-4 band
  stability   stability.csv    coupled distance vs perturbation size

Rendering is a pure function of the CSV content and the spec: the returned
summary contains the plotted arrays, so two renders of the same input can
be compared exactly (pixel layout may vary with the backend).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["FigureSpec", "SchemaError", "render", "FIGURE_KINDS"]

FIGURE_KINDS = ("population", "picard", "chaos", "martingale", "stability")

_REQUIRED_COLUMNS = {
    "population": ["time", "mean_pop", "se_pop"],
    "picard": ["iter", "w1_to_prev"],
    "chaos": ["n", "w1_mean", "w1_se", "replicas"],
    "martingale": ["phi_id", "h_id", "s", "t", "value", "se", "z"],
    "stability": ["eps", "lhs", "se", "term_b", "term_sigma", "term_gamma",
                  "term_p", "term_init"],
}


class SchemaError(ValueError):
    """The input CSV does not match the versioned schema; names the column."""


@dataclass(frozen=True)
class FigureSpec:
    """One figure: input CSV, figure kind, output image, optional overlay.

    For population figures, ``n0`` and ``rate`` overlay the analytic curve
    n0 * exp(rate * t).
    """

    kind: str
    input: str
    output: str
    n0: float | None = None
    rate: float | None = None
    title: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind '{self.kind}' "
                              f"(choose from {', '.join(FIGURE_KINDS)})")


def _read_table(path: str, kind: str) -> dict[str, list[str]]:
    file = Path(path)
    if not file.exists():
        raise SchemaError(f"input file '{path}' not found")
    with open(file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"'{path}' is empty (no header row)")
        for column in _REQUIRED_COLUMNS[kind]:
            if column not in reader.fieldnames:
                raise SchemaError(f"missing column '{column}' in '{path}'")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"'{path}' has a header but no data rows")
    return {name: [row[name] for row in rows] for name in reader.fieldnames}


def _floats(table: dict, column: str) -> np.ndarray:
    return np.array([float(v) for v in table[column]])


def _new_axes(title: str | None):
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _render_population(spec: FigureSpec, table: dict, ax) -> dict:
    t = _floats(table, "time")
    mean = _floats(table, "mean_pop")
    se = _floats(table, "se_pop")
    ax.plot(t, mean, "o-", ms=3, lw=1, label="MC mean", color="tab:blue")
    ax.fill_between(t, mean - 2 * se, mean + 2 * se, alpha=0.25, color="tab:blue",
                    label="±2 SE")
    summary = {"time": t.tolist(), "mean": mean.tolist(), "se": se.tolist()}
    if spec.n0 is not None and spec.rate is not None:
        analytic = spec.n0 * np.exp(spec.rate * t)
        ax.plot(t, analytic, "k--", lw=1.5,
                label=f"{spec.n0:g}·exp({spec.rate:g}·t)")
        gaps = np.abs(mean - analytic)
        rel = gaps / np.maximum(analytic, 1e-12)
        summary["analytic"] = analytic.tolist()
        summary["max_rel_gap"] = float(rel.max())
        # worst gap measured in its own standard-error units
        positive_se = np.maximum(se, 1e-12)
        summary["max_gap_over_se"] = float((gaps / positive_se).max())
    ax.set_xlabel("time")
    ax.set_ylabel("mean population")
    ax.legend()
    return summary


def _render_picard(spec: FigureSpec, table: dict, ax) -> dict:
    iters = _floats(table, "iter")
    dists = _floats(table, "w1_to_prev")
    positive = dists > 0
    ax.semilogy(iters[positive], dists[positive], "o-", color="tab:red",
                label="distance to previous iterate")
    if (~positive).any():
        floor = dists[positive].min() / 10 if positive.any() else 1e-12
        ax.semilogy(iters[~positive], np.full((~positive).sum(), floor), "v",
                    color="tab:gray", label="exactly zero")
    ax.set_xlabel("iteration")
    ax.set_ylabel("successive distance")
    ax.legend()
    return {"iter": iters.tolist(), "w1_to_prev": dists.tolist()}


def _render_chaos(spec: FigureSpec, table: dict, ax) -> dict:
    n = _floats(table, "n")
    mean = _floats(table, "w1_mean")
    se = _floats(table, "w1_se")
    ax.errorbar(n, mean, yerr=se, fmt="o-", capsize=3, color="tab:green",
                label="mean ± SE over replicas")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("system size n")
    ax.set_ylabel("distance to fixed point")
    ax.legend()
    return {"n": n.tolist(), "w1_mean": mean.tolist(), "w1_se": se.tolist()}


def _render_martingale(spec: FigureSpec, table: dict, ax) -> dict:
    z = _floats(table, "z")
    labels = [f"{p}|{h}" for p, h in zip(table["phi_id"], table["h_id"])]
    x = np.arange(len(z))
    ax.bar(x, z, color=["tab:blue" if abs(v) <= 4 else "tab:red" for v in z])
    ax.axhline(4, color="k", ls="--", lw=1)
    ax.axhline(-4, color="k", ls="--", lw=1)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("z-score")
    return {"labels": labels, "z": z.tolist(), "max_abs_z": float(np.abs(z).max())}


def _render_stability(spec: FigureSpec, table: dict, ax) -> dict:
    eps = _floats(table, "eps")
    lhs = _floats(table, "lhs")
    se = _floats(table, "se")
    ax.errorbar(eps, lhs, yerr=se, fmt="o-", capsize=3, color="tab:purple",
                label="coupled distance")
    nonzero = eps > 0
    if nonzero.any() and lhs[nonzero][0] > 0:
        slope = lhs[nonzero][0] / eps[nonzero][0]
        ref = slope * eps
        ax.plot(eps, ref, "k--", lw=1, label="linear reference")
    ax.set_xlabel("perturbation size")
    ax.set_ylabel("mean pathwise distance")
    ax.legend()
    return {"eps": eps.tolist(), "lhs": lhs.tolist(), "se": se.tolist()}


_RENDERERS = {
    "population": _render_population,
    "picard": _render_picard,
    "chaos": _render_chaos,
    "martingale": _render_martingale,
    "stability": _render_stability,
}


def render(spec: FigureSpec) -> dict:
    """Render one figure; returns the plotted data as a summary dict."""
    table = _read_table(spec.input, spec.kind)
    fig, ax = _new_axes(spec.title or spec.kind)
    try:
        summary = _RENDERERS[spec.kind](spec, table, ax)
        out = Path(spec.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=120, bbox_inches="tight")
    finally:
        plt.close(fig)
    summary["kind"] = spec.kind
    summary["output"] = str(spec.output)
    return summary
