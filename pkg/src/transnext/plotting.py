"""Figures for CLI reports. Rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_stage_costs(report, path, convention: str = "mac") -> Path:
    """Per-stage operation count and parameter count bars."""
    stages = report.stage_totals(convention)
    params: dict[str, int] = {}
    for r in report.rows:
        key = r.module.split(".")[0]
        params[key] = params.get(key, 0) + r.params
    names = list(stages)
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(8, 3))
        a0.bar(names, [stages[n] / 1e9 for n in names], color="tab:blue")
        a0.set_ylabel(f"G ({convention})")
        a0.set_title(f"{report.config.name} @ {report.height}x{report.width}, {report.mode}")
        a1.bar(names, [params[n] / 1e6 for n in names], color="tab:orange")
        a1.set_ylabel("parameters (M)")
        return _save(fig, path)


def plot_bench(results: Sequence, path) -> Path:
    """Median time and scratch bytes per bench case (log scale)."""
    labels = [f"{r.case}\n{r.h}x{r.w}" for r in results]
    colors = ["tab:green" if r.case == "fused" else "tab:red" for r in results]
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(results)), 3))
        a0.bar(labels, [r.ns_per_iter / 1e6 for r in results], color=colors)
        a0.set_ylabel("median ms / iter")
        a1.bar(labels, [max(r.scratch_bytes, 1) for r in results], color=colors)
        a1.set_yscale("log")
        a1.set_ylabel("scratch bytes")
        return _save(fig, path)


def plot_erf(grid: np.ndarray, path, title: str = "effective receptive field") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(grid, cmap="magma", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)
