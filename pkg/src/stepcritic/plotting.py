"""Figures written next to the delimited reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "stepcritic",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_iterations(iterations: Sequence[int], accuracy: Sequence[float],
                    n_refine: Sequence[int | None], path: str | Path) -> Path:
    """Accuracy (line, left axis) and refinement demand (bars, right axis)
    per actor-critic iteration."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ax.plot(iterations, [100 * a for a in accuracy], marker="o", color="tab:blue", label="accuracy")
        ax.set_xlabel("refinement iteration")
        ax.set_ylabel("accuracy (%)", color="tab:blue")
        ax.set_xticks(list(iterations))
        twin = ax.twinx()
        xs = [i for i, n in zip(iterations, n_refine) if n is not None]
        ns = [n for n in n_refine if n is not None]
        twin.bar(xs, ns, width=0.4, alpha=0.35, color="tab:orange", label="needs refinement")
        twin.set_ylabel("questions flagged", color="tab:orange")
        ax.set_zorder(twin.get_zorder() + 1)
        ax.patch.set_visible(False)
        return _save(fig, path)


def plot_success_histogram(histogram: dict[int, int], keep_threshold: int, path: str | Path) -> Path:
    """Distribution of successful refinements per negative sample, with the
    keep threshold marked."""
    keys = sorted(histogram)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        colors = ["tab:green" if k >= keep_threshold else "tab:gray" for k in keys]
        ax.bar(keys, [histogram[k] for k in keys], color=colors)
        ax.axvline(keep_threshold - 0.5, color="black", linestyle="--", linewidth=0.8)
        ax.set_xlabel("correct refinements")
        ax.set_ylabel("samples")
        ax.set_xticks(keys)
        return _save(fig, path)
