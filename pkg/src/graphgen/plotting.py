"""Figures written to files: training curves, degree histograms, bias sweeps."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .graphcore import Graph  # noqa: E402
from .metrics import degree_histogram  # noqa: E402

__all__ = ["smooth", "plot_training_curves", "plot_degree_histograms", "plot_bias_sweep"]


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if window <= 1 or v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def plot_training_curves(curves: Mapping[str, Sequence[tuple[int, float]]], path,
                         window: int = 50, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, curve in curves.items():
        steps = [s for s, _ in curve]
        ax.plot(steps, smooth([v for _, v in curve], window), label=label)
    ax.set_xlabel("training step")
    ax.set_ylabel("NLL per graph")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_degree_histograms(sets: Mapping[str, Sequence[Graph]], path,
                           title: str | None = None) -> Path:
    hists = {k: degree_histogram(v) for k, v in sets.items()}
    top = max((max(h) for h in hists.values() if h), default=0)
    degrees = np.arange(top + 1)
    width = 0.8 / max(len(hists), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, (label, h) in enumerate(hists.items()):
        total = sum(h.values()) or 1
        ax.bar(degrees + i * width, [h.get(d, 0) / total for d in degrees], width, label=label)
    ax.set_xlabel("node degree")
    ax.set_ylabel("frequency")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bias_sweep(counts: Mapping[float, Sequence[int]], path, quantity: str = "node count",
                    title: str | None = None) -> Path:
    """One histogram per bias value of a per-sample quantity."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    top = max((max(v) for v in counts.values() if len(v)), default=0)
    bins = np.arange(top + 2) - 0.5
    for delta, vals in sorted(counts.items()):
        ax.hist(vals, bins=bins, histtype="step", density=True,
                label=f"shift {delta:+g} (mean {np.mean(vals):.2f})")
    ax.set_xlabel(quantity)
    ax.set_ylabel("frequency")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
