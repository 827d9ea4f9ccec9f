"""SVG figures for evaluation reports (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_roc(path, curves: Mapping[str, object], targets: Sequence[float] = ()) -> Path:
    """FNR against FPR (log x) for one or more RocReports keyed by label."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, rep in curves.items():
        ok = rep.fpr > 0
        ax.plot(rep.fpr[ok], rep.fnr[ok], label=label, lw=1.4)
    for t in targets:
        ax.axvline(t, color="0.7", lw=0.8, ls=":")
    ax.set_xscale("log")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("false negative rate")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_breakdown(path, bd, title: str = "") -> Path:
    """Heatmap of per-cell FNR; empty cells are left blank."""
    fig, ax = plt.subplots(figsize=(5, 4.4))
    finite = bd.fnr[np.isfinite(bd.fnr)]
    vmax = max(float(finite.max()), 1e-6) if finite.size else 1.0
    im = ax.imshow(np.ma.masked_invalid(bd.fnr), cmap="inferno", vmin=0, vmax=vmax, origin="lower")
    ax.set_xticks(range(len(bd.labels)), bd.labels, rotation=60, fontsize=7)
    ax.set_yticks(range(len(bd.labels)), bd.labels, fontsize=7)
    ax.set_xlabel(f"{bd.axis} of sample b")
    ax.set_ylabel(f"{bd.axis} of sample a")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, label="FNR")
    return _save(fig, path)


def plot_ablation(path, medians: Mapping[str, Sequence[float]], targets: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = list(medians)
    width = 0.8 / max(len(targets), 1)
    for k, t in enumerate(targets):
        ax.bar(np.arange(len(names)) + k * width, [medians[n][k] for n in names], width, label=f"FPR {t:g}")
    ax.set_xticks(np.arange(len(names)) + width * (len(targets) - 1) / 2, names)
    ax.set_ylabel("median FNR")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_loss(path, epochs: Sequence, **series: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, vals in series.items():
        ax.plot(epochs, vals, marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)
