"""SVG figures for reports.  Rendering uses the non-interactive Agg backend
with fixed metadata so identical inputs give identical files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bt import BTFitReport  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "pairwise-iqa", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def bt_fit_panels(panels: Sequence[tuple[str, np.ndarray, np.ndarray, BTFitReport]],
                  path: str | Path) -> Path:
    """Ground-truth vs estimated probability, one panel per setting, with the
    fitted line and per-bin interquartile bands."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    for ax, (title, gt, est, rep) in zip(axes[0], panels):
        ax.scatter(gt, est, s=4, alpha=0.4, color="tab:blue", linewidths=0)
        xs = np.array([0.0, 1.0])
        ax.plot(xs, xs, color="0.6", lw=0.8, ls="--")
        ax.plot(xs, rep.slope * xs + rep.intercept, color="tab:red", lw=1.2,
                label=f"y = {rep.slope:.3f}x {rep.intercept:+.3f}")
        if rep.bins:
            centre = [(lo + hi) / 2 for lo, hi, *_ in rep.bins]
            ax.fill_between(centre, [b[3] for b in rep.bins], [b[4] for b in rep.bins],
                            color="tab:orange", alpha=0.3, lw=0)
        ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="ground-truth probability",
               ylabel="estimated probability", title=title)
        ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def loss_curve(iterations: Sequence[int], losses: Sequence[float], path: str | Path,
               window: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(iterations, losses, color="0.75", lw=0.6, label="per batch")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(iterations[window - 1:], smooth, color="tab:blue", lw=1.4,
                label=f"{window}-iteration mean")
    ax.set(xlabel="iteration", ylabel="loss", yscale="log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def eval_scatter(gt_labels: Sequence[float], pred_probs: Sequence[float], path: str | Path,
                 title: str = "") -> Path:
    """Measured preference vs preference implied by predicted errors."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(gt_labels, pred_probs, s=5, alpha=0.5, linewidths=0)
    ax.axvspan(0.35, 0.65, color="0.9", zorder=0)
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="measured preference",
           ylabel="predicted preference", title=title)
    fig.tight_layout()
    return _save(fig, path)
