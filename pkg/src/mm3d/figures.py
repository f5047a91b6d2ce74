"""Matplotlib figure writers for the command-line reports.

Everything renders through the Agg backend straight to files; no window is
ever opened. Scenes are drawn as top-down (x, y) scatters, which reads well
for the synthetic room layouts and keeps the renderer fast.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

__all__ = [
    "save_loss_curves", "save_heatmap_scatter", "save_mask_progression",
    "save_reconstruction_panels", "save_ablation_bars",
]

_POINT_SIZE = 4.0


def save_loss_curves(report, path):
    """Per-epoch loss traces plus the lr schedule on a twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(report.epochs, report.loss_pc, label="reconstruction", color="#1f77b4")
    ax.plot(report.epochs, report.loss_csd, label="consistency", color="#ff7f0e")
    ax.plot(report.epochs, report.loss_total, label="total", color="#2ca02c",
            linewidth=2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    ax2 = ax.twinx()
    ax2.plot(report.epochs, report.lr, color="#7f7f7f", linestyle=":", label="lr")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_heatmap_scatter(scene, field, path):
    """Top-down scatter colored by the combined local statistic."""
    span = field.d.max() - field.d.min()
    t = (field.d - field.d.min()) / span if span > 0 else np.full_like(field.d, 0.5)
    fig, ax = plt.subplots(figsize=(6, 6))
    sc = ax.scatter(scene.positions[:, 0], scene.positions[:, 1], c=t,
                    cmap="coolwarm", s=_POINT_SIZE, vmin=0.0, vmax=1.0)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.colorbar(sc, ax=ax, label="local statistic (min-max scaled)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_mask_progression(scene, seq, path):
    """One panel per masking step: retained points dark, masked points faint."""
    steps = seq.n_steps
    fig, axes = plt.subplots(1, steps, figsize=(3.2 * steps, 3.4), squeeze=False)
    for step, ax in zip(range(1, steps + 1), axes[0]):
        kept = np.isin(scene.ids, seq.sets[step - 1])
        ax.scatter(scene.positions[~kept, 0], scene.positions[~kept, 1],
                   color="#dddddd", s=_POINT_SIZE)
        ax.scatter(scene.positions[kept, 0], scene.positions[kept, 1],
                   color="#1f3f77", s=_POINT_SIZE)
        ax.set_aspect("equal")
        ax.set_title(f"theta={seq.theta[step - 1]:g}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_reconstruction_panels(target_positions, predicted, path):
    """Target scene next to each per-layer folded prediction."""
    panels = 1 + len(predicted)
    fig, axes = plt.subplots(1, panels, figsize=(3.2 * panels, 3.4),
                             squeeze=False)
    axes[0][0].scatter(target_positions[:, 0], target_positions[:, 1],
                       color="#444444", s=_POINT_SIZE)
    axes[0][0].set_title("target")
    for i, pred in enumerate(predicted):
        ax = axes[0][i + 1]
        ax.scatter(pred[:, 0], pred[:, 1], color="#b03030", s=_POINT_SIZE)
        ax.set_title(f"layer {i + 1} fold")
    for ax in axes[0]:
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_bars(cells, path):
    """Held-out loss per ablation cell; dots mark the individual seeds."""
    names = list(cells)
    means = [float(np.mean(cells[name])) for name in names]
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 4.5))
    bars = ax.bar(range(len(names)), means, color="#6b8cba")
    for i, name in enumerate(names):
        values = cells[name]
        ax.plot([i] * len(values), values, "k.", markersize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("held-out reconstruction loss")
    ax.bar_label(bars, fmt="%.4f", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
