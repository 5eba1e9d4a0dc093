"""Figure rendering for CLI reports (headless matplotlib, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_timestep_sweep(
    timesteps,
    ap_by_kind: dict[str, np.ndarray],
    aggregated: dict[str, float],
    out_path: str | Path,
) -> None:
    """AP versus diffusion timestep, one curve per score kind, with the
    aggregated score drawn as a horizontal reference."""
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    for kind, aps in ap_by_kind.items():
        ax.plot(timesteps, aps, marker="o", markersize=3, linewidth=1.2, label=kind)
    for kind, ap in aggregated.items():
        ax.axhline(ap, linestyle="--", linewidth=1.0, color="gray")
        ax.annotate(f"{kind} aggregated = {ap:.3f}", (timesteps[0], ap),
                    fontsize=8, va="bottom", color="gray")
    ax.set_xlabel("diffusion timestep t")
    ax.set_ylabel("average precision")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_pr_curve(recall: np.ndarray, precision: np.ndarray, ap: float,
                  out_path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    ax.step(recall, precision, where="post", linewidth=1.3)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"pooled PR curve (AP = {ap:.4f})", fontsize=10)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_heatmap(values: np.ndarray, out_path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    im = ax.imshow(values, cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
