"""Matplotlib figure emission for training logs, sweeps, and inspections.

Every command that writes a delimited result also renders its figures here,
always to files (Agg backend), never to an interactive window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def training_curves(rows, out_png: Path | str) -> Path:
    """Four panels from a metrics log: loss terms, MSE diagnostics, lr, eta."""
    out_png = Path(out_png)
    steps = [r.step for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    axes[0, 0].plot(steps, [r.total for r in rows], label="total", lw=1.2)
    axes[0, 0].plot(steps, [r.d_orig for r in rows], label="original term", lw=0.9)
    axes[0, 0].plot(steps, [r.d_supp for r in rows], label="suppressed term", lw=0.9)
    axes[0, 0].set_title("loss")
    axes[0, 0].legend(fontsize=8)
    axes[0, 1].plot(steps, [r.mse_orig for r in rows], label="mse(z, z')", lw=0.9)
    axes[0, 1].plot(steps, [r.mse_supp for r in rows], label="mse(z, z-hat)", lw=0.9)
    axes[0, 1].set_title("normalized MSE between compared embeddings")
    axes[0, 1].legend(fontsize=8)
    axes[1, 0].plot(steps, [r.lr for r in rows], color="tab:green", lw=1.0)
    axes[1, 0].set_title("learning rate")
    axes[1, 1].plot(steps, [r.eta for r in rows], color="tab:red", lw=1.0)
    axes[1, 1].set_title("suppression ratio")
    for ax in axes.flat:
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def lambda_sweep_plot(rows: list[dict], out_png: Path | str) -> Path:
    out_png = Path(out_png)
    ordered = sorted(rows, key=lambda r: r["lambda"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["lambda"] for r in ordered], [100 * r["top1"] for r in ordered], "o-")
    ax.set_xlabel("lambda")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_title("linear-probe accuracy vs suppressed-term weight")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def ablation_plot(rows: list[dict], out_png: Path | str) -> Path:
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r["strategy"] for r in rows]
    ax.bar(labels, [100 * r["top1"] for r in rows], color="tab:blue")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_title("suppression strategies")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def heatmap_panel(views, responses, masks, out_png: Path | str, eta: float = 0.0) -> Path:
    """Two rows (one per view): the view, its response map, and the masked cells."""
    out_png = Path(out_png)
    fig, axes = plt.subplots(len(views), 3, figsize=(9, 3 * len(views)), squeeze=False)
    for row, (view, response, mask) in enumerate(zip(views, responses, masks)):
        axes[row, 0].imshow(view.permute(1, 2, 0).numpy())
        axes[row, 0].set_title(f"view {chr(ord('a') + row)}")
        im = axes[row, 1].imshow(response.numpy(), cmap="magma")
        axes[row, 1].set_title("response map")
        fig.colorbar(im, ax=axes[row, 1], fraction=0.046)
        axes[row, 2].imshow(mask.numpy(), cmap="gray_r", vmin=0, vmax=1)
        axes[row, 2].set_title(f"suppressed cells (eta={eta:.3f})")
        for ax in axes[row]:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
