"""Report figures written next to the CLI's tensor outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "image.interpolation": "nearest",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_masks(heatmaps: Sequence[np.ndarray | None], masks: Sequence[np.ndarray], labels: Sequence[str],
               path: str | Path) -> Path:
    """Two rows: averaged attention heatmap (blank for user masks) over the binary mask."""
    n = max(len(masks), 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(2.2 * n, 4.4), squeeze=False)
        for i, (heat, mask, label) in enumerate(zip(heatmaps, masks, labels)):
            top, bottom = axes[0, i], axes[1, i]
            if heat is not None:
                im = top.imshow(heat, cmap="magma")
                fig.colorbar(im, ax=top, fraction=0.046)
            top.set_title(f"{label}: attention")
            bottom.imshow(mask, cmap="gray", vmin=0, vmax=1)
            bottom.set_title(f"{label}: mask")
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)


def plot_composition(latent: np.ndarray, masks: Sequence[np.ndarray], labels: Sequence[str],
                     path: str | Path) -> Path:
    """Latent channel 0 with each object's mask outline."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.imshow(latent[0], cmap="gray", vmin=-1, vmax=1)
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i, (mask, label) in enumerate(zip(masks, labels)):
            if mask.any() and not mask.all():
                ax.contour(mask, levels=[0.5], colors=[colors[i % len(colors)]], linewidths=1)
            ax.plot([], [], color=colors[i % len(colors)], label=label)
        if labels:
            ax.legend(loc="upper right", fontsize=6)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title("composed latent (channel 0)")
        return _save(fig, path)


def plot_null_losses(losses: Sequence[dict], path: str | Path) -> Path:
    """Per-step null-text loss before and after optimization (log scale)."""
    steps = [r["t"] for r in losses]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.semilogy(steps, [max(r["initial"], 1e-300) for r in losses], "o-", label="initial")
        ax.semilogy(steps, [max(r["final"], 1e-300) for r in losses], "s-", label="optimized")
        ax.invert_xaxis()
        ax.set_xlabel("timestep")
        ax.set_ylabel("squared error")
        ax.legend()
        ax.grid(alpha=0.2)
        return _save(fig, path)
