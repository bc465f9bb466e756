"""Matplotlib figures written next to each run's CSV/JSON output.

Figures are rendered with the Agg backend and PNG metadata stripped, so the
same data always produces the same bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import latent_to_rgb  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss(losses, path, title: str = "training loss", window: int = 10) -> Path:
    y = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(y, lw=0.8, alpha=0.5, label="per step")
    if y.size >= window:
        ma = np.convolve(y, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, y.size), ma, lw=1.5, label=f"{window}-pt mean")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_samples(latents, masks, path, title: str = "", ncols: int = 6) -> Path:
    """RGB previews of latents with mask outlines overlaid."""
    n = min(len(latents), 2 * ncols)
    rows = max(1, (n + ncols - 1) // ncols)
    fig, axes = plt.subplots(rows, ncols, figsize=(1.4 * ncols, 1.5 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i in range(n):
        ax = axes.ravel()[i]
        ax.imshow(latent_to_rgb(latents[i]), interpolation="nearest")
        m = np.asarray(masks[i], dtype=float)
        if m.any():
            ax.contour(m, levels=[0.5], colors="w", linewidths=0.8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_maps(maps, path, titles=None, cmap: str = "magma", ncols: int = 6) -> Path:
    maps = [np.asarray(m, dtype=float) for m in maps]
    n = min(len(maps), 2 * ncols)
    rows = max(1, (n + ncols - 1) // ncols)
    fig, axes = plt.subplots(rows, ncols, figsize=(1.4 * ncols, 1.5 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i in range(n):
        ax = axes.ravel()[i]
        ax.imshow(maps[i], cmap=cmap, vmin=0.0, vmax=1.0, interpolation="nearest")
        if titles:
            ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_landscape(alphas, betas, values, path, title: str = "loss landscape") -> Path:
    fig, ax = plt.subplots(figsize=(4.4, 3.8))
    cs = ax.contourf(betas, alphas, values, levels=20, cmap="viridis")
    ax.contour(betas, alphas, values, levels=10, colors="k", linewidths=0.4)
    fig.colorbar(cs, ax=ax)
    ax.set_xlabel("beta")
    ax.set_ylabel("alpha")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    """Pixel AUROC per run: baseline vs augmented, one line per (seed, direction)."""
    pairs = {}
    for r in rows:
        pairs.setdefault((r.seed, r.direction), {})[r.condition] = r.pixel_auroc
    fig, ax = plt.subplots(figsize=(4, 3.4))
    for (seed, direction), v in sorted(pairs.items()):
        if "baseline" in v and "synthetic" in v:
            ax.plot([0, 1], [v["baseline"], v["synthetic"]], "o-", lw=0.8, alpha=0.7)
    ax.set_xticks([0, 1], ["no synthetic", "with synthetic"])
    ax.set_ylabel("pixel AUROC")
    ax.set_xlim(-0.3, 1.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_theorem1(detail: dict, path) -> Path:
    alphas = sorted((float(k) for k in detail), reverse=True)
    fig, ax = plt.subplots(figsize=(4, 3.2))
    data = np.array([detail[f"{a:g}"] for a in alphas])
    for j in range(data.shape[1]):
        ax.plot(alphas, data[:, j], "o-", lw=0.8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("terminal alpha")
    ax.set_ylabel("max |gap - m*eps|")
    fig.tight_layout()
    return _save(fig, path)
