"""Matplotlib figures written next to the CSV/PGM outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path, cfg_hash: str) -> None:
    fig.savefig(path, dpi=100, metadata={"Description": f"config_hash={cfg_hash}"})
    plt.close(fig)


def plot_training(rows, path: str | Path, cfg_hash: str) -> None:
    steps = [r[0] for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.plot(steps, [r[1] for r in rows])
    ax0.set_yscale("log")
    ax0.set_xlabel("step")
    ax0.set_ylabel("loss")
    ax1.plot(steps, [r[2] for r in rows], label="center error (m)")
    ax1.plot(steps, [r[3] for r in rows], label="class accuracy")
    ax1.set_xlabel("step")
    ax1.legend()
    fig.tight_layout()
    _save(fig, path, cfg_hash)


def plot_bench(timings, path: str | Path, cfg_hash: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for mech in sorted({t.mechanism for t in timings}):
        pts = sorted((t.N, t.median_ms) for t in timings if t.mechanism == mech)
        ax.loglog(*zip(*pts), marker="o", label=mech, base=2)
    ax.set_xlabel("tokens N")
    ax.set_ylabel("median time (ms)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, cfg_hash)


def plot_heatmaps(images: np.ndarray, heat: np.ndarray, path: str | Path, cfg_hash: str) -> None:
    V = len(images)
    fig, axes = plt.subplots(2, V, figsize=(2 * V, 4), squeeze=False)
    for v in range(V):
        axes[0, v].imshow(np.clip(images[v], 0, 1))
        axes[1, v].imshow(heat[v], cmap="inferno", vmin=0, vmax=1)
        axes[0, v].set_title(f"view {v}")
        for ax in axes[:, v]:
            ax.axis("off")
    fig.tight_layout()
    _save(fig, path, cfg_hash)


def plot_deform(images: np.ndarray, layers, path: str | Path, cfg_hash: str) -> None:
    """Sampling points of every layer over the views that see the cell."""
    views = sorted({p.view for pts in layers for p in pts})
    if not views:
        views = [0]
    fig, axes = plt.subplots(1, len(views), figsize=(3 * len(views), 3), squeeze=False)
    cmap = plt.get_cmap("viridis")
    for ax, v in zip(axes[0], views):
        ax.imshow(np.clip(images[v], 0, 1))
        for i, pts in enumerate(layers):
            sel = [p for p in pts if p.view == v]
            if sel:
                ax.scatter([p.u - 0.5 for p in sel], [p.v - 0.5 for p in sel],
                           s=[4 + 400 * p.weight for p in sel], color=cmap(i / max(len(layers) - 1, 1)),
                           label=f"layer {i}", alpha=0.8)
        ax.set_title(f"view {v}")
        ax.axis("off")
    axes[0, 0].legend(fontsize=6, loc="lower left")
    fig.tight_layout()
    _save(fig, path, cfg_hash)
