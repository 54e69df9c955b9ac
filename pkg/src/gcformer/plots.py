"""Figures for sweep, ablation and training-history outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import VARIANTS  # noqa: E402

FIGSIZE = (5.0, 3.6)


def _ok(records):
    return [r for r in records if r.status == "ok" and r.accuracies]


def plot_sampling_heatmap(records, path) -> Path:
    """Mean test accuracy over the (p_k, n_k) grid."""
    recs = _ok(records)
    pks = sorted({r.cell["p_k"] for r in recs})
    nks = sorted({r.cell["n_k"] for r in recs})
    grid = np.full((len(pks), len(nks)), np.nan)
    for r in recs:
        grid[pks.index(r.cell["p_k"]), nks.index(r.cell["n_k"])] = 100 * r.mean
    fig, ax = plt.subplots(figsize=FIGSIZE)
    im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(nks)), [str(v) for v in nks])
    ax.set_yticks(range(len(pks)), [str(v) for v in pks])
    if grid.size <= 100:
        mid = np.nanmean(grid) if np.isfinite(grid).any() else 0.0
        for (r, c), v in np.ndenumerate(grid):
            if np.isfinite(v):
                ax.text(c, r, f"{v:.1f}", ha="center", va="center", fontsize=7,
                        color="white" if v < mid else "black")
    ax.set_xlabel("$n_k$ (negative tokens)")
    ax.set_ylabel("$p_k$ (positive tokens)")
    fig.colorbar(im, ax=ax, label="test accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_line(records, axis: str, path) -> Path:
    recs = sorted(_ok(records), key=lambda r: r.cell[axis])
    x = [r.cell[axis] for r in recs]
    mean = np.array([100 * r.mean for r in recs])
    std = np.array([100 * r.std for r in recs])
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(x, mean, marker="o", color="C0")
    ax.fill_between(x, mean - std, mean + std, color="C0", alpha=0.2, lw=0)
    ax.set_xlabel(axis)
    ax.set_ylabel("test accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_ablation(records, path) -> Path:
    by_variant = {r.cell["variant"]: r for r in _ok(records)}
    names = [v for v in VARIANTS if v in by_variant]
    mean = [100 * by_variant[v].mean for v in names]
    std = [100 * by_variant[v].std for v in names]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.bar(range(len(names)), mean, yerr=std, capsize=4, color=[f"C{i}" for i in range(len(names))])
    ax.set_xticks(range(len(names)), ["full" if v == "full" else f"-{v}" for v in names])
    lo = min(m - s for m, s in zip(mean, std)) if mean else 0
    ax.set_ylim(max(0, lo - 5), 100)
    ax.set_ylabel("test accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_history(history, path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    for key in ("train_loss", "ce", "cl"):
        ax1.plot(epochs, [h[key] for h in history], label=key)
    ax1.set_xlabel("epoch")
    ax1.legend(frameon=False)
    for key in ("val_acc", "test_acc"):
        ax2.plot(epochs, [h[key] for h in history], label=key)
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def render_figures(records, out_dir, stem="results") -> list[Path]:
    """Pick the figures that fit the swept axes and write them as PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = _ok(records)
    if not recs:
        return []
    axes = {a for r in recs for a in r.cell}
    paths = []
    if axes == {"variant"}:
        paths.append(plot_ablation(recs, out_dir / f"{stem}_ablation.png"))
    elif {"p_k", "n_k"} <= axes and len(axes) == 2:
        paths.append(plot_sampling_heatmap(recs, out_dir / f"{stem}_sampling.png"))
    elif len(axes) == 1:
        (axis,) = axes
        values = [r.cell[axis] for r in recs]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            paths.append(plot_line(recs, axis, out_dir / f"{stem}_{axis}.png"))
    return paths
