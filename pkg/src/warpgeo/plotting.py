"""Figure rendering for depth, normals, loss traces and ablation comparisons."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import TERM_NAMES  # noqa: E402


def normal_rgb(normals: np.ndarray) -> np.ndarray:
    """Map unit normals to RGB in [0, 1] via ``(n + 1) / 2``; NaNs become black."""
    rgb = (np.asarray(normals, dtype=float) + 1.0) / 2.0
    return np.clip(np.nan_to_num(rgb, nan=0.0), 0.0, 1.0)


def depth_colormap(depth: np.ndarray, vmin=None, vmax=None) -> np.ndarray:
    """Depth as an RGB inferno ramp (near = bright)."""
    d = np.asarray(depth, dtype=float)
    finite = np.isfinite(d)
    lo = np.min(d[finite]) if vmin is None and finite.any() else (vmin or 0.0)
    hi = np.max(d[finite]) if vmax is None and finite.any() else (vmax or 1.0)
    t = (hi - d) / (hi - lo) if hi > lo else np.zeros_like(d)
    rgb = plt.get_cmap("inferno")(np.clip(np.nan_to_num(t), 0.0, 1.0))[..., :3]
    rgb[~finite] = 0.0
    return rgb


def save_depth_figure(path, depth, gt=None, title: str = "depth") -> None:
    panels = [("estimate", depth)] + ([("ground truth", gt)] if gt is not None else [])
    finite = np.concatenate([np.ravel(p[np.isfinite(p)]) for _, p in panels])
    vmin, vmax = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 2.2 * len(panels)), squeeze=False)
    for ax, (name, d) in zip(axes[:, 0], panels):
        im = ax.imshow(d, cmap="inferno_r", vmin=vmin, vmax=vmax)
        ax.set_title(f"{title}: {name}" if len(panels) > 1 else title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.025)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_normal_figure(path, normals, gt=None, title: str = "normals") -> None:
    panels = [("estimate", normals)] + ([("ground truth", gt)] if gt is not None else [])
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 2.2 * len(panels)), squeeze=False)
    for ax, (name, n) in zip(axes[:, 0], panels):
        ax.imshow(normal_rgb(n))
        ax.set_title(f"{title}: {name}" if len(panels) > 1 else title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_trace_figure(path, trace, stage_boundary: int | None = None) -> None:
    """Log-scale plot of each loss term and the total against the step."""
    arr = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    if arr.size:
        steps = arr[:, 0]
        for k, name in enumerate((*TERM_NAMES, "total")):
            col = arr[:, k + 1]
            if np.any(col > 0):
                ax.plot(steps, np.where(col > 0, col, np.nan), label=name, lw=2 if name == "total" else 1)
        if stage_boundary is not None and 0 < stage_boundary < steps[-1]:
            ax.axvline(stage_boundary, color="k", ls="--", lw=0.8, label="stage 2")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_ablation_figure(path, rows: list[dict], metric: str = "normal_mean_deg") -> None:
    """Bar chart of one metric across ablation configurations."""
    labels = [r["config"] for r in rows]
    values = [float(r[metric]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
