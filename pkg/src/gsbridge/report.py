"""Matplotlib (Agg) figures summarising a pipeline run."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps figure bytes reproducible across runs.
PNG_METADATA = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def render_grid(images: dict, path: Path) -> Path:
    """Ground truth (top) against prediction (bottom) on each scene's held-out view."""
    names = list(images)
    fig, axes = plt.subplots(2, len(names), figsize=(2.2 * len(names), 4.4), squeeze=False)
    for col, name in enumerate(names):
        gt, pred = images[name]
        for row, (img, label) in enumerate(((gt, "ground truth"), (pred, "decoded"))):
            ax = axes[row, col]
            ax.imshow(np.clip(img[..., :3], 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(name, fontsize=8)
            if col == 0:
                ax.set_ylabel(label, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(histories: dict, path: Path) -> Path:
    """Loss per step, one log-scale panel per trained stage; inactive (zero) terms are not drawn.

    Long runs get a trailing mean drawn over the faint per-step values.
    """
    stages = [s for s in histories if any(histories[s].values())] or ["(none)"]
    fig, axes = plt.subplots(1, len(stages), figsize=(4.0 * len(stages), 3.2), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        for key, values in histories.get(stage, {}).items():
            v = np.asarray(values, dtype=np.float64)
            if v.size == 0:
                continue
            v = np.where(v > 0, v, np.nan)
            window = max(1, len(v) // 50)
            if window == 1:
                ax.plot(np.arange(len(v)), v, label=key, linewidth=0.8)
                continue
            # raw steps faintly, a trailing mean of about 2% of the run on top
            (line,) = ax.plot(np.arange(len(v)), v, linewidth=0.5, alpha=0.25)
            csum = np.concatenate([[0.0], np.nancumsum(v)])
            count = np.concatenate([[0], np.cumsum(~np.isnan(v))])
            lo = np.maximum(np.arange(1, len(v) + 1) - window, 0)
            n = count[1:] - count[lo]
            with np.errstate(invalid="ignore", divide="ignore"):
                smooth = np.where(n > 0, (csum[1:] - csum[lo]) / n, np.nan)
            smooth[np.isnan(v)] = np.nan
            ax.plot(np.arange(len(v)), smooth, color=line.get_color(), label=key, linewidth=1.0)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(stage, fontsize=9)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=6)
    axes[0, 0].set_ylabel("loss")
    fig.tight_layout()
    return _save(fig, path)


def metric_bars(metrics: dict, path: Path) -> Path:
    """One panel per metric, one bar per scene; missing values are drawn as gaps."""
    scenes = metrics["scenes"]
    names = list(scenes)
    keys = ("cd", "p2s", "normal_deg", "psnr", "ssim")
    fig, axes = plt.subplots(1, len(keys), figsize=(3.0 * len(keys), 3.0))
    for ax, key in zip(axes, keys):
        vals = [scenes[n][key] if scenes[n][key] is not None else np.nan for n in names]
        ax.bar(np.arange(len(names)), vals)
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=6)
        ax.set_title(key, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def write_report(out, metrics: dict, images: dict, histories: dict) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return [
        render_grid(images, out / "renders.png"),
        training_curves(histories, out / "training.png"),
        metric_bars(metrics, out / "metrics.png"),
    ]
