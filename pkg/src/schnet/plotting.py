"""Report figures written next to the text output of the CLI commands."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed colours per synthetic part class; index 255 (ignore) is drawn white
PART_COLORS = np.array([
    [0.15, 0.15, 0.15],
    [0.95, 0.75, 0.55],
    [0.20, 0.40, 0.85],
    [0.95, 0.85, 0.20],
    [0.35, 0.25, 0.20],
    [0.85, 0.15, 0.15],
])


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training(log: Sequence[dict], evals: Sequence[dict], path: str | Path) -> Path:
    """Loss and learning rate per iteration, with validation mIoU on a second axis."""
    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(6.4, 5.2), sharex=True)
    it = np.array([r["iter"] for r in log])
    loss = np.array([r["loss"] for r in log])
    ax_loss.plot(it, loss, lw=0.6, color="0.6", label="loss")
    if len(loss) >= 25:
        k = 25
        smooth = np.convolve(loss, np.ones(k) / k, mode="valid")
        ax_loss.plot(it[k - 1:], smooth, lw=1.4, color="C0", label="loss (25-iter mean)")
    ax_loss.set_ylabel("training loss")
    if evals:
        ax_m = ax_loss.twinx()
        ax_m.plot([e["iter"] for e in evals], [e["miou"] for e in evals], "o-", color="C3", label="val mIoU")
        ax_m.set_ylabel("val mIoU")
        ax_m.set_ylim(0, 1)
        ax_m.legend(loc="center right", frameon=False)
    ax_loss.legend(loc="upper right", frameon=False)
    ax_lr.plot(it, [r["lr"] for r in log], color="C2")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("iteration")
    return _save(fig, Path(path))


def plot_per_class_iou(per_class_iou: np.ndarray, class_names: Sequence[str], path: str | Path,
                       title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    vals = np.nan_to_num(np.asarray(per_class_iou, dtype=float))
    x = np.arange(len(vals))
    ax.bar(x, vals, color=PART_COLORS[np.arange(len(vals)) % len(PART_COLORS)], edgecolor="k", lw=0.5)
    for xi, v in zip(x, vals):
        ax.text(xi, v + 0.01, f"{100 * v:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, list(class_names), rotation=20)
    ax.set_ylim(0, 1.08)
    ax.set_ylabel("IoU")
    if title:
        ax.set_title(title)
    return _save(fig, Path(path))


def plot_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    """Grouped bars of pixAcc, meanAcc and mIoU per ablation row, with per-seed points."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    keys = (("pix_acc", "pixAcc"), ("mean_acc", "meanAcc"), ("miou", "mIoU"))
    width = 0.26
    x = np.arange(len(rows))
    for j, (key, label) in enumerate(keys):
        means = [r[key] for r in rows]
        ax.bar(x + (j - 1) * width, means, width, label=label, color=f"C{j}")
        for i, r in enumerate(rows):
            pts = r.get(f"{key}_per_seed", [])
            ax.plot([x[i] + (j - 1) * width] * len(pts), pts, "k.", ms=3)
    ax.set_xticks(x, [r["method"] for r in rows])
    lo = min(min(r["miou"] for r in rows) - 0.1, 0.9)
    ax.set_ylim(max(0.0, lo), 1.0)
    ax.legend(frameon=False, ncol=3, loc="upper left")
    return _save(fig, Path(path))


def colorize(mask: np.ndarray) -> np.ndarray:
    out = np.ones(mask.shape + (3,))
    valid = mask != 255
    out[valid] = PART_COLORS[mask[valid] % len(PART_COLORS)]
    return out


def plot_predictions(images: np.ndarray, masks: np.ndarray, preds: np.ndarray, path: str | Path,
                     n: int = 6) -> Path:
    """Rows of input / ground truth / prediction for the first ``n`` samples."""
    n = min(n, len(images))
    fig, axes = plt.subplots(3, n, figsize=(1.3 * n, 4.0), squeeze=False)
    for i in range(n):
        for row, arr in enumerate((images[i], colorize(masks[i]), colorize(preds[i]))):
            axes[row, i].imshow(np.clip(arr, 0, 1), interpolation="nearest")
            axes[row, i].axis("off")
    for row, label in enumerate(("image", "truth", "pred")):
        axes[row, 0].set_title(label, fontsize=8, loc="left")
    return _save(fig, Path(path))
