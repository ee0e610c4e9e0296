"""Confusion-matrix segmentation metrics and their text renderings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

IGNORE = 255


@dataclass
class MetricsReport:
    per_class_iou: np.ndarray  # (K,), NaN for classes absent from GT and prediction
    miou: float
    pix_acc: float
    mean_acc: float
    confusion: np.ndarray  # (K, K) int64, rows = ground truth, cols = prediction

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, include_absent: bool = False) -> "MetricsReport":
        conf = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(conf).astype(np.float64)
        gt_count = conf.sum(axis=1).astype(np.float64)
        pred_count = conf.sum(axis=0).astype(np.float64)
        union = gt_count + pred_count - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, tp / union, np.nan)
            recall = np.where(gt_count > 0, tp / gt_count, np.nan)
        if include_absent:
            iou = np.where(union > 0, iou, 1.0)
        total = conf.sum()
        present = ~np.isnan(iou)
        return cls(
            per_class_iou=iou,
            miou=float(iou[present].mean()) if present.any() else float("nan"),
            pix_acc=float(tp.sum() / total) if total else float("nan"),
            mean_acc=float(np.nanmean(recall)) if (gt_count > 0).any() else float("nan"),
            confusion=conf,
        )

    def to_lines(self, class_names: Sequence[str] | None = None) -> list[str]:
        names = list(class_names) if class_names else [f"class{i}" for i in range(len(self.per_class_iou))]
        lines = [f"pixAcc  {100 * self.pix_acc:6.2f}",
                 f"meanAcc {100 * self.mean_acc:6.2f}",
                 f"mIoU    {100 * self.miou:6.2f}",
                 "",
                 "\t".join(names + ["Avg"]),
                 "\t".join([_pct(v) for v in self.per_class_iou] + [_pct(self.miou)])]
        return lines

    def to_kv(self, class_names: Sequence[str] | None = None) -> dict[str, str]:
        names = list(class_names) if class_names else [f"class{i}" for i in range(len(self.per_class_iou))]
        kv = {"pix_acc": f"{self.pix_acc:.6f}", "mean_acc": f"{self.mean_acc:.6f}", "miou": f"{self.miou:.6f}"}
        for n, v in zip(names, self.per_class_iou):
            kv[f"iou.{n}"] = f"{v:.6f}"
        return kv


def _pct(v: float) -> str:
    return "-" if np.isnan(v) else f"{100 * v:.2f}"


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: int = IGNORE) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth differ in size: {pred.size} vs {gt.size}")
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    for what, arr in (("ground truth", gt), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{what} ids outside [0, {n_classes})")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: int = IGNORE,
                    include_absent: bool = False) -> MetricsReport:
    return MetricsReport.from_confusion(confusion_matrix(pred, gt, n_classes, ignore), include_absent)
