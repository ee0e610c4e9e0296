"""Sum-fusion segmentation head and the cross-entropy + soft-IoU training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import StageFeatures
from .tensor import MlpParams, ShapeError, Tensor

IGNORE = 255


class DataError(ValueError):
    pass


@dataclass
class HeadParams:
    proj: list[MlpParams]  # 5 x (C_in -> C_head); index 0 is the post-embedding map
    fuse: MlpParams  # 4 * C_head -> C_head
    classifier: MlpParams  # C_head -> K

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_head: int, n_classes: int, precision="f32") -> "HeadParams":
        return cls(
            proj=[MlpParams.init(rng, c_in, c_head, precision) for _ in range(5)],
            fuse=MlpParams.init(rng, 4 * c_head, c_head, precision),
            classifier=MlpParams.init(rng, c_head, n_classes, precision),
        )

    @property
    def n_classes(self) -> int:
        return self.classifier.out_dim

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, p in enumerate(self.proj):
            out.update({f"proj/{i}/{k}": t for k, t in p.tensors().items()})
        out.update({f"fuse/{k}": t for k, t in self.fuse.tensors().items()})
        out.update({f"classifier/{k}": t for k, t in self.classifier.tensors().items()})
        return out


def decode_logits(stages: StageFeatures | list[Tensor], p: HeadParams, out_size: tuple[int, int]) -> Tensor:
    """Project the five stage maps, fuse, classify and upsample to ``out_size``."""
    maps = list(stages.stages if isinstance(stages, StageFeatures) else stages)
    if len(maps) != 5:
        raise ShapeError(f"head expects 5 stage maps, got {len(maps)}")
    grids = {m.shape[:-1] for m in maps}
    if len(grids) != 1:
        raise ShapeError(f"stage maps are not on one grid: {sorted(grids)}")
    base = T.mlp_apply(p.proj[0], maps[0])
    deep = T.concat([T.mlp_apply(p.proj[i], maps[i]) for i in range(1, 5)], axis=-1)
    fused = T.gelu(T.mlp_apply(p.fuse, deep) + base)
    logits = T.mlp_apply(p.classifier, fused)
    return T.resize_bilinear(logits, tuple(out_size))


def combined_loss(logits: Tensor, gt: np.ndarray, w_iou: float = 1.0, ignore: int = IGNORE,
                  eps: float = 1e-6) -> Tensor:
    """Mean pixel cross-entropy plus ``w_iou`` times the soft-IoU (Jaccard) loss.

    ``gt`` holds class ids with ``ignore`` marking pixels excluded from both
    terms. The soft-IoU sums run over every valid pixel of the batch.
    """
    gt = np.asarray(gt)
    k = logits.shape[-1]
    if gt.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {gt.shape} do not match logits {logits.shape}")
    valid = gt != ignore
    bad = valid & ((gt < 0) | (gt >= k))
    if bad.any():
        raise DataError(f"label ids {sorted(set(gt[bad].tolist()))[:5]} out of range for K={k}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    dt = logits.dtype
    onehot = np.zeros(logits.shape, dtype=dt)
    idx = np.nonzero(valid)
    onehot[idx + (gt[idx],)] = 1.0
    vmask = valid[..., None].astype(dt)

    ce = T.sum(T.log_softmax(logits, axis=-1) * onehot) * (-1.0 / n_valid)
    if w_iou == 0:
        return ce
    flat = (-1, k)
    prob = T.reshape(T.softmax(logits, axis=-1) * vmask, flat)
    g = onehot.reshape(flat)
    inter = T.sum(prob * g, axis=0)
    union = T.sum(prob, axis=0) + g.sum(axis=0) - inter + eps
    iou_loss = 1.0 - T.mean(inter / union)
    return ce + iou_loss * w_iou
