"""Semantic refinement: inject class-conditioned CLIP stage maps into SAM stage maps.

One ``SrmParams`` instance is shared by every stage. The projection and
expansion layers start at zero so the module is an exact identity at
initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sim import ClassSimilarity
from .tensor import MlpParams, ShapeError, Tensor

FINAL_STAGE_MODES = ("refine_only", "inject_reuse_last", "none")


@dataclass
class SrmParams:
    mlp_sim: MlpParams  # K -> C_clip
    mlp_proj: MlpParams  # C_clip -> C_sam
    mlp_squeeze: MlpParams  # C_sam -> C_sam / r
    mlp_expand: MlpParams  # C_sam / r -> C_sam
    squeeze_ratio: int = 4

    def __post_init__(self):
        c_clip, c_sam = self.mlp_sim.out_dim, self.mlp_proj.out_dim
        ok = (self.mlp_proj.in_dim == c_clip and self.mlp_squeeze.in_dim == c_sam
              and self.mlp_expand.out_dim == c_sam and self.mlp_squeeze.out_dim == self.mlp_expand.in_dim)
        if not ok:
            shapes = [getattr(self, n).W.shape for n in ("mlp_sim", "mlp_proj", "mlp_squeeze", "mlp_expand")]
            raise ShapeError(f"SRM layer dims do not chain: {shapes}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_classes: int, c_clip: int, c_sam: int, r: int = 4,
             precision="f32") -> "SrmParams":
        if c_sam % r:
            raise ValueError(f"SAM dim {c_sam} not divisible by squeeze ratio {r}")
        return cls(
            mlp_sim=MlpParams.init(rng, n_classes, c_clip, precision),
            mlp_proj=MlpParams.init(rng, c_clip, c_sam, precision, zero=True),
            mlp_squeeze=MlpParams.init(rng, c_sam, c_sam // r, precision),
            mlp_expand=MlpParams.init(rng, c_sam // r, c_sam, precision, zero=True),
            squeeze_ratio=r,
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in ("mlp_sim", "mlp_proj", "mlp_squeeze", "mlp_expand"):
            for k, t in getattr(self, name).tensors().items():
                out[f"{name}/{k}"] = t
        return out


def align_grids(f_cv: Tensor, target: tuple[int, int]) -> Tensor:
    """Bilinearly resample a ``(..., H, W, C)`` map onto the target grid."""
    return T.resize_bilinear(f_cv, tuple(target))


def srm_inject(f_cv_i: Tensor, f_sim: ClassSimilarity, f_sv_prev: Tensor, p: SrmParams) -> Tensor:
    if f_cv_i.shape[:-1] != f_sv_prev.shape[:-1]:
        raise ShapeError(f"CLIP map {f_cv_i.shape} and SAM map {f_sv_prev.shape} are not on one grid")
    if f_cv_i.shape[-1] != p.mlp_sim.out_dim or f_sv_prev.shape[-1] != p.mlp_proj.out_dim:
        raise ShapeError(f"channel dims {f_cv_i.shape[-1]}/{f_sv_prev.shape[-1]} do not match SRM params")
    s = T.mlp_apply(p.mlp_sim, f_sim.probs)
    if s.ndim == 2:
        # (B, C) class vector, broadcast over every grid position of sample b
        s = T.reshape(s, (s.shape[0],) + (1,) * (f_cv_i.ndim - 2) + (s.shape[1],))
    return T.mlp_apply(p.mlp_proj, f_cv_i * s) + f_sv_prev


def srm_refine(f_sv_inj: Tensor, p: SrmParams) -> Tensor:
    if f_sv_inj.shape[-1] != p.mlp_squeeze.in_dim:
        raise ShapeError(f"trailing dim {f_sv_inj.shape[-1]} != {p.mlp_squeeze.in_dim}")
    return f_sv_inj + T.mlp_apply(p.mlp_expand, T.gelu(T.mlp_apply(p.mlp_squeeze, f_sv_inj)))


def make_stage_hook(clip_stages: list[Tensor], f_sim: ClassSimilarity, p: SrmParams,
                    final_stage: str = "refine_only"):
    """Stage hook for ``sam_forward``: stage ``s`` < 4 receives CLIP stage ``s + 1``."""
    if final_stage not in FINAL_STAGE_MODES:
        raise ValueError(f"srm.final_stage must be one of {FINAL_STAGE_MODES}, got {final_stage!r}")
    cache: dict[tuple, list[Tensor]] = {}

    def aligned(grid_hw):
        if grid_hw not in cache:
            cache[grid_hw] = [align_grids(f, grid_hw) for f in clip_stages]
        return cache[grid_hw]

    def hook(stage: int, g: Tensor) -> Tensor:
        hw = g.shape[-3:-1]
        if stage < len(clip_stages):
            return srm_refine(srm_inject(aligned(hw)[stage], f_sim, g, p), p)
        if final_stage == "refine_only":
            return srm_refine(g, p)
        if final_stage == "inject_reuse_last":
            return srm_refine(srm_inject(aligned(hw)[-1], f_sim, g, p), p)
        return g

    return hook
