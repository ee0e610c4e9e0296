"""Frozen, seed-deterministic stand-ins for the CLIP image/text encoders and the SAM image encoder.

The image encoders are plain pre-norm ViTs (attention + GELU MLP) whose
weights are drawn once from the config seed and never updated. Stage maps are
tapped at configured layers (1-based layer numbers) and returned as
``(B, h, w, C)`` grids.
"""

from __future__ import annotations

import functools
import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .scht import tensors_digest
from .tensor import MlpParams, Precision, ShapeError, Tensor

Hook = Callable[[int, Tensor], Tensor]


class HookContractError(RuntimeError):
    pass


def derive_rng(seed: int, *names: object) -> np.random.Generator:
    """Independent generator for a named stream; adding streams never shifts existing ones."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key).digest()[:8], "little"))


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    embed_dim_clip: int = 32
    embed_dim_sam: int = 64
    joint_dim: int = 32
    n_layers_clip: int = 4
    n_layers_sam: int = 8
    clip_taps: tuple[int, ...] = (1, 2, 3, 4)
    sam_taps: tuple[int, ...] = (2, 4, 6, 8)
    seed: int = 0
    n_heads: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        for name, taps, n in (("clip_taps", self.clip_taps, self.n_layers_clip),
                              ("sam_taps", self.sam_taps, self.n_layers_sam)):
            if len(taps) != 4:
                raise ValueError(f"{name} must have exactly 4 entries, got {taps}")
            if any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > n:
                raise ValueError(f"{name} must be strictly increasing within 1..{n}, got {taps}")
        for d in (self.embed_dim_clip, self.embed_dim_sam):
            if d % self.n_heads:
                raise ValueError(f"embed dim {d} not divisible by n_heads {self.n_heads}")


@dataclass
class StageFeatures:
    stages: list[Tensor]
    source: str  # "clip" | "sam"

    def __post_init__(self):
        if self.source not in ("clip", "sam"):
            raise ValueError(f"unknown source {self.source!r}")
        shapes = {s.shape for s in self.stages}
        if len(shapes) > 1:
            raise ShapeError(f"{self.source} stages disagree in shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> Tensor:
        return self.stages[i]


@dataclass
class ClassEmbedding:
    vec: Tensor  # (..., joint_dim), unit L2 norm


@dataclass
class TextFeatures:
    mat: Tensor  # (K, joint_dim), rows unit-normalized
    prompts: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.mat.shape[0]


def positional_encoding(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code over normalized coordinates, so any grid size is valid."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    n_freq = dim // 4
    freqs = np.pi * (1.0 + np.arange(n_freq))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    parts = [np.sin(yy[..., None] * freqs), np.cos(yy[..., None] * freqs),
             np.sin(xx[..., None] * freqs), np.cos(xx[..., None] * freqs)]
    pe = np.concatenate(parts, axis=-1)
    if pe.shape[-1] < dim:
        pe = np.concatenate([pe, np.zeros((h, w, dim - pe.shape[-1]))], axis=-1)
    return 0.5 * pe


def patchify(img: Tensor, patch: int) -> Tensor:
    """``(B, H, W, 3)`` -> ``(B, h, w, patch*patch*3)``, mean-subtracted."""
    b, hh, ww, c = img.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"image {hh}x{ww} not divisible by patch size {patch}")
    h, w = hh // patch, ww // patch
    x = T.reshape(img - 0.5, (b, h, patch, w, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, patch * patch * c))


class _Block:
    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int, mlp_ratio: int, dtype):
        def mlp(i, o):
            w = rng.standard_normal((o, i)) / np.sqrt(i)
            b = 0.02 * rng.standard_normal(o)
            return MlpParams(Tensor(w.astype(dtype)), Tensor(b.astype(dtype)))

        def ln():
            return (Tensor((1.0 + 0.1 * rng.standard_normal(dim)).astype(dtype)),
                    Tensor((0.02 * rng.standard_normal(dim)).astype(dtype)))

        self.ln1 = ln()
        self.q, self.k, self.v, self.proj = mlp(dim, dim), mlp(dim, dim), mlp(dim, dim), mlp(dim, dim)
        self.ln2 = ln()
        self.fc1 = mlp(dim, mlp_ratio * dim)
        self.fc2 = mlp(mlp_ratio * dim, dim)
        self.n_heads = n_heads
        self.dim = dim

    def named(self) -> dict[str, Tensor]:
        out = {"ln1/g": self.ln1[0], "ln1/b": self.ln1[1], "ln2/g": self.ln2[0], "ln2/b": self.ln2[1]}
        for name in ("q", "k", "v", "proj", "fc1", "fc2"):
            p = getattr(self, name)
            out[f"{name}/W"] = p.W
            out[f"{name}/b"] = p.b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        nh, dh = self.n_heads, c // self.n_heads
        h = T.layer_norm(x, *self.ln1)

        def heads(p):
            return T.transpose(T.reshape(T.mlp_apply(p, h), (b, n, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.q), heads(self.k), heads(self.v)
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)), axis=-1)
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, c))
        x = x + T.mlp_apply(self.proj, o)
        h = T.layer_norm(x, *self.ln2)
        return x + T.mlp_apply(self.fc2, T.gelu(T.mlp_apply(self.fc1, h)))


class FrozenEncoders:
    """All frozen weights for one ``EncoderConfig`` and precision."""

    def __init__(self, cfg: EncoderConfig, precision: Precision | str = "f32"):
        self.cfg = cfg
        self.precision = Precision.of(precision)
        dt = self.precision.dtype
        pdim = cfg.patch_size ** 2 * 3

        rng = derive_rng(cfg.seed, "clip", "embed")
        self.clip_patch = MlpParams(
            Tensor((rng.standard_normal((cfg.embed_dim_clip, pdim)) / np.sqrt(pdim)).astype(dt)),
            Tensor(np.zeros(cfg.embed_dim_clip, dtype=dt)))
        self.clip_cls = Tensor(rng.standard_normal(cfg.embed_dim_clip).astype(dt))
        self.clip_cls_pos = Tensor((0.5 * rng.standard_normal(cfg.embed_dim_clip)).astype(dt))
        self.clip_blocks = [_Block(derive_rng(cfg.seed, "clip", "layer", i), cfg.embed_dim_clip,
                                   cfg.n_heads, cfg.mlp_ratio, dt) for i in range(cfg.n_layers_clip)]
        rng = derive_rng(cfg.seed, "clip", "head")
        self.clip_ln_post = (Tensor(np.ones(cfg.embed_dim_clip, dtype=dt)),
                             Tensor(np.zeros(cfg.embed_dim_clip, dtype=dt)))
        self.clip_proj = Tensor((rng.standard_normal((cfg.embed_dim_clip, cfg.joint_dim))
                                 / np.sqrt(cfg.embed_dim_clip)).astype(dt))

        rng = derive_rng(cfg.seed, "sam", "embed")
        self.sam_patch = MlpParams(
            Tensor((rng.standard_normal((cfg.embed_dim_sam, pdim)) / np.sqrt(pdim)).astype(dt)),
            Tensor(np.zeros(cfg.embed_dim_sam, dtype=dt)))
        self.sam_blocks = [_Block(derive_rng(cfg.seed, "sam", "layer", i), cfg.embed_dim_sam,
                                  cfg.n_heads, cfg.mlp_ratio, dt) for i in range(cfg.n_layers_sam)]

    def named_weights(self) -> dict[str, np.ndarray]:
        out = {
            "encoders/clip/patch/W": self.clip_patch.W.data,
            "encoders/clip/patch/b": self.clip_patch.b.data,
            "encoders/clip/cls": self.clip_cls.data,
            "encoders/clip/cls_pos": self.clip_cls_pos.data,
            "encoders/clip/ln_post/g": self.clip_ln_post[0].data,
            "encoders/clip/ln_post/b": self.clip_ln_post[1].data,
            "encoders/clip/proj": self.clip_proj.data,
            "encoders/sam/patch/W": self.sam_patch.W.data,
            "encoders/sam/patch/b": self.sam_patch.b.data,
        }
        for i, blk in enumerate(self.clip_blocks):
            out.update({f"encoders/clip/layer{i}/{k}": v.data for k, v in blk.named().items()})
        for i, blk in enumerate(self.sam_blocks):
            out.update({f"encoders/sam/layer{i}/{k}": v.data for k, v in blk.named().items()})
        return out

    def digest(self) -> str:
        return tensors_digest(self.named_weights())

    def _embed(self, img: Tensor, patch: MlpParams, dim: int) -> Tensor:
        x = T.mlp_apply(patch, patchify(img, self.cfg.patch_size))
        pe = positional_encoding(x.shape[1], x.shape[2], dim).astype(x.dtype)
        return x + Tensor(pe)

    def clip_forward(self, img: Tensor, patch_embed: MlpParams | None = None
                     ) -> tuple[ClassEmbedding, StageFeatures, Tensor]:
        """Batched CLIP image pass; also returns the post-embedding grid."""
        cfg = self.cfg
        grid = self._embed(img, patch_embed or self.clip_patch, cfg.embed_dim_clip)
        b, h, w, c = grid.shape
        cls = self.clip_cls + self.clip_cls_pos
        cls = Tensor(np.broadcast_to(cls.data, (b, 1, c)).copy())
        x = T.concat([cls, T.reshape(grid, (b, h * w, c))], axis=1)
        stages = []
        for i, blk in enumerate(self.clip_blocks, start=1):
            x = blk(x)
            if i in cfg.clip_taps:
                stages.append(T.reshape(x[:, 1:, :], (b, h, w, c)))
        z = T.layer_norm(x[:, 0, :], *self.clip_ln_post)
        z = T.matmul(z, self.clip_proj)
        z = z / T.reshape(T.sqrt(T.sum(z * z, axis=-1)), (b, 1))
        return ClassEmbedding(z), StageFeatures(stages, "clip"), grid

    def clip_text(self, prompts: Sequence[str]) -> TextFeatures:
        prompts = list(prompts)
        if len(prompts) < 2:
            raise ValueError("need at least two class prompts")
        if len(set(prompts)) != len(prompts):
            dup = sorted({p for p in prompts if prompts.count(p) > 1})
            raise ValueError(f"duplicate prompts make classes indistinguishable: {dup}")
        d = self.cfg.joint_dim
        rows = []
        for prompt in prompts:
            bag = np.zeros(d)
            for tok in re.findall(r"\w+", prompt.lower()):
                bag += derive_rng(self.cfg.seed, "text", "token", tok).standard_normal(d)
            proj = derive_rng(self.cfg.seed, "text", "prompt", prompt).standard_normal((d, d)) / np.sqrt(d)
            v = proj @ bag
            rows.append(v / np.linalg.norm(v))
        return TextFeatures(Tensor(np.stack(rows).astype(self.precision.dtype)), prompts)

    def sam_forward(self, img: Tensor, layer_hook: Hook | None = None, stage_hook: Hook | None = None,
                    patch_embed: MlpParams | None = None) -> StageFeatures:
        """Batched SAM pass with the layer (FTM) and stage (SRM) hook sites.

        ``layer_hook(i, tokens)`` sees every layer output as ``(B, L, C)``;
        ``stage_hook(s, grid)`` sees the post-embedding grid (s=0) and each
        tapped stage (s=1..4) as ``(B, h, w, C)`` before it feeds onward.
        """
        cfg = self.cfg
        grid = self._embed(img, patch_embed or self.sam_patch, cfg.embed_dim_sam)
        b, h, w, c = grid.shape
        stages = []
        if stage_hook is not None:
            grid = _checked(stage_hook, 0, grid, "stage_hook")
        stages.append(grid)
        x = T.reshape(grid, (b, h * w, c))
        for i, blk in enumerate(self.sam_blocks):
            x = blk(x)
            if layer_hook is not None:
                x = _checked(layer_hook, i, x, "layer_hook")
            if i + 1 in cfg.sam_taps:
                g = T.reshape(x, (b, h, w, c))
                if stage_hook is not None:
                    g = _checked(stage_hook, len(stages), g, "stage_hook")
                stages.append(g)
                x = T.reshape(g, (b, h * w, c))
        return StageFeatures(stages, "sam")


def _checked(hook: Hook, idx: int, x: Tensor, what: str) -> Tensor:
    y = hook(idx, x)
    if not isinstance(y, Tensor) or y.shape != x.shape:
        got = getattr(y, "shape", type(y).__name__)
        raise HookContractError(f"{what} at index {idx} changed shape {x.shape} -> {got}")
    return y


@functools.lru_cache(maxsize=8)
def build_encoders(cfg: EncoderConfig, precision: str = "f32") -> FrozenEncoders:
    return FrozenEncoders(cfg, precision)


def _batched(img) -> tuple[Tensor, bool]:
    img = img if isinstance(img, Tensor) else Tensor(img)
    if img.ndim == 3:
        return T.reshape(img, (1,) + img.shape), True
    return img, False


def _unbatch(t: Tensor) -> Tensor:
    return T.reshape(t, t.shape[1:])


def clip_encode_image(img, cfg: EncoderConfig) -> tuple[ClassEmbedding, StageFeatures]:
    enc = build_encoders(cfg, Precision.of(getattr(img, "dtype", np.float32)).value)
    x, single = _batched(img)
    cls, stages, _ = enc.clip_forward(x)
    if single:
        return ClassEmbedding(_unbatch(cls.vec)), StageFeatures([_unbatch(s) for s in stages.stages], "clip")
    return cls, stages


def clip_encode_text(prompts: Sequence[str], cfg: EncoderConfig, precision: str = "f32") -> TextFeatures:
    return build_encoders(cfg, precision).clip_text(prompts)


def sam_forward(img, cfg: EncoderConfig, layer_hook: Hook | None = None,
                stage_hook: Hook | None = None) -> StageFeatures:
    enc = build_encoders(cfg, Precision.of(getattr(img, "dtype", np.float32)).value)
    x, single = _batched(img)
    out = enc.sam_forward(x, layer_hook, stage_hook)
    if single:
        return StageFeatures([_unbatch(s) for s in out.stages], "sam")
    return out
