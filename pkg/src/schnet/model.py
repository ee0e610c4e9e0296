"""The full network: frozen encoders, similarity, SRM, FTM and the segmentation head."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import class_names
from .encoders import FrozenEncoders, build_encoders, derive_rng
from .ftm import FtmParams, TokenBank, make_layer_hook
from .head import HeadParams, decode_logits
from .sim import compute_similarity
from .srm import SrmParams, make_stage_hook
from .tensor import MlpParams, Tensor


def _copy_mlp(p: MlpParams) -> MlpParams:
    return MlpParams(Tensor(p.W.data.copy(), requires_grad=True), Tensor(p.b.data.copy(), requires_grad=True))


class SCHNet:
    """Trainable modules wired around one set of frozen encoders.

    Every parameter group draws from its own named random stream, so turning
    SRM or FTM off leaves the remaining groups bit-identical.
    """

    def __init__(self, cfg: RunConfig, encoders: FrozenEncoders | None = None):
        self.cfg = cfg
        precision = cfg.model.precision
        self.encoders = encoders or build_encoders(cfg.encoder, precision)
        enc_cfg = cfg.encoder
        seed = cfg.train.seed
        self.class_names = class_names(cfg.synth.K)
        self.n_classes = len(self.class_names)
        self.backbone = cfg.model.backbone
        self.use_srm = cfg.srm.enabled and self.backbone == "sam"
        self.use_ftm = cfg.ftm.enabled and self.backbone == "sam"

        prompts = [cfg.model.prompt_template.format(n) for n in self.class_names]
        self.text = self.encoders.clip_text(prompts)

        if self.backbone == "sam":
            self.patch_embed = _copy_mlp(self.encoders.sam_patch)
            c_in = enc_cfg.embed_dim_sam
        else:
            self.patch_embed = _copy_mlp(self.encoders.clip_patch)
            c_in = enc_cfg.embed_dim_clip
        self.srm = SrmParams.init(derive_rng(seed, "srm"), self.n_classes, enc_cfg.embed_dim_clip,
                                  enc_cfg.embed_dim_sam, cfg.srm.r, precision) if self.use_srm else None
        if self.use_ftm:
            n, c = enc_cfg.n_layers_sam, enc_cfg.embed_dim_sam
            self.bank = TokenBank.init(derive_rng(seed, "ftm", "tokens"), n, cfg.ftm.m, c, cfg.ftm.rho_init,
                                       cfg.ftm.rho_mode, precision)
            self.ftm = FtmParams.init(derive_rng(seed, "ftm", "mlps"), n, c, cfg.ftm.r, precision)
        else:
            self.bank = self.ftm = None
        self.head = HeadParams.init(derive_rng(seed, "head"), c_in, cfg.head.dim, self.n_classes, precision)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        out.update({f"patch_embed/{k}": t for k, t in self.patch_embed.tensors().items()})
        if self.srm is not None:
            out.update({f"srm/{k}": t for k, t in self.srm.tensors().items()})
        if self.ftm is not None:
            out["ftm/tokens"] = self.bank.tokens
            out["ftm/rho"] = self.bank.rho
            out.update({f"ftm/{k}": t for k, t in self.ftm.tensors().items()})
        out.update({f"head/{k}": t for k, t in self.head.tensors().items()})
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)[:4]}, unexpected {sorted(extra)[:4]}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def stage_features(self, images) -> list[Tensor]:
        img = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.encoders.precision.dtype))
        enc = self.encoders
        if self.backbone == "clip":
            _, stages, grid0 = enc.clip_forward(img, patch_embed=self.patch_embed)
            return [grid0] + stages.stages
        stage_hook = layer_hook = None
        if self.use_srm:
            with T.no_grad():
                cls, clip_stages, _ = enc.clip_forward(img)
                f_sim = compute_similarity(cls, self.text, self.cfg.model.temperature)
            stage_hook = make_stage_hook(clip_stages.stages, f_sim, self.srm, self.cfg.srm.final_stage)
        if self.use_ftm:
            layer_hook = make_layer_hook(self.bank, self.ftm, self.cfg.ftm.residual)
        return enc.sam_forward(img, layer_hook, stage_hook, patch_embed=self.patch_embed).stages

    def __call__(self, images) -> Tensor:
        """``(B, H, W, 3)`` images in [0, 1] -> ``(B, H, W, K)`` logits."""
        stages = self.stage_features(images)
        h, w = images.shape[1:3]
        return decode_logits(stages, self.head, (h, w))
