"""Fine-tuning module: learnable per-layer tokens plus a shared three-layer residual adapter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import MlpParams, Precision, ShapeError, Tensor

RESIDUAL_MODES = ("f_i", "f_prime")
RHO_MODES = ("per_layer", "scalar")


@dataclass
class TokenBank:
    tokens: Tensor  # (n_layers, m, c)
    rho: Tensor  # (n_layers,) or (1,) in scalar mode

    @property
    def n_layers(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, n_layers: int, m: int, c: int, rho_init: float = 1e-4,
             rho_mode: str = "per_layer", precision="f32") -> "TokenBank":
        if rho_mode not in RHO_MODES:
            raise ValueError(f"ftm.rho_mode must be one of {RHO_MODES}, got {rho_mode!r}")
        dt = Precision.of(precision).dtype
        toks = rng.standard_normal((n_layers, m, c)) / np.sqrt(c)
        n_rho = n_layers if rho_mode == "per_layer" else 1
        return cls(Tensor(toks.astype(dt), requires_grad=True),
                   Tensor(np.full(n_rho, rho_init, dtype=dt), requires_grad=True))

    def rho_at(self, layer: int) -> Tensor:
        return self.rho[layer if self.rho.shape[0] > 1 else 0]


@dataclass
class FtmParams:
    mlp_tok: list[MlpParams]  # per layer, c -> c
    mlp_out: list[MlpParams]  # per layer, c -> c
    mlp_down: MlpParams  # shared, c -> c / r
    mlp_mid: list[MlpParams]  # per layer, c/r -> c/r
    mlp_up: MlpParams  # shared, c / r -> c

    @classmethod
    def init(cls, rng: np.random.Generator, n_layers: int, c: int, r: int = 4, precision="f32") -> "FtmParams":
        if c % r:
            raise ValueError(f"channel dim {c} not divisible by bottleneck ratio {r}")
        mlp_tok = [MlpParams.init(rng, c, c, precision) for _ in range(n_layers)]
        mlp_out = [MlpParams.init(rng, c, c, precision) for _ in range(n_layers)]
        mlp_down = MlpParams.init(rng, c, c // r, precision)
        mlp_mid = [MlpParams.init(rng, c // r, c // r, precision) for _ in range(n_layers)]
        mlp_up = MlpParams.init(rng, c // r, c, precision, zero=True)
        return cls(mlp_tok, mlp_out, mlp_down, mlp_mid, mlp_up)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in ("mlp_tok", "mlp_out", "mlp_mid"):
            for i, p in enumerate(getattr(self, name)):
                for k, t in p.tensors().items():
                    out[f"{name}/{i}/{k}"] = t
        for name in ("mlp_down", "mlp_up"):
            for k, t in getattr(self, name).tensors().items():
                out[f"{name}/{k}"] = t
        return out


def ftm_attach(f_i: Tensor, bank: TokenBank, layer: int, p: FtmParams) -> Tensor:
    """``rho * mlp_out(softmax(f_i @ T_i.T) @ mlp_tok(T_i)) + f_i`` for ``(..., L, c)`` features."""
    if not 0 <= layer < bank.n_layers:
        raise IndexError(f"layer {layer} out of range for a bank of {bank.n_layers} layers")
    if f_i.shape[-1] != bank.tokens.shape[-1]:
        raise ShapeError(f"feature dim {f_i.shape[-1]} != token dim {bank.tokens.shape[-1]}")
    t_i = bank.tokens[layer]
    attn = T.softmax(T.matmul(f_i, T.transpose(t_i, (1, 0))), axis=-1)
    mixed = T.matmul(attn, T.mlp_apply(p.mlp_tok[layer], t_i))
    return bank.rho_at(layer) * T.mlp_apply(p.mlp_out[layer], mixed) + f_i


def ftm_refine(f_prime: Tensor, f_i: Tensor, layer: int, p: FtmParams, residual: str = "f_i") -> Tensor:
    """Shared down / per-layer mid / shared up chain on ``f_prime``, added to ``f_i``."""
    if f_prime.shape != f_i.shape:
        raise ShapeError(f"f_prime {f_prime.shape} and f_i {f_i.shape} differ")
    if residual not in RESIDUAL_MODES:
        raise ValueError(f"ftm.residual must be one of {RESIDUAL_MODES}, got {residual!r}")
    h = T.gelu(T.mlp_apply(p.mlp_down, f_prime))
    h = T.gelu(T.mlp_apply(p.mlp_mid[layer], h))
    return T.mlp_apply(p.mlp_up, h) + (f_i if residual == "f_i" else f_prime)


def make_layer_hook(bank: TokenBank, p: FtmParams, residual: str = "f_i"):
    def hook(layer: int, x: Tensor) -> Tensor:
        return ftm_refine(ftm_attach(x, bank, layer, p), x, layer, p, residual)

    return hook
