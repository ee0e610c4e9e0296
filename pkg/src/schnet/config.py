"""Run configuration and the ``key = value`` config-file format.

Keys are dotted ``section.field`` names; ``#`` starts a comment; unknown keys
are errors. Tuple values are comma separated.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .encoders import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    crop: int = 64


@dataclass
class ModelConfig:
    backbone: str = "sam"  # "sam" | "clip" (CLIP-only ablation row)
    temperature: float = 1.0
    prompt_template: str = "a photo of a {}"
    precision: str = "f32"


@dataclass
class SrmConfig:
    enabled: bool = True
    r: int = 4
    final_stage: str = "refine_only"


@dataclass
class FtmConfig:
    enabled: bool = True
    m: int = 8
    rho_init: float = 1e-4
    residual: str = "f_i"
    rho_mode: str = "per_layer"
    r: int = 4


@dataclass
class HeadConfig:
    dim: int = 32


@dataclass
class OptimConfig:
    lr: float = 6e-4
    betas: tuple[float, ...] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class ScheduleConfig:
    total_iters: int = 2000
    warmup_iters: int = 150
    warmup_ratio: float = 1e-5
    policy: str = "constant"  # "constant" | "poly"
    power: float = 1.0


@dataclass
class TrainConfig:
    batch_size: int = 8
    seed: int = 0
    w_iou: float = 1.0
    eval_every: int = 500
    log_every: int = 50


@dataclass
class TtaConfig:
    scales: tuple[float, ...] = (0.75, 1.0, 1.25, 1.5)
    flip: bool = True


@dataclass
class GradcheckConfig:
    patch_size: int = 4
    input_size: int = 8
    batch: int = 2
    max_per_tensor: int = 6
    eps: float = 1e-5
    tol: float = 1e-4


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    srm: SrmConfig = field(default_factory=SrmConfig)
    ftm: FtmConfig = field(default_factory=FtmConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def validate(self) -> "RunConfig":
        s = self.schedule
        if s.total_iters < 0 or s.warmup_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if s.total_iters > 0 and s.warmup_iters >= s.total_iters:
            raise ConfigError(f"schedule.warmup_iters ({s.warmup_iters}) must be < total_iters ({s.total_iters})")
        if self.optim.lr < 0:
            raise ConfigError("optim.lr must be non-negative")
        if s.policy not in ("constant", "poly"):
            raise ConfigError(f"schedule.policy must be constant or poly, got {s.policy!r}")
        if self.model.backbone not in ("sam", "clip"):
            raise ConfigError(f"model.backbone must be sam or clip, got {self.model.backbone!r}")
        if self.data.crop % self.encoder.patch_size or self.synth.canvas % self.encoder.patch_size:
            raise ConfigError("canvas and crop sizes must be divisible by encoder.patch_size")
        return self

    def to_lines(self) -> list[str]:
        lines = []
        for section in dataclasses.fields(self):
            obj = getattr(self, section.name)
            for f in dataclasses.fields(obj):
                lines.append(f"{section.name}.{f.name} = {_format(getattr(obj, f.name))}")
        return lines

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(_parse(p.strip(), inner, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    updates: dict[str, dict[str, object]] = {}
    for key, raw in items.items():
        sec, _, name = key.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, sec)
        hints = typing.get_type_hints(type(obj))
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(sec, {})[name] = _parse(raw, hints[name], key)
    changes = {}
    for sec, vals in updates.items():
        try:
            changes[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
        except ValueError as exc:
            raise ConfigError(f"invalid {sec} settings: {exc}") from None
    return dataclasses.replace(cfg, **changes)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    items = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in items:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        items[key] = value
    return apply_overrides(base or RunConfig(), items).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
