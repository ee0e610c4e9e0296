"""Training, evaluation, checkpoints, ablation sweep and gradient verification."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig, parse_config_text
from .data import Sample, augment_sample, load_split
from .encoders import build_encoders, derive_rng
from .head import combined_loss
from .metrics import MetricsReport, confusion_matrix
from .model import SCHNet
from .scht import load_archive, save_archive
from .tensor import Tensor, finite_diff_grad_check
from .tta import tta_predict

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class FrozenHashMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer

def lr_at(it: int, cfg: RunConfig) -> float:
    """Linear warmup from ``lr * warmup_ratio`` then constant (or poly decay)."""
    s, lr = cfg.schedule, cfg.optim.lr
    if it < s.warmup_iters:
        return lr * (s.warmup_ratio + (1.0 - s.warmup_ratio) * it / s.warmup_iters)
    if s.policy == "poly" and s.total_iters > s.warmup_iters:
        frac = (it - s.warmup_iters) / (s.total_iters - s.warmup_iters)
        return lr * (1.0 - frac) ** s.power
    return lr


def decays(name: str) -> bool:
    return name.endswith("/W")


class AdamW:
    """Adam with decoupled weight decay applied to weight matrices only."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and decays(k):
                p.data -= np.asarray(lr * self.weight_decay, dtype=p.dtype) * p.data
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= np.asarray(lr, dtype=p.dtype) * step.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    frozen_hash: str
    iteration: int
    rng_state: dict
    config: RunConfig

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_archive(path, self.arrays)
        meta = {"frozen_hash": self.frozen_hash, "iteration": self.iteration,
                "rng_state": self.rng_state, "config": self.config.to_lines()}
        (path / "checkpoint.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        meta_path = path / "checkpoint.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"not a checkpoint directory: {path}")
        meta = json.loads(meta_path.read_text())
        cfg = parse_config_text("\n".join(meta["config"]))
        arrays = {k: v for k, v in load_archive(path).items() if not k.startswith("encoders/")}
        return cls(arrays, meta["frozen_hash"], meta["iteration"], meta["rng_state"], cfg)

    def build_model(self) -> SCHNet:
        model = SCHNet(self.config)
        digest = model.encoders.digest()
        if digest != self.frozen_hash:
            raise FrozenHashMismatch(
                f"frozen encoder hash {digest[:12]} does not match checkpoint {self.frozen_hash[:12]}")
        model.load_state_arrays(self.arrays)
        return model


def make_checkpoint(model: SCHNet, iteration: int, rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(model.state_arrays(), model.encoders.digest(), iteration,
                      _jsonable(rng.bit_generator.state), model.cfg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------- evaluation

def predict_probs(model: SCHNet, images: np.ndarray, batch: int = 16) -> np.ndarray:
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            outs.append(T.softmax(model(images[i:i + batch]), axis=-1).data)
    return np.concatenate(outs)


def evaluate_arrays(model: SCHNet, images: np.ndarray, masks: np.ndarray, tta: bool = False,
                    scales: Sequence[float] = (1.0,), flip: bool = False, batch: int = 16) -> MetricsReport:
    k = model.n_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for i in range(0, len(images), batch):
        x = images[i:i + batch]
        if tta:
            prob = tta_predict(model, x, scales, flip, multiple=model.cfg.encoder.patch_size)
        else:
            prob = predict_probs(model, x, batch)
        conf += confusion_matrix(prob.argmax(axis=-1), masks[i:i + batch], k)
    return MetricsReport.from_confusion(conf)


def evaluate(ckpt: Checkpoint | str | Path, data_root: str | Path, tta: bool = False,
             split: str = "val") -> MetricsReport:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    model = ckpt.build_model()
    images, masks, _ = load_split(data_root, split)
    cfg = ckpt.config
    return evaluate_arrays(model, images, masks, tta=tta, scales=cfg.tta.scales if tta else (1.0,),
                           flip=cfg.tta.flip and tta)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: SCHNet
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final: MetricsReport | None = None


def _batch(train_imgs, train_masks, order, rng, cfg: RunConfig):
    crop = (cfg.data.crop, cfg.data.crop)
    imgs, masks = [], []
    for i in order:
        s = augment_sample(Sample(train_imgs[i], train_masks[i]), rng, crop)
        imgs.append(s.image)
        masks.append(s.mask)
    return np.stack(imgs), np.stack(masks)


def train(cfg: RunConfig, data: tuple | None = None, out_dir: str | Path | None = None,
          progress: Callable[[dict], None] | None = None, evaluate_final: bool = True) -> TrainResult:
    """Train the inserted modules, patch embedding and head; encoders stay frozen.

    ``data`` may carry preloaded ``(train_imgs, train_masks, val_imgs, val_masks)``
    arrays; otherwise the splits are read from ``cfg.data.root``.
    """
    cfg.validate()
    if data is None:
        tr_i, tr_m, _ = load_split(cfg.data.root, "train")
        va_i, va_m, _ = load_split(cfg.data.root, "val")
    else:
        tr_i, tr_m, va_i, va_m = data
    model = SCHNet(cfg)
    params = model.parameters()
    opt = AdamW(params, cfg.optim.betas, cfg.optim.eps, cfg.optim.weight_decay)
    rng = derive_rng(cfg.train.seed, "data")
    result = TrainResult(checkpoint=make_checkpoint(model, 0, rng), model=model)
    last_good = result.checkpoint
    dtype = model.encoders.precision.dtype

    order: list[int] = []
    t0 = time.time()
    for it in range(cfg.schedule.total_iters):
        if len(order) < cfg.train.batch_size:
            order.extend(rng.permutation(len(tr_i)).tolist())
        idx, order = order[:cfg.train.batch_size], order[cfg.train.batch_size:]
        x, y = _batch(tr_i, tr_m, idx, rng, cfg)
        lr = lr_at(it, cfg)
        opt.zero_grad()
        loss = combined_loss(model(x.astype(dtype)), y, cfg.train.w_iou)
        lv = float(loss.data)
        if not math.isfinite(lv):
            where = None
            if out_dir is not None:
                where = Path(out_dir) / "last_good"
                last_good.save(where)
            raise TrainingDiverged(f"non-finite loss at iteration {it}; last good checkpoint "
                                   f"(iteration {last_good.iteration}) saved to {where}")
        loss.backward()
        opt.step(lr)
        row = {"iter": it, "lr": lr, "loss": lv, "time": time.time() - t0}
        result.log.append(row)
        if progress and (it % cfg.train.log_every == 0 or it == cfg.schedule.total_iters - 1):
            progress(row)
        done = it + 1
        if cfg.train.eval_every and done % cfg.train.eval_every == 0 and done < cfg.schedule.total_iters:
            rep = evaluate_arrays(model, va_i, va_m)
            result.evals.append({"iter": done, "miou": rep.miou, "pix_acc": rep.pix_acc, "mean_acc": rep.mean_acc})
            last_good = make_checkpoint(model, done, rng)
            if progress:
                progress({"iter": done, "val_miou": rep.miou})

    result.checkpoint = make_checkpoint(model, cfg.schedule.total_iters, rng)
    if evaluate_final:
        rep = evaluate_arrays(model, va_i, va_m)
        result.final = rep
        result.evals.append({"iter": cfg.schedule.total_iters, "miou": rep.miou, "pix_acc": rep.pix_acc,
                             "mean_acc": rep.mean_acc})
    if out_dir is not None:
        result.checkpoint.save(Path(out_dir) / "checkpoint")
    return result


# ---------------------------------------------------------------- ablation

ABLATION_ROWS = (
    ("CLIP", {"model.backbone": "clip", "srm.enabled": "false", "ftm.enabled": "false"}),
    ("SAM", {"model.backbone": "sam", "srm.enabled": "false", "ftm.enabled": "false"}),
    ("SAM+SRM", {"model.backbone": "sam", "srm.enabled": "true", "ftm.enabled": "false"}),
    ("SAM+SRM+FTM", {"model.backbone": "sam", "srm.enabled": "true", "ftm.enabled": "true"}),
)


def ablation_configs(cfg: RunConfig, seeds: Sequence[int]) -> list[tuple[str, int, RunConfig]]:
    from .config import apply_overrides

    jobs = []
    for name, over in ABLATION_ROWS:
        for seed in seeds:
            c = apply_overrides(cfg, {**over, "train.seed": str(seed)})
            jobs.append((name, seed, c))
    return jobs


def _ablation_job(job) -> tuple[str, int, dict]:
    name, seed, cfg, data = job
    res = train(cfg, data=data)
    rep = res.final
    return name, seed, {"miou": rep.miou, "pix_acc": rep.pix_acc, "mean_acc": rep.mean_acc}


def run_ablation(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), data: tuple | None = None,
                 workers: int | None = None, progress: Callable[[str], None] | None = None) -> list[dict]:
    """Train the four ablation rows with shared seeds and budgets; one summary dict per row."""
    if data is None:
        tr_i, tr_m, _ = load_split(cfg.data.root, "train")
        va_i, va_m, _ = load_split(cfg.data.root, "val")
        data = (tr_i, tr_m, va_i, va_m)
    jobs = [(name, seed, c, data) for name, seed, c in ablation_configs(cfg, seeds)]
    workers = workers or thread_cap()
    results: dict[tuple[str, int], dict] = {}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            for name, seed, r in ex.map(_ablation_job, jobs):
                results[(name, seed)] = r
                if progress:
                    progress(f"{name} seed={seed} mIoU={r['miou']:.4f}")
    else:
        for job in jobs:
            name, seed, r = _ablation_job(job)
            results[(name, seed)] = r
            if progress:
                progress(f"{name} seed={seed} mIoU={r['miou']:.4f}")
    rows = []
    for name, _ in ABLATION_ROWS:
        per_seed = [results[(name, s)] for s in seeds]
        row = {"method": name, "seeds": list(seeds)}
        for key in ("pix_acc", "mean_acc", "miou"):
            row[key] = float(np.mean([r[key] for r in per_seed]))
            row[f"{key}_per_seed"] = [r[key] for r in per_seed]
        rows.append(row)
    return rows


def thread_cap() -> int:
    raw = os.environ.get("SCHNET_THREADS")
    if raw:
        return max(1, int(raw))
    return 1


# ---------------------------------------------------------------- gradient check

PARAM_GROUPS = ("patch_embed", "srm", "ftm/tokens", "ftm/rho", "ftm", "head")


def param_group(name: str) -> str:
    for g in ("ftm/tokens", "ftm/rho"):
        if name == g:
            return g
    return name.split("/", 1)[0]


@dataclass
class GradcheckReport:
    worst: dict[str, float]
    n_checked: dict[str, int]
    tol: float
    frozen_in_trainable: list[str]

    @property
    def passed(self) -> bool:
        return not self.frozen_in_trainable and all(v < self.tol for v in self.worst.values())

    def to_lines(self) -> list[str]:
        lines = [f"{g}\tchecked={self.n_checked[g]}\tworst_rel_err={self.worst[g]:.3e}\t"
                 f"{'PASS' if self.worst[g] < self.tol else 'FAIL'}" for g in self.worst]
        lines.append(f"overall\t{'PASS' if self.passed else 'FAIL'}\ttol={self.tol:g}")
        return lines


def gradcheck_model(cfg: RunConfig) -> tuple[SCHNet, Callable[[], Tensor]]:
    """f64 micro model with every trainable tensor randomized, plus its loss closure."""
    g = cfg.gradcheck
    enc = dataclasses.replace(cfg.encoder, patch_size=g.patch_size)
    model_cfg = dataclasses.replace(cfg.model, precision="f64")
    data_cfg = dataclasses.replace(cfg.data, crop=g.input_size)
    micro = dataclasses.replace(cfg, encoder=enc, model=model_cfg, data=data_cfg)
    model = SCHNet(micro, build_encoders(enc, "f64"))
    rng = derive_rng(cfg.train.seed, "gradcheck")
    for name, t in model.parameters().items():
        scale = 0.5 if name == "ftm/rho" else 0.5 / math.sqrt(max(1, t.shape[-1]))
        t.data = (scale * rng.standard_normal(t.shape)).astype(np.float64)
    x = rng.uniform(0.0, 1.0, (g.batch, g.input_size, g.input_size, 3))
    y = rng.integers(0, model.n_classes, (g.batch, g.input_size, g.input_size))
    y[0, 0, 0] = 255

    def loss_fn() -> Tensor:
        return combined_loss(model(x), y, cfg.train.w_iou)

    return model, loss_fn


def gradcheck_cmd(cfg: RunConfig) -> GradcheckReport:
    g = cfg.gradcheck
    model, loss_fn = gradcheck_model(cfg)
    params = model.parameters()
    frozen_ids = {id(t) for t in _frozen_tensors(model)}
    leaked = [k for k, t in params.items() if id(t) in frozen_ids]
    rng = derive_rng(cfg.train.seed, "gradcheck", "indices")
    indices = {}
    for name, t in params.items():
        n = t.data.size
        flat = rng.choice(n, size=min(n, g.max_per_tensor), replace=False)
        indices[name] = [np.unravel_index(int(i), t.shape) for i in sorted(flat)]
    entries = finite_diff_grad_check(loss_fn, dict(params), eps=g.eps, tol=g.tol, indices=indices)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for e in entries:
        grp = param_group(e.name)
        worst[grp] = max(worst.get(grp, 0.0), e.rel_err)
        counts[grp] = counts.get(grp, 0) + 1
    return GradcheckReport(worst, counts, g.tol, leaked)


def _frozen_tensors(model: SCHNet) -> list[Tensor]:
    enc = model.encoders
    out = [enc.clip_patch.W, enc.clip_patch.b, enc.sam_patch.W, enc.sam_patch.b, enc.clip_cls,
           enc.clip_cls_pos, enc.clip_proj, *enc.clip_ln_post]
    for blk in enc.clip_blocks + enc.sam_blocks:
        out.extend(blk.named().values())
    return out
