"""Command-line driver: ``schnet {synth-data,train,eval,ablate,gradcheck}``.

Every command prints human-readable lines followed by a ``key=value`` block
on stdout; progress goes to stderr. Exit status is 0 on full success, 1 when
a run completes but fails its check (gradient check, divergence, hash
mismatch) and 2 for unusable input (bad config, missing data).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import FormatError, class_names, generate_synthetic, load_split
from .scht import SchtFormatError
from .train import (Checkpoint, FrozenHashMismatch, TrainingDiverged, evaluate_arrays, gradcheck_cmd,
                    predict_probs, run_ablation, thread_cap, train)

log = logging.getLogger("schnet")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _emit(lines=(), kv: dict | None = None) -> None:
    for line in lines:
        print(line)
    if kv:
        print("[result]")
        for k, v in kv.items():
            print(f"{k}={v}")


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = ["\t".join(header)] + ["\t".join(str(x) for x in r) for r in rows]
    path.write_text("\n".join(body) + "\n")


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    manifest = generate_synthetic(cfg.synth, out)
    n_val = sum(1 for _, s in manifest if s == "val")
    _emit([f"wrote {len(manifest)} samples to {out}"],
          {"out": out, "n_train": len(manifest) - n_val, "n_val": n_val, "classes": ",".join(class_names(cfg.synth.K))})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .plotting import plot_per_class_iou, plot_predictions, plot_training

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps(), encoding="utf-8")

    def progress(row):
        if "val_miou" in row:
            log.info("iter %d  val mIoU %.4f", row["iter"], row["val_miou"])
        else:
            log.info("iter %d  lr %.3e  loss %.4f  (%.0fs)", row["iter"], row["lr"], row["loss"], row["time"])

    try:
        res = train(cfg, out_dir=out, progress=progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_tsv(out / "train_log.tsv", ["iter", "lr", "loss"],
               [[r["iter"], repr(r["lr"]), repr(r["loss"])] for r in res.log])
    _write_tsv(out / "evals.tsv", ["iter", "miou", "pix_acc", "mean_acc"],
               [[e["iter"], e["miou"], e["pix_acc"], e["mean_acc"]] for e in res.evals])
    names = class_names(cfg.synth.K)
    rep = res.final
    (out / "metrics.txt").write_text("\n".join(rep.to_lines(names)) + "\n")
    figs = out / "figures"
    plot_training(res.log, res.evals, figs / "training.png")
    plot_per_class_iou(rep.per_class_iou, names, figs / "per_class_iou.png", "validation IoU")
    va_i, va_m, _ = load_split(cfg.data.root, "val")
    preds = predict_probs(res.model, va_i[:6]).argmax(-1)
    plot_predictions(va_i[:6], va_m[:6], preds, figs / "predictions.png")
    _emit(rep.to_lines(names), {"checkpoint": out / "checkpoint", "iterations": cfg.schedule.total_iters,
                                "frozen_hash": res.checkpoint.frozen_hash, **rep.to_kv(names)})
    return EXIT_OK


def _resolve_ckpt(path: Path) -> Path:
    return path / "checkpoint" if (path / "checkpoint" / "checkpoint.json").exists() else path


def cmd_eval(args, _cfg) -> int:
    ckpt = Checkpoint.load(_resolve_ckpt(Path(args.ckpt)))
    try:
        model = ckpt.build_model()
    except FrozenHashMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    images, masks, _ = load_split(args.data, args.split)
    tta_cfg = ckpt.config.tta
    rep = evaluate_arrays(model, images, masks, tta=args.tta,
                          scales=tta_cfg.scales if args.tta else (1.0,), flip=args.tta and tta_cfg.flip)
    names = model.class_names
    if args.figures:
        from .plotting import plot_per_class_iou

        plot_per_class_iou(rep.per_class_iou, names, Path(args.figures) / "eval_per_class_iou.png",
                           f"{args.split} IoU{' (TTA)' if args.tta else ''}")
    _emit(rep.to_lines(names), {"split": args.split, "tta": str(args.tta).lower(), "iteration": ckpt.iteration,
                                **rep.to_kv(names)})
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    rows = run_ablation(cfg, seeds, workers=thread_cap(), progress=lambda m: log.info("%s", m))
    header = ["method", "pixAcc", "meanAcc", "mIoU"]
    table = [[r["method"], f"{100 * r['pix_acc']:.2f}", f"{100 * r['mean_acc']:.2f}", f"{100 * r['miou']:.2f}"]
             for r in rows]
    kv = {"seeds": ",".join(map(str, seeds))}
    for r in rows:
        key = r["method"].lower().replace("+", "_")
        kv[f"{key}.miou"] = f"{r['miou']:.6f}"
        kv[f"{key}.miou_per_seed"] = ",".join(f"{v:.6f}" for v in r["miou_per_seed"])
    if args.out:
        from .plotting import plot_ablation

        out = Path(args.out)
        _write_tsv(out / "ablation.tsv", header, table)
        plot_ablation(rows, out / "figures" / "ablation.png")
    _emit(["\t".join(header)] + ["\t".join(r) for r in table], kv)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rep = gradcheck_cmd(cfg)
    kv = {f"{g}.worst_rel_err": f"{v:.3e}" for g, v in rep.worst.items()}
    kv["passed"] = str(rep.passed).lower()
    if rep.frozen_in_trainable:
        kv["frozen_in_trainable"] = ",".join(rep.frozen_in_trainable)
    _emit(rep.to_lines(), kv)
    return EXIT_OK if rep.passed else EXIT_FAIL


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file (defaults apply when omitted)")
        return sp

    sp = with_config(sub.add_parser("synth-data", help="render the synthetic figure-parsing dataset"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = with_config(sub.add_parser("train", help="train and save a checkpoint with report figures"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory or a train --out directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--tta", action="store_true", help="multi-scale + flip test-time augmentation")
    sp.add_argument("--figures", help="directory for the per-class IoU figure")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="train the four ablation rows over several seeds"))
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--out", help="directory for ablation.tsv and the figure")
    sp.set_defaults(func=cmd_ablate)

    sp = with_config(sub.add_parser("gradcheck", help="finite-difference check of every trainable group"))
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(getattr(args, "config", None))
        with threadpool_limits(limits=thread_cap()):
            return args.func(args, cfg)
    except (ConfigError, FileNotFoundError, FormatError, SchtFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
