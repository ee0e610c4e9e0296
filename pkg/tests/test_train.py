import dataclasses

import numpy as np
import pytest

from conftest import tiny_config
from schnet import tensor as T
from schnet.config import apply_overrides
from schnet.data import load_split
from schnet.encoders import build_encoders
from schnet.model import SCHNet
from schnet.tensor import Tensor
from schnet.train import (AdamW, Checkpoint, FrozenHashMismatch, TrainingDiverged, _frozen_tensors, ablation_configs,
                          decays, evaluate, evaluate_arrays, gradcheck_cmd, lr_at, param_group,
                          thread_cap, train)


def _same_arrays(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ------------------------------------------------------------ schedule / optimizer

def test_warmup_matches_formula_from_log(tiny_data):
    cfg = tiny_config(schedule__total_iters=8, schedule__warmup_iters=5, schedule__warmup_ratio=0.01)
    res = train(cfg, data=tiny_data[1], evaluate_final=False)
    lr, r, w = cfg.optim.lr, 0.01, 5
    for row in res.log:
        t = row["iter"]
        expect = lr * (r + (1 - r) * t / w) if t < w else lr
        assert abs(row["lr"] - expect) < 1e-9


def test_schedule_policies():
    cfg = tiny_config(schedule__total_iters=100, schedule__warmup_iters=10)
    assert lr_at(0, cfg) == cfg.optim.lr * cfg.schedule.warmup_ratio
    assert lr_at(10, cfg) == lr_at(99, cfg) == cfg.optim.lr
    poly = tiny_config(schedule__total_iters=100, schedule__warmup_iters=10, schedule__policy="poly")
    assert lr_at(10, poly) == poly.optim.lr
    assert abs(lr_at(55, poly) - poly.optim.lr * 0.5) < 1e-15


def test_adamw_single_step_hand_computed():
    w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    b = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW({"layer/W": w, "layer/b": b}, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    w.grad = np.array([[0.2, -0.4]])
    b.grad = np.array([1.0])
    opt.step(0.01)
    # the bias-corrected first step is lr * g / (|g| + eps); decay hits W only
    for w0, g, got in zip([1.0, -2.0], [0.2, -0.4], w.data[0]):
        ref = w0 - 0.01 * 0.1 * w0 - 0.01 * g / (abs(g) + 1e-8)
        assert abs(got - ref) < 1e-12
    assert abs(b.data[0] - (0.5 - 0.01 * 1.0 / (1.0 + 1e-8))) < 1e-12
    assert decays("srm/mlp_sim/W") and not decays("ftm/tokens") and not decays("ftm/rho")


# ------------------------------------------------------------ training contract

def test_zero_iterations_checkpoint_is_init(tiny_data):
    cfg = tiny_config(schedule__total_iters=0, schedule__warmup_iters=0)
    res = train(cfg, data=tiny_data[1], evaluate_final=False)
    fresh = SCHNet(cfg)
    assert _same_arrays(res.checkpoint.arrays, fresh.state_arrays())
    assert res.checkpoint.frozen_hash == fresh.encoders.digest()
    assert res.checkpoint.iteration == 0


def test_zero_lr_leaves_params_unchanged(tiny_data):
    cfg = tiny_config(optim__lr=0)
    res = train(cfg, data=tiny_data[1], evaluate_final=False)
    assert _same_arrays(res.checkpoint.arrays, SCHNet(cfg).state_arrays())


def test_same_seed_bitwise_identical(tiny_data, tmp_path):
    cfg = tiny_config()
    a = train(cfg, data=tiny_data[1], out_dir=tmp_path / "a", evaluate_final=False)
    b = train(cfg, data=tiny_data[1], out_dir=tmp_path / "b", evaluate_final=False)
    assert _same_arrays(a.checkpoint.arrays, b.checkpoint.arrays)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    ra, rb = tmp_path / "a" / "checkpoint", tmp_path / "b" / "checkpoint"
    files = sorted(p.relative_to(ra) for p in ra.rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        assert (ra / rel).read_bytes() == (rb / rel).read_bytes()
    c = train(tiny_config(train__seed=1), data=tiny_data[1], evaluate_final=False)
    assert not _same_arrays(a.checkpoint.arrays, c.checkpoint.arrays)


def test_training_moves_params_and_keeps_encoders_frozen(tiny_data):
    cfg = tiny_config()
    enc = build_encoders(cfg.encoder, cfg.model.precision)
    before = enc.digest()
    res = train(cfg, data=tiny_data[1], evaluate_final=False)
    assert enc.digest() == before == res.checkpoint.frozen_hash
    init = SCHNet(cfg).state_arrays()
    moved = [k for k in init if not np.array_equal(init[k], res.checkpoint.arrays[k])]
    assert any(k.startswith("srm/") for k in moved) and any(k.startswith("ftm/") for k in moved)
    assert any(k.startswith("head/") for k in moved) and any(k.startswith("patch_embed/") for k in moved)


def test_optimizer_holds_only_trainable_tensors():
    model = SCHNet(tiny_config())
    opt = AdamW(model.parameters())
    frozen = {id(t) for t in _frozen_tensors(model)}
    assert not any(id(t) in frozen for t in opt.params.values())
    assert not any(k.startswith("encoders/") for k in opt.m)
    assert all(not t.requires_grad for t in _frozen_tensors(model))


def test_divergence_aborts_with_iteration_and_last_good(tiny_data, tmp_path, monkeypatch):
    import schnet.train as tr

    real = tr.combined_loss
    calls = {"n": 0}

    def poisoned(logits, gt, w_iou=1.0):
        calls["n"] += 1
        loss = real(logits, gt, w_iou)
        return loss * float("nan") if calls["n"] == 4 else loss

    monkeypatch.setattr(tr, "combined_loss", poisoned)
    cfg = tiny_config(train__eval_every=2)
    with pytest.raises(TrainingDiverged, match="iteration 3"):
        train(cfg, data=tiny_data[1], out_dir=tmp_path)
    saved = Checkpoint.load(tmp_path / "last_good")
    assert saved.iteration == 2


# ------------------------------------------------------------ checkpoints and evaluation

def test_checkpoint_round_trip_forward_bitwise(tiny_data, tmp_path):
    cfg = tiny_config()
    res = train(cfg, data=tiny_data[1], evaluate_final=False)
    x = tiny_data[1][2][:2]
    with T.no_grad():
        ref = res.model(x).data
    res.checkpoint.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck")
    assert loaded.config == cfg and loaded.iteration == cfg.schedule.total_iters
    with T.no_grad():
        assert np.array_equal(loaded.build_model()(x).data, ref)


def test_frozen_hash_mismatch_refused(tiny_data, tmp_path):
    cfg = tiny_config(schedule__total_iters=0, schedule__warmup_iters=0)
    res = train(cfg, data=tiny_data[1], evaluate_final=False)
    bad = dataclasses.replace(res.checkpoint, frozen_hash="0" * 64)
    with pytest.raises(FrozenHashMismatch):
        bad.build_model()
    bad.save(tmp_path / "bad")
    with pytest.raises(FrozenHashMismatch):
        evaluate(tmp_path / "bad", tiny_data[0])


def test_evaluate_repeatable_and_trivial_tta(tiny_data, tmp_path):
    cfg = dataclasses.replace(tiny_config(), data=dataclasses.replace(tiny_config().data, root=str(tiny_data[0])))
    res = train(cfg, data=tiny_data[1], out_dir=tmp_path, evaluate_final=False)
    a = evaluate(tmp_path / "checkpoint", tiny_data[0])
    b = evaluate(tmp_path / "checkpoint", tiny_data[0])
    assert np.array_equal(a.confusion, b.confusion) and a.miou == b.miou
    va_i, va_m, _ = load_split(tiny_data[0], "val")
    t = evaluate_arrays(res.model, va_i, va_m, tta=True, scales=(1.0,), flip=False)
    assert np.array_equal(t.confusion, a.confusion)
    full = evaluate_arrays(res.model, va_i, va_m, tta=True, scales=cfg.tta.scales, flip=True)
    assert full.confusion.sum() == a.confusion.sum()


# ------------------------------------------------------------ model wiring

def test_init_identity_full_vs_sam_only():
    full = SCHNet(tiny_config(ftm__rho_init=0))
    sam = SCHNet(tiny_config(srm__enabled="false", ftm__enabled="false"))
    x = np.random.default_rng(0).random((4, 32, 32, 3)).astype(np.float32)
    with T.no_grad():
        assert np.array_equal(full(x).data, sam(x).data)


def test_disabling_modules_reproduces_sam_row_bitwise(tiny_data):
    rows = {name: c for name, _, c in ablation_configs(tiny_config(), [0])}
    off = apply_overrides(rows["SAM+SRM+FTM"], {"srm.enabled": "false", "ftm.enabled": "false"})
    via_flags = train(off, data=tiny_data[1], evaluate_final=False)
    sam = train(rows["SAM"], data=tiny_data[1], evaluate_final=False)
    assert _same_arrays(via_flags.checkpoint.arrays, sam.checkpoint.arrays)
    assert [name for name, _, _ in ablation_configs(tiny_config(), [0, 1])] == \
        ["CLIP", "CLIP", "SAM", "SAM", "SAM+SRM", "SAM+SRM", "SAM+SRM+FTM", "SAM+SRM+FTM"]


def test_clip_row_uses_clip_features():
    model = SCHNet(tiny_config(model__backbone="clip"))
    assert model.srm is None and model.ftm is None
    stages = model.stage_features(np.zeros((1, 32, 32, 3), np.float32))
    assert len(stages) == 5 and stages[0].shape[-1] == model.cfg.encoder.embed_dim_clip


def test_token_gradients_reach_every_layer(tiny_data):
    from schnet.head import combined_loss

    cfg = tiny_config(ftm__rho_init=0.5, schedule__total_iters=1, schedule__warmup_iters=0)
    x, y = tiny_data[1][0][:2], tiny_data[1][1][:2]
    fresh = SCHNet(cfg)
    combined_loss(fresh(x), y).backward()
    # zero-initialized mlp_up hides the attached features from the loss at step 0
    assert not fresh.bank.tokens.grad.any()
    model = train(cfg, data=tiny_data[1], evaluate_final=False).model
    for t in model.parameters().values():
        t.grad = None
    combined_loss(model(x), y).backward()
    g = model.bank.tokens.grad
    assert all(np.abs(g[i]).max() > 0 for i in range(g.shape[0]))


def test_thread_cap_env(monkeypatch):
    monkeypatch.delenv("SCHNET_THREADS", raising=False)
    assert thread_cap() == 1
    monkeypatch.setenv("SCHNET_THREADS", "3")
    assert thread_cap() == 3


# ------------------------------------------------------------ gradient check

def test_gradcheck_passes_every_group():
    rep = gradcheck_cmd(tiny_config())
    assert rep.passed, rep.to_lines()
    assert set(rep.worst) == {"patch_embed", "srm", "ftm/tokens", "ftm/rho", "ftm", "head"}
    assert all(v < 1e-4 for v in rep.worst.values())
    assert rep.frozen_in_trainable == []
    assert param_group("ftm/mlp_up/W") == "ftm" and param_group("ftm/rho") == "ftm/rho"


def test_gradcheck_catches_corrupted_backward(monkeypatch):
    real = T.gelu

    def bad_gelu(x):
        out = real(x)
        inner = out._backward

        def backward(g):
            return tuple(1.05 * v for v in inner(g))

        out._backward = backward
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    rep = gradcheck_cmd(tiny_config())
    assert not rep.passed
    assert any(line.endswith("FAIL") for line in rep.to_lines()[:-1])
