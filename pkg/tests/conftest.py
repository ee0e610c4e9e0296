import sys

import pytest

from schnet.config import RunConfig, apply_overrides
from schnet.data import SynthConfig, generate_synthetic, load_split

TINY = {
    "synth.n_train": "12", "synth.n_val": "4", "synth.canvas": "32", "data.crop": "32",
    "schedule.total_iters": "6", "schedule.warmup_iters": "3", "train.batch_size": "2",
    "train.eval_every": "0", "ftm.rho_init": "0.05", "encoder.patch_size": "8",
}


def tiny_config(**over) -> RunConfig:
    items = dict(TINY)
    items.update({k.replace("__", "."): str(v) for k, v in over.items()})
    return apply_overrides(RunConfig(), items).validate()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """``(root, (train_imgs, train_masks, val_imgs, val_masks))`` for the tiny config."""
    root = tmp_path_factory.mktemp("tiny_ds")
    cfg = tiny_config()
    generate_synthetic(SynthConfig(n_train=cfg.synth.n_train, n_val=cfg.synth.n_val, canvas=cfg.synth.canvas), root)
    tr_i, tr_m, _ = load_split(root, "train")
    va_i, va_m, _ = load_split(root, "val")
    return root, (tr_i, tr_m, va_i, va_m)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
