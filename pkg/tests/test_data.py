import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schnet.data import (IGNORE, FormatError, Sample, SynthConfig, augment_sample, class_names, decode_pgm,
                         decode_ppm, encode_pgm, encode_ppm, generate_synthetic, load_split, read_manifest,
                         read_sample, render_figure, write_sample)


def _digest_tree(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------ formats

def test_ppm_layout_exact():
    img = np.array([[[0, 128, 255], [1, 2, 3]]], dtype=np.uint8)
    assert encode_ppm(img) == b"P6\n2 1\n255\n" + bytes([0, 128, 255, 1, 2, 3])
    assert encode_pgm(np.array([[7, 255]], np.uint8)) == b"P5\n2 1\n255\n\x07\xff"


def test_header_comments_and_whitespace_accepted():
    raw = b"P5 # a comment\n 2\t# width\n1\r\n255\n\x01\x02"
    assert decode_pgm(raw).tolist() == [[1, 2]]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
def test_round_trip_bitwise(h, w, seed):
    rng = np.random.default_rng(seed)
    raw_img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    raw_mask = rng.integers(0, 256, (h, w), dtype=np.uint8)
    img = decode_ppm(encode_ppm(raw_img))
    assert np.array_equal(np.rint(img * 255).astype(np.uint8), raw_img)
    assert encode_ppm(img) == encode_ppm(raw_img)
    assert np.array_equal(decode_pgm(encode_pgm(raw_mask)), raw_mask)


def test_sample_file_round_trip(tmp_path):
    image, mask = render_figure(np.random.default_rng(0), 32, 6, 0.5)
    s = Sample(image, mask, "x1")
    write_sample(tmp_path, s)
    back = read_sample(tmp_path, "x1")
    assert np.array_equal(back.image, image) and np.array_equal(back.mask, mask)
    assert back.image.dtype == np.float32 and back.mask.dtype == np.uint8


def test_ignore_value_survives(tmp_path):
    mask = np.array([[0, 255], [3, 255]], np.uint8)
    write_sample(tmp_path, Sample(np.zeros((2, 2, 3), np.float32), mask, "m"))
    assert (read_sample(tmp_path, "m").mask == IGNORE).sum() == 2


@pytest.mark.parametrize("raw, where", [
    (b"P3\n1 1\n255\n\x00\x00\x00", 0),
    (b"P6\n1 1\n65535\n\x00\x00\x00", 7),
    (b"P6\n1 x\n255\n\x00\x00\x00", 5),
    (b"P6\n1 1\n255\n\x00\x00", 13),
    (b"P6\n1 1\n255\n\x00\x00\x00\x00", 14),
    (b"P6\n0 1\n255\n", 3),
    (b"P6\n1 1\n255", 10),
])
def test_malformed_headers_report_offsets(raw, where):
    with pytest.raises(FormatError) as exc:
        decode_ppm(raw)
    assert exc.value.offset == where
    assert f"at byte {where}" in str(exc.value)


def fuzz_cases(n, seed=7):
    """Truncated files, trailing garbage, and header bytes replaced by non-digit junk."""
    rng = np.random.default_rng(seed)
    base = [encode_ppm(rng.integers(0, 256, (5, 6, 3), dtype=np.uint8)),
            encode_pgm(rng.integers(0, 7, (5, 6), dtype=np.uint8))]
    for i in range(n):
        raw = base[i % 2]
        kind = (i // 2) % 3
        if kind == 0:
            buf = raw[: int(rng.integers(0, len(raw)))]
        elif kind == 1:
            buf = raw + rng.integers(0, 256, int(rng.integers(1, 9)), dtype=np.uint8).tobytes()
        else:
            buf = bytearray(raw)
            hdr = raw.index(b"255\n") + 4
            buf[int(rng.integers(0, hdr))] = int(rng.choice([ord("x"), ord("-"), 0, 0xFF]))
            buf = bytes(buf)
        yield (decode_ppm if i % 2 == 0 else decode_pgm), buf


def test_fuzz_truncation_and_corruption_always_format_error():
    n = 0
    for dec, buf in fuzz_cases(1000):
        with pytest.raises(FormatError):
            dec(buf)
        n += 1
    assert n == 1000


# ------------------------------------------------------------ synthetic data

def test_generation_is_deterministic(tmp_path):
    cfg = SynthConfig(n_train=6, n_val=3, seed=4)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    assert _digest_tree(tmp_path / "a") == _digest_tree(tmp_path / "b")
    rows = read_manifest(tmp_path / "a")
    assert rows[0] == ("train_00000", "train") and rows[-1] == ("val_00002", "val")
    assert (tmp_path / "a" / "manifest.tsv").read_text().splitlines()[0] == "id\tsplit"
    images, masks, ids = load_split(tmp_path / "a", "val")
    assert images.shape == (3, 64, 64, 3) and masks.shape == (3, 64, 64) and len(ids) == 3


def test_k2_masks_are_binary():
    for i in range(20):
        _, mask = render_figure(np.random.default_rng(i), 64, 2, 0.5)
        assert set(np.unique(mask).tolist()) <= {0, 1}


def test_class_ids_below_k_for_every_k():
    for k in range(2, 7):
        _, mask = render_figure(np.random.default_rng(k), 64, k, 0.5)
        assert mask.max() < k
        assert class_names(k)[0] == "background"


def test_default_config_class_coverage():
    cfg = SynthConfig()
    counts = np.zeros(cfg.K)
    n = 200
    for i in range(n):
        _, mask = render_figure(np.random.default_rng(i), cfg.canvas, cfg.K, cfg.clutter)
        counts[np.unique(mask)] += 1
    assert (counts[1:] / n >= 0.95).all(), counts


def test_synth_config_validation(tmp_path):
    with pytest.raises(ValueError):
        SynthConfig(K=1)
    with pytest.raises(ValueError):
        SynthConfig(K=9)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        generate_synthetic(SynthConfig(n_train=1, n_val=1), blocker / "sub")


# ------------------------------------------------------------ augmentation

@pytest.fixture(scope="module")
def sample():
    image, mask = render_figure(np.random.default_rng(11), 64, 6, 0.5)
    return Sample(image, mask, "s")


def test_output_dims_always_fixed(sample):
    rng = np.random.default_rng(0)
    for i in range(1000):
        fixed = ((8, 16, 64, 72)[i % 4], (64, 8, 32, 48)[i % 4])
        out = augment_sample(sample, rng, fixed)
        assert out.image.shape == fixed + (3,) and out.mask.shape == fixed
        ids = set(np.unique(out.mask).tolist())
        assert ids <= set(range(6)) | {IGNORE}
        assert out.image.min() >= 0 and out.image.max() <= 1


def test_forced_double_flip_restores(sample):
    once = augment_sample(sample, np.random.default_rng(1), (64, 64), scale=1.0, flip=True, jitter=False)
    twice = augment_sample(once, np.random.default_rng(1), (64, 64), scale=1.0, flip=True, jitter=False)
    assert np.array_equal(twice.image, sample.image) and np.array_equal(twice.mask, sample.mask)
    assert np.array_equal(once.mask, sample.mask[:, ::-1])


def test_identity_pass_through(sample):
    out = augment_sample(sample, np.random.default_rng(2), (64, 64), scale=1.0, flip=False, jitter=False)
    assert np.array_equal(out.image, sample.image) and np.array_equal(out.mask, sample.mask)
    crop = augment_sample(sample, np.random.default_rng(3), (32, 40), scale=1.0, flip=False, jitter=False)
    # the crop must be a window of the original
    hits = [(y, x) for y in range(33) for x in range(25)
            if np.array_equal(sample.mask[y:y + 32, x:x + 40], crop.mask)
            and np.array_equal(sample.image[y:y + 32, x:x + 40], crop.image)]
    assert hits


def test_padding_uses_zero_and_ignore(sample):
    out = augment_sample(sample, np.random.default_rng(4), (128, 128), scale=1.0, flip=False, jitter=False)
    pad = out.mask == IGNORE
    assert pad.sum() == 128 * 128 - 64 * 64
    assert not out.image[pad].any()


def test_geometry_consistency_id_colored(sample):
    # paint the image with the mask ids; any geometric mismatch would show up after augmentation
    painted = Sample(np.repeat(sample.mask[..., None].astype(np.float32) / 10.0, 3, axis=2), sample.mask, "p")
    rng = np.random.default_rng(5)
    for _ in range(50):
        out = augment_sample(painted, rng, (48, 48), jitter=False, scale=float(rng.choice([0.5, 1.0, 2.0])))
        valid = out.mask != IGNORE
        recovered = np.rint(out.image[..., 0] * 10.0)
        agree = (recovered[valid] == out.mask[valid]).mean()
        # bilinear blending only differs from nearest labels along part boundaries
        assert agree > 0.9


def test_same_state_same_batch(sample):
    a = [augment_sample(sample, r, (64, 64)) for r in [np.random.default_rng(9)] * 3]
    b = [augment_sample(sample, r, (64, 64)) for r in [np.random.default_rng(9)] * 3]
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
