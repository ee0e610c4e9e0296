"""Synthetic articulated-figure parsing data, PPM/PGM files and training augmentation.

Dataset layout::

    images/{id}.ppm   binary P6, maxval 255
    masks/{id}.pgm    binary P5, maxval 255, value = class id, 255 = ignore
    manifest.tsv      "id<TAB>split" rows under an "id<TAB>split" header
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import derive_rng
from .tensor import bilinear_matrix

IGNORE = 255
PART_NAMES = ("background", "head", "torso", "arms", "legs", "accessory")


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class ids, 255 = ignore
    id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in size")


@dataclass
class SynthConfig:
    n_train: int = 400
    n_val: int = 100
    K: int = 6
    canvas: int = 64
    seed: int = 0
    clutter: float = 0.5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.K > len(PART_NAMES):
            raise ValueError(f"the figure renderer has {len(PART_NAMES)} part classes, K={self.K} requested")


def class_names(k: int) -> list[str]:
    return list(PART_NAMES[:k])


# ---------------------------------------------------------------- PPM / PGM

def _encode_pnm(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _decode_pnm(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    if len(buf) < 2 or buf[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}", 0)
    pos = 2
    fields, starts = [], []
    while len(fields) < 3:
        start = pos
        while pos < len(buf) and (buf[pos] in b" \t\r\n" or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos == start and fields:
            raise FormatError("missing whitespace between header fields", pos)
        tok_start = pos
        while pos < len(buf) and 48 <= buf[pos] <= 57:
            pos += 1
        if pos == tok_start:
            if pos >= len(buf):
                raise FormatError("unexpected end of header", pos)
            raise FormatError(f"expected a decimal header field, found byte {buf[pos]:#04x}", pos)
        if pos - tok_start > 9:
            raise FormatError("header field too long", tok_start)
        fields.append(int(buf[tok_start:pos]))
        starts.append(tok_start)
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise FormatError(f"non-positive size {w}x{h}", starts[0] if w <= 0 else starts[1])
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", starts[2])
    if pos >= len(buf) or buf[pos] not in b" \t\r\n":
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    if len(buf) - pos > need:
        raise FormatError(f"{len(buf) - pos - need} trailing bytes after pixel data", pos + need)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return _encode_pnm(b"P6", img)


def decode_ppm(buf: bytes) -> np.ndarray:
    return (_decode_pnm(buf, b"P6", 3).astype(np.float32) / np.float32(255.0))


def encode_pgm(mask: np.ndarray) -> bytes:
    return _encode_pnm(b"P5", np.asarray(mask, dtype=np.uint8))


def decode_pgm(buf: bytes) -> np.ndarray:
    return _decode_pnm(buf, b"P5", 1)


def write_sample(root: str | Path, sample: Sample) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "images" / f"{sample.id}.ppm").write_bytes(encode_ppm(sample.image))
    (root / "masks" / f"{sample.id}.pgm").write_bytes(encode_pgm(sample.mask))


def read_sample(root: str | Path, sample_id: str) -> Sample:
    root = Path(root)
    image = decode_ppm((root / "images" / f"{sample_id}.ppm").read_bytes())
    mask = decode_pgm((root / "masks" / f"{sample_id}.pgm").read_bytes())
    return Sample(image, mask, sample_id)


def read_manifest(root: str | Path) -> list[tuple[str, str]]:
    path = Path(root) / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip() or line == "id\tsplit":
            continue
        sid, split = line.split("\t")
        rows.append((sid, split))
    return rows


def load_split(root: str | Path, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack one split into ``(N, H, W, 3)`` images and ``(N, H, W)`` masks."""
    ids = [sid for sid, s in read_manifest(root) if s == split]
    if not ids:
        raise ValueError(f"split {split!r} is empty in {root}")
    samples = [read_sample(root, sid) for sid in ids]
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]), ids


# ---------------------------------------------------------------- rendering

def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _segment(yy, xx, p0, p1, half_width):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= half_width ** 2


def _limb(rng, start, angle, lengths, bend):
    pts = [start]
    a = angle
    for length in lengths:
        y, x = pts[-1]
        pts.append((y + length * np.cos(a), x + length * np.sin(a)))
        a += bend
    return pts


def _tint(rng, base, spread=0.08):
    return np.clip(np.asarray(base) + rng.uniform(-spread, spread, 3), 0.0, 1.0)


_PALETTE = {
    "skin": (0.85, 0.65, 0.50),
    "torso": (0.20, 0.35, 0.80),
    "arms": (0.90, 0.80, 0.20),
    "legs": (0.25, 0.25, 0.25),
    "accessory": (0.85, 0.15, 0.20),
}


def render_figure(rng: np.random.Generator, canvas: int = 64, n_classes: int = 6,
                  clutter: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """One stick-figure scene: image ``(S, S, 3)`` in ``k/255`` steps and its part mask."""
    s = canvas / 64.0
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5

    base = rng.uniform(0.35, 0.75, 3)
    grad = rng.uniform(-0.15, 0.15, 3)
    image = base + grad * (yy / canvas)[..., None]
    for _ in range(rng.poisson(4 * clutter)):
        cy, cx = rng.uniform(0, canvas, 2)
        col = rng.uniform(0.3, 0.8, 3)
        if rng.random() < 0.5:
            hh, ww = rng.uniform(3, 10, 2) * s
            m = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < ww)
        else:
            m = _disk(yy, xx, cy, cx, rng.uniform(3, 7) * s)
        image[m] = col
    mask = np.zeros((canvas, canvas), dtype=np.uint8)

    def paint(region, cls, color):
        label = cls if cls < n_classes else (cls - 1) % (n_classes - 1) + 1
        shade = 1.0 + 0.12 * (xx - cx0) / (12 * s)
        image[region] = np.clip(color[None, :] * shade[region][:, None], 0, 1)
        mask[region] = label

    cx0 = rng.uniform(26, 38) * s
    top = rng.uniform(17, 21) * s
    torso_w = rng.uniform(13, 17) * s
    torso_h = rng.uniform(17, 21) * s
    tilt = rng.uniform(-0.12, 0.12)
    ty = yy - top
    tx = xx - cx0 - tilt * ty
    torso = (ty >= 0) & (ty <= torso_h) & (np.abs(tx) <= torso_w / 2)
    hip_y = top + torso_h
    shoulder_y = top + 3 * s
    limb_w = rng.uniform(3.0, 3.8) * s

    legs = np.zeros_like(torso)
    for side in (-1, 1):
        hip = (hip_y - 2 * s, cx0 + tilt * torso_h + side * torso_w * 0.28)
        ang = side * rng.uniform(0.05, 0.45)
        pts = _limb(rng, hip, -ang, (rng.uniform(12, 15) * s, rng.uniform(10, 13) * s),
                    rng.uniform(-0.3, 0.3))
        for a, b in zip(pts, pts[1:]):
            legs |= _segment(yy, xx, a, b, limb_w * 1.1)
    arms = np.zeros_like(torso)
    hands = []
    for side in (-1, 1):
        sh = (shoulder_y, cx0 + side * (torso_w / 2 + limb_w * 0.6))
        ang = side * rng.uniform(0.3, 2.4)
        pts = _limb(rng, sh, ang, (rng.uniform(10, 12) * s, rng.uniform(8, 11) * s),
                    side * rng.uniform(-0.6, 0.6))
        for a, b in zip(pts, pts[1:]):
            arms |= _segment(yy, xx, a, b, limb_w)
        hands.append(pts[-1])
    head_r = rng.uniform(6.5, 8.0) * s
    head_c = (top - head_r + 1.5 * s, cx0 + rng.uniform(-1.5, 1.5) * s)
    head = _disk(yy, xx, *head_c, head_r)

    paint(legs, 4, _tint(rng, _PALETTE["legs"]))
    paint(torso, 2, _tint(rng, _PALETTE["torso"]))
    paint(arms, 3, _tint(rng, _PALETTE["arms"]))
    paint(head, 1, _tint(rng, _PALETTE["skin"]))

    # accessory: a bag held in one hand or a hat on the head
    acc_col = _tint(rng, _PALETTE["accessory"])
    if rng.random() < 0.5:
        hy, hx = hands[rng.integers(2)]
        hy = float(np.clip(hy, 6 * s, canvas - 6 * s))
        hx = float(np.clip(hx, 6 * s, canvas - 6 * s))
        acc = _disk(yy, xx, hy, hx, rng.uniform(4.5, 5.5) * s)
    else:
        hy = head_c[0] - head_r * 0.7
        acc = (np.abs(yy - hy) <= rng.uniform(2.5, 3.5) * s) & (np.abs(xx - head_c[1]) <= head_r * 1.1)
    paint(acc, 5, acc_col)

    image = image + rng.normal(0.0, 0.03, image.shape)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image.astype(np.float32), mask


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> list[tuple[str, str]]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"dataset directory {out_dir} is not writable")
    manifest = []
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        for i in range(n):
            sid = f"{split}_{i:05d}"
            image, mask = render_figure(derive_rng(cfg.seed, "synth", split, i), cfg.canvas, cfg.K, cfg.clutter)
            write_sample(out_dir, Sample(image, mask, sid))
            manifest.append((sid, split))
    lines = ["id\tsplit"] + [f"{sid}\t{split}" for sid, split in manifest]
    (out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------- augmentation

def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    src = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def rescale_sample(image: np.ndarray, mask: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape
    if (h, w) == tuple(size):
        return image, mask
    rh = bilinear_matrix(h, size[0], np.float32)
    rw = bilinear_matrix(w, size[1], np.float32)
    img = np.einsum("ih,hwc->iwc", rh, image)
    img = np.einsum("jw,iwc->ijc", rw, img)
    m = mask[_nearest_index(h, size[0])][:, _nearest_index(w, size[1])]
    return img.astype(np.float32), m


def augment_sample(s: Sample, rng: np.random.Generator, fixed: tuple[int, int], *, scale: float | None = None,
                   flip: bool | None = None, jitter: bool = True,
                   scale_range: tuple[float, float] = (0.5, 2.0)) -> Sample:
    """Random rescale, mirror, brightness/contrast jitter, then crop or pad to ``fixed``.

    Keyword overrides pin individual draws (used by tests); random draws are
    still consumed so the stream stays aligned.
    """
    s_draw = rng.uniform(*scale_range)
    f_draw = rng.random() < 0.5
    b_draw, c_draw = rng.uniform(-0.2, 0.2, 2)
    scale = s_draw if scale is None else scale
    flip = f_draw if flip is None else flip

    h, w = s.mask.shape
    size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    image, mask = rescale_sample(s.image, s.mask, size)
    if flip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if jitter:
        mu = image.mean()
        image = np.clip((image - mu) * (1.0 + c_draw) + mu, 0.0, 1.0) * (1.0 + b_draw)
        image = np.clip(image, 0.0, 1.0)

    out_img = np.zeros(tuple(fixed) + (3,), dtype=np.float32)
    out_mask = np.full(tuple(fixed), IGNORE, dtype=np.uint8)
    src, dst = [], []
    for n, f in zip(mask.shape, fixed):
        if n >= f:
            o = int(rng.integers(0, n - f + 1))
            src.append(slice(o, o + f))
            dst.append(slice(0, f))
        else:
            o = int(rng.integers(0, f - n + 1))
            src.append(slice(0, n))
            dst.append(slice(o, o + n))
    out_img[dst[0], dst[1]] = image[src[0], src[1]]
    out_mask[dst[0], dst[1]] = mask[src[0], src[1]]
    return Sample(out_img, out_mask, s.id)
