"""Flip and multi-scale test-time augmentation."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

DEFAULT_SCALES = (0.75, 1.0, 1.25, 1.5)


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``(..., H, W, C)`` arrays (half-pixel centres)."""
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == tuple(size):
        return img
    rh = T.bilinear_matrix(h, size[0], img.dtype)
    rw = T.bilinear_matrix(w, size[1], img.dtype)
    out = np.einsum("ih,...hwc->...iwc", rh, img)
    return np.einsum("jw,...iwc->...ijc", rw, out)


def scaled_size(h: int, w: int, scale: float, multiple: int) -> tuple[int, int]:
    def snap(n):
        return max(multiple, int(round(n * scale / multiple)) * multiple)

    return snap(h), snap(w)


def tta_predict(model: Callable[[np.ndarray], Tensor], img: np.ndarray, scales: Sequence[float] = DEFAULT_SCALES,
                flip: bool = True, multiple: int = 1, flip_perm: Sequence[int] | None = None) -> np.ndarray:
    """Average class probabilities over rescaled and mirrored inputs.

    ``model`` maps ``(B, h, w, 3)`` images to ``(B, h, w, K)`` logits. Each
    scaled input is snapped to ``multiple`` pixels; its probability map is
    resized back to the base size. ``flip_perm`` remaps channels of mirrored
    predictions for datasets with left/right classes.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("tta_predict needs at least one scale")
    h, w = img.shape[-3], img.shape[-2]
    maps = []
    with no_grad():
        for s in scales:
            size = (h, w) if s == 1.0 else scaled_size(h, w, s, multiple)
            x = resize_image(img, size)
            views = [(x, False)] + ([(x[..., :, ::-1, :], True)] if flip else [])
            for view, mirrored in views:
                prob = T.softmax(model(np.ascontiguousarray(view)), axis=-1).data
                if mirrored:
                    prob = prob[..., :, ::-1, :]
                    if flip_perm is not None:
                        prob = prob[..., list(flip_perm)]
                maps.append(resize_image(prob, (h, w)))
    out = maps[0]
    for m in maps[1:]:
        out = out + m
    return out if len(maps) == 1 else out / len(maps)
