"""Class-presence probabilities from the CLIP class embedding and the prompt text features."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .encoders import ClassEmbedding, TextFeatures
from .tensor import ShapeError, Tensor


@dataclass
class ClassSimilarity:
    probs: Tensor  # (..., K), positive, sums to 1


def compute_similarity(cls: ClassEmbedding, txt: TextFeatures, temperature: float = 1.0) -> ClassSimilarity:
    """``softmax(cls @ txt.T / temperature)``; ``txt`` is ``(K, d)`` and ``cls`` is ``(d,)`` or ``(B, d)``."""
    vec, mat = cls.vec, txt.mat
    if vec.shape[-1] != mat.shape[-1]:
        raise ShapeError(f"class embedding dim {vec.shape} does not match text features {mat.shape}")
    single = vec.ndim == 1
    if single:
        vec = T.reshape(vec, (1, vec.shape[0]))
    # row-wise products summed per class rather than a BLAS matmul, whose
    # accumulation order depends on the column position
    k, b = mat.shape[0], vec.shape[0]
    rows = T.reshape(vec, (b, 1, vec.shape[1]))
    logits = T.sum(T.concat([rows] * k, axis=1) * mat, axis=-1)
    if temperature != 1.0:
        logits = logits / temperature
    probs = T.softmax(logits, axis=-1, order_free=True)
    if single:
        probs = T.reshape(probs, (probs.shape[-1],))
    return ClassSimilarity(probs)
