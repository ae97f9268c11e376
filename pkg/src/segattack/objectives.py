"""Embedding-distortion objectives for single images and image pools."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .constraints import clip_to_image_box, nearest_resize
from .encoders.base import EmbeddingVector, EncoderOracle
from .errors import InvalidArgumentError


@dataclass
class ObjectiveValue:
    value: float
    per_image: list[float] = field(default_factory=list)


def distortion(phi_clean: EmbeddingVector, phi_adv: EmbeddingVector) -> float:
    """Squared Euclidean distance between two embeddings of the same encoder."""
    if phi_clean.encoder_id != phi_adv.encoder_id:
        raise InvalidArgumentError(
            f"embeddings come from different encoders: {phi_clean.encoder_id!r} vs {phi_adv.encoder_id!r}")
    if len(phi_clean) != len(phi_adv):
        raise InvalidArgumentError(f"length mismatch: {len(phi_clean)} vs {len(phi_adv)}")
    diff = phi_adv.data - phi_clean.data
    # exactly rounded, hence independent of thread count and vector width
    return math.fsum(diff * diff)


def image_key(x: np.ndarray) -> str:
    x = np.ascontiguousarray(x)
    h = hashlib.sha1(str((x.shape, x.dtype.str)).encode())
    h.update(x.tobytes())
    return h.hexdigest()


class CleanEmbeddingCache:
    """Memoizes ``phi(x)`` per (encoder_id, image hash); the clean term never changes during an attack."""

    def __init__(self):
        self._store: dict[tuple[str, str], EmbeddingVector] = {}

    def get(self, oracle: EncoderOracle, x: np.ndarray) -> EmbeddingVector:
        key = (oracle.encoder_id, image_key(x))
        hit = self._store.get(key)
        if hit is None:
            hit = oracle.forward(x)
            self._store[key] = hit
        return hit

    def __len__(self):
        return len(self._store)


def universal_objective(oracle: EncoderOracle, images, delta_native: np.ndarray,
                        cache: CleanEmbeddingCache | None = None) -> ObjectiveValue:
    """Summed distortion of a shared native-resolution delta over ``images``."""
    images = list(images)
    if not images:
        raise InvalidArgumentError("universal_objective needs at least one image")
    cache = cache if cache is not None else CleanEmbeddingCache()
    per_image = []
    for x in images:
        d = nearest_resize(delta_native, x.shape[0], x.shape[1])
        x_adv = x + clip_to_image_box(x, d)
        per_image.append(distortion(cache.get(oracle, x), oracle.forward(x_adv)))
    total = 0.0
    for v in per_image:
        total += v
    return ObjectiveValue(total, per_image)
