"""Core data types: images, perturbations and crop regions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

LINF_SLACK = 1e-12


class NormKind(str, enum.Enum):
    LINF = "LINF"


def as_image(x, name: str = "x") -> np.ndarray:
    """Validate an H x W x C image with intensities in [0, 1].

    Returns the input as a numpy array (no copy when already an ndarray of
    floating dtype).
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.ndim != 3:
        raise InvalidArgumentError(f"{name} must be a 3-D (height, width, channels) array, got shape {x.shape}")
    if x.shape[2] not in (1, 3):
        raise InvalidArgumentError(f"{name} must have 1 or 3 channels, got {x.shape[2]}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidArgumentError(f"{name} has an empty spatial extent {x.shape[:2]}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise InvalidArgumentError(f"{name} must have every element in [0, 1]")
    return x


@dataclass(frozen=True)
class Provenance:
    attack_kind: str
    iterations: int
    seed: int
    encoder_id: str


@dataclass
class Perturbation:
    """An additive l-inf bounded delta, stored at the resolution it was optimized at."""

    delta: np.ndarray
    epsilon: float
    provenance: Provenance
    norm_kind: NormKind = NormKind.LINF
    native_shape: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.delta = np.asarray(self.delta)
        if self.delta.ndim != 3:
            raise InvalidArgumentError(f"delta must be 3-D, got shape {self.delta.shape}")
        if self.epsilon < 0:
            raise InvalidArgumentError("epsilon must be non-negative")
        if self.native_shape is None:
            self.native_shape = tuple(self.delta.shape[:2])
        self.native_shape = tuple(int(v) for v in self.native_shape)
        if self.native_shape != tuple(self.delta.shape[:2]):
            raise InvalidArgumentError(
                f"native_shape {self.native_shape} does not match delta shape {self.delta.shape[:2]}")
        if self.linf > self.epsilon + LINF_SLACK:
            raise InvalidArgumentError(f"||delta||_inf = {self.linf} exceeds epsilon = {self.epsilon}")

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0

    @property
    def channels(self) -> int:
        return self.delta.shape[2]


@dataclass(frozen=True)
class CropRegion:
    top: int
    left: int
    crop_height: int
    crop_width: int

    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.crop_height),
                slice(self.left, self.left + self.crop_width))

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left,
                "crop_height": self.crop_height, "crop_width": self.crop_width}
