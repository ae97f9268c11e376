"""Evaluation substrate: mask instances from semantic maps and the prompts derived from them."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

DEFAULT_MIN_AREA = 900
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class Polarity(str, enum.Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"


@dataclass(frozen=True)
class PointPrompt:
    row: int
    col: int
    polarity: Polarity = Polarity.POSITIVE

    def to_dict(self):
        return {"kind": "point", "row": self.row, "col": self.col, "polarity": self.polarity.value}


@dataclass(frozen=True)
class BoxPrompt:
    """Half-open pixel box ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self):
        if self.bottom <= self.top or self.right <= self.left:
            raise InvalidArgumentError(f"degenerate box {self}")

    def to_dict(self):
        return {"kind": "box", "top": self.top, "left": self.left, "bottom": self.bottom, "right": self.right}


@dataclass
class SegMap:
    labels: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise InvalidArgumentError(f"segmentation map must be 2-D, got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer) or (self.labels.size and self.labels.min() < 0):
            raise InvalidArgumentError("segmentation labels must be non-negative integers")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


@dataclass
class MaskInstance:
    mask: np.ndarray
    class_id: int = 0
    source_image_id: str = ""

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def mask_id(self) -> str:
        return f"{self.source_image_id}/c{self.class_id}"


def _as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidArgumentError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def connected_components(mask) -> list[np.ndarray]:
    """4-connected components of ``mask`` as boolean arrays, largest first.

    Equal areas are ordered by the row-major position of each component's
    first pixel.
    """
    mask = _as_mask(mask)
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 0:
        return []
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    nz = np.flatnonzero(flat)
    # first occurrence of each label in row-major order
    first = np.full(n, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[nz] - 1, nz)
    order = sorted(range(n), key=lambda k: (-areas[k], first[k]))
    return [labels == (k + 1) for k in order]


def distance_to_border(mask) -> np.ndarray:
    """Exact Euclidean distance of every pixel to the nearest pixel outside the mask.

    Pixels beyond the image edge count as outside.
    """
    mask = _as_mask(mask)
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def interior_point(mask) -> PointPrompt:
    """The mask pixel farthest from the border; ties go to the smallest (row, col)."""
    mask = _as_mask(mask)
    if not mask.any():
        raise InvalidArgumentError("interior_point needs a non-empty mask")
    dist = distance_to_border(mask)
    # np.argmax returns the first maximum in row-major order
    r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
    return PointPrompt(int(r), int(c), Polarity.POSITIVE)


def build_eval_set(segmaps, min_area: int = DEFAULT_MIN_AREA) -> list[tuple[MaskInstance, PointPrompt]]:
    """Largest component per non-background class, area-filtered, with its interior point."""
    if min_area < 0:
        raise InvalidArgumentError("min_area must be >= 0")
    pairs = []
    for segmap in segmaps:
        if not isinstance(segmap, SegMap):
            segmap = SegMap(segmap)
        for cls in np.unique(segmap.labels):
            if cls == 0:
                continue
            comps = connected_components(segmap.labels == cls)
            largest = comps[0]
            inst = MaskInstance(largest, int(cls), segmap.image_id)
            if inst.area < min_area:
                continue
            pairs.append((inst, interior_point(largest)))
    return pairs


def sample_point_prompts(mask, positives: int, negatives: int, rng: np.random.Generator) -> list[PointPrompt]:
    """Uniform draws without replacement: positives inside the mask, negatives outside."""
    mask = _as_mask(mask)
    if positives < 0 or negatives < 0:
        raise InvalidArgumentError("prompt counts must be non-negative")
    inside = np.flatnonzero(mask.ravel())
    outside = np.flatnonzero(~mask.ravel())
    if positives > inside.size or negatives > outside.size:
        raise InvalidArgumentError(
            f"cannot draw {positives} positive / {negatives} negative points from "
            f"{inside.size} / {outside.size} pixels")
    width = mask.shape[1]
    out = []
    for idx in rng.choice(inside, size=positives, replace=False):
        out.append(PointPrompt(int(idx // width), int(idx % width), Polarity.POSITIVE))
    for idx in rng.choice(outside, size=negatives, replace=False):
        out.append(PointPrompt(int(idx // width), int(idx % width), Polarity.NEGATIVE))
    return out


def box_from_mask(mask) -> BoxPrompt:
    mask = _as_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise InvalidArgumentError("box_from_mask needs a non-empty mask")
    return BoxPrompt(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def prompt_from_dict(d: dict):
    if d["kind"] == "point":
        return PointPrompt(int(d["row"]), int(d["col"]), Polarity(d.get("polarity", "POSITIVE")))
    if d["kind"] == "box":
        return BoxPrompt(int(d["top"]), int(d["left"]), int(d["bottom"]), int(d["right"]))
    raise InvalidArgumentError(f"unknown prompt kind {d.get('kind')!r}")
