"""Perturbation files, image/segmap ingestion and overlay rendering."""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import __version__
from .errors import InvalidArgumentError, PerturbationFileError
from .types import NormKind, Perturbation, Provenance

SIDECAR_SUFFIX = ".json"
META_KEYS = {"epsilon", "norm_kind", "native_shape", "channels", "attack_kind", "iterations", "seed",
             "encoder_id", "created_at", "tool_version"}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def perturbation_metadata(p: Perturbation, created_at: str | None = None) -> dict:
    prov = p.provenance
    return {
        "epsilon": float(p.epsilon),
        "norm_kind": p.norm_kind.value,
        "native_shape": list(p.native_shape),
        "channels": int(p.channels),
        "attack_kind": prov.attack_kind,
        "iterations": int(prov.iterations),
        "seed": int(prov.seed),
        "encoder_id": prov.encoder_id,
        "created_at": created_at or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "tool_version": __version__,
    }


def save_perturbation(p: Perturbation, path, created_at: str | None = None) -> None:
    """Write the float32 little-endian payload to ``path`` and metadata to ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(p.delta, dtype="<f4").tobytes())
    sidecar_path(path).write_text(json.dumps(perturbation_metadata(p, created_at), indent=2, sort_keys=True) + "\n")


def load_perturbation(path) -> Perturbation:
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise PerturbationFileError(f"{path}: cannot read perturbation: {exc}") from exc
    missing = META_KEYS - set(meta)
    if missing:
        raise PerturbationFileError(f"{path}: metadata missing {sorted(missing)}")
    try:
        h, w = (int(v) for v in meta["native_shape"])
        c = int(meta["channels"])
        eps = float(meta["epsilon"])
        norm = NormKind(meta["norm_kind"])
    except (TypeError, ValueError) as exc:
        raise PerturbationFileError(f"{path}: malformed metadata: {exc}") from exc
    if min(h, w, c) < 1 or eps < 0:
        raise PerturbationFileError(f"{path}: invalid shape {(h, w, c)} or epsilon {eps}")
    expected = h * w * c * 4
    if len(payload) != expected:
        raise PerturbationFileError(
            f"{path}: payload has {len(payload)} bytes but metadata shape {(h, w, c)} needs {expected}")
    delta32 = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.all(np.isfinite(delta32)):
        raise PerturbationFileError(f"{path}: payload contains non-finite values")
    # compare at storage precision: float32 rounding is monotone, so a valid delta never exceeds f32(eps)
    if np.abs(delta32).max() > np.float32(eps):
        raise PerturbationFileError(
            f"{path}: payload l-inf norm {float(np.abs(delta32).max())} exceeds epsilon {eps}")
    delta = np.clip(delta32.astype(np.float64), -eps, eps)
    prov = Provenance(meta["attack_kind"], int(meta["iterations"]), int(meta["seed"]), meta["encoder_id"])
    return Perturbation(delta=delta, epsilon=eps, provenance=prov, norm_kind=norm, native_shape=(h, w))


# ---------------------------------------------------------------------------
# images

@dataclass(frozen=True)
class ResizePolicy:
    """``shortest_edge=None`` keeps the native size."""

    shortest_edge: int | None = None

    @classmethod
    def parse(cls, text: str | None) -> "ResizePolicy":
        if text is None or text.upper() == "NONE":
            return cls()
        name, _, arg = text.partition(":")
        if name.upper() != "SHORTEST_EDGE" or not arg.isdigit() or int(arg) < 1:
            raise InvalidArgumentError(f"resize policy must be NONE or SHORTEST_EDGE:<n>, got {text!r}")
        return cls(int(arg))


def _round_half_away(q: Fraction) -> int:
    return int(math.floor(q + Fraction(1, 2))) if q >= 0 else -int(math.floor(-q + Fraction(1, 2)))


def shortest_edge_size(height: int, width: int, target: int) -> tuple[int, int]:
    """Output size with the short side at ``target``; the long side rounds half away from zero."""
    if height <= width:
        return target, _round_half_away(Fraction(width * target, height))
    return _round_half_away(Fraction(height * target, width)), target


def bilinear_resize(x: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)


def ingest_image(path, resize_policy: ResizePolicy | None = None) -> np.ndarray:
    """Read an 8- or 16-bit PNG/JPEG into an H x W x C float64 array in [0, 1]."""
    resize_policy = resize_policy or ResizePolicy()
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16L", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                if arr.max(initial=0) > 65535 or arr.min(initial=0) < 0:
                    raise InvalidArgumentError(f"{path}: unsupported integer range")
                arr = (arr / 65535.0)[..., None]
            elif mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            elif mode == "1":
                arr = np.asarray(im, dtype=np.float64)
            else:
                raise InvalidArgumentError(f"{path}: unsupported image mode {mode!r}")
    except OSError as exc:
        raise InvalidArgumentError(f"{path}: unreadable image: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    if resize_policy.shortest_edge is not None:
        h, w = shortest_edge_size(arr.shape[0], arr.shape[1], resize_policy.shortest_edge)
        if (h, w) != arr.shape[:2]:
            arr = bilinear_resize(arr, h, w)
    return arr


def save_image(x: np.ndarray, path) -> None:
    arr = np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_segmap(path) -> np.ndarray:
    """Integer label map from a single-channel PNG or a ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        labels = np.load(path, allow_pickle=False)
    else:
        with Image.open(path) as im:
            if im.mode not in ("L", "I", "I;16", "P"):
                raise InvalidArgumentError(f"{path}: segmentation map must be single-channel, got {im.mode}")
            labels = np.asarray(im)
    if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgumentError(f"{path}: segmentation map must be a 2-D integer array")
    return labels.astype(np.int64)


def save_segmap(labels: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, labels)
    else:
        Image.fromarray(labels.astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# overlays

OVERLAY_COLORS = np.array([
    [230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


def overlay_array(shape: tuple[int, int], masks) -> np.ndarray:
    """White canvas with mask ``k`` painted in colour ``k``; later masks paint over earlier ones."""
    canvas = np.full(shape + (3,), 255, dtype=np.uint8)
    for k, m in enumerate(masks):
        m = np.asarray(m, dtype=bool)
        if m.shape != shape:
            raise InvalidArgumentError(f"mask {k} has shape {m.shape}, image is {shape}")
        canvas[m] = OVERLAY_COLORS[k % len(OVERLAY_COLORS)]
    return canvas


def render_overlay(image: np.ndarray, masks, out_path) -> None:
    """Write ``[image | overlay]`` side by side as a PNG."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidArgumentError(f"image must be H x W x C, got {image.shape}")
    overlay = overlay_array(image.shape[:2], masks)
    left = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if left.shape[2] == 1:
        left = np.repeat(left, 3, axis=2)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate([left, overlay], axis=1)).save(out_path)
