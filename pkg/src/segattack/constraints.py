"""Feasible-set geometry shared by every optimizer.

All kernels operate in the dtype of their input, so float32 arrays take a
single-precision path and float64 arrays the reference double-precision one.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError
from .types import CropRegion


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Euclidean projection onto the l-inf ball of radius ``epsilon``."""
    if not epsilon >= 0:
        raise InvalidArgumentError(f"epsilon must be non-negative, got {epsilon}")
    delta = np.asarray(delta)
    return np.clip(delta, -epsilon, epsilon).astype(delta.dtype, copy=False)


def clip_to_image_box(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Return ``clamp(x + delta, 0, 1) - x`` so that the perturbed image stays in [0, 1]."""
    x = np.asarray(x)
    delta = np.asarray(delta)
    if x.shape != delta.shape:
        raise InvalidArgumentError(f"shape mismatch: image {x.shape} vs delta {delta.shape}")
    # elementwise clamp of delta into [-x, 1 - x]; exact, unlike (clip(x + d) - x)
    return np.minimum(np.maximum(delta, -x), 1.0 - x).astype(delta.dtype, copy=False)


def apply_perturbation(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Perturbed image ``x + delta'`` with delta' box-clipped; resizes ``delta`` if needed."""
    delta = np.asarray(delta)
    if delta.shape[:2] != x.shape[:2]:
        delta = nearest_resize(delta, x.shape[0], x.shape[1])
    if delta.shape != x.shape:
        raise InvalidArgumentError(f"channel mismatch: image {x.shape} vs delta {delta.shape}")
    return x + clip_to_image_box(x, delta)


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.int64) * n_in) // n_out


def nearest_resize(delta: np.ndarray, target_height: int, target_width: int) -> np.ndarray:
    """Nearest-neighbour resize with source index ``floor(i * n_in / n_out)``."""
    if target_height <= 0 or target_width <= 0:
        raise InvalidArgumentError(f"target dims must be positive, got {(target_height, target_width)}")
    delta = np.asarray(delta)
    h_in, w_in = delta.shape[:2]
    if (h_in, w_in) == (target_height, target_width):
        return delta.copy()
    rows = _nearest_indices(h_in, target_height)
    cols = _nearest_indices(w_in, target_width)
    return delta[rows[:, None], cols[None, :]]


def nearest_resize_adjoint(grad: np.ndarray, native_height: int, native_width: int) -> np.ndarray:
    """Transpose of :func:`nearest_resize`: sum gradients of replicated pixels per source cell."""
    grad = np.asarray(grad)
    h_out, w_out = grad.shape[:2]
    if (h_out, w_out) == (native_height, native_width):
        return grad.copy()
    rows = _nearest_indices(native_height, h_out)
    cols = _nearest_indices(native_width, w_out)
    out = np.zeros((native_height, native_width) + grad.shape[2:], dtype=grad.dtype)
    np.add.at(out, (rows[:, None], cols[None, :]), grad)
    return out


# absorbs float noise such as 0.3 * 100 = 30.000000000000004
_FRAC_TOL = 1e-9


def _size_bounds(n: int, min_frac: float, max_frac: float) -> tuple[int, int]:
    """Integer crop sizes whose fraction of ``n`` lies in [min_frac, max_frac].

    Bounds round inward; if no integer fits, the smallest size above the
    lower bound is used.
    """
    lo = max(1, math.ceil(min_frac * n - _FRAC_TOL))
    hi = min(n, math.floor(max_frac * n + _FRAC_TOL))
    return lo, max(lo, hi)


def sample_crop_region(height: int, width: int, min_frac: float, max_frac: float,
                       rng: np.random.Generator) -> CropRegion:
    """Draw a crop whose height and width are independently uniform fractions of the image."""
    if not (0 < min_frac <= max_frac <= 1):
        raise InvalidArgumentError(f"need 0 < min_frac <= max_frac <= 1, got {(min_frac, max_frac)}")
    if height < 2 or width < 2:
        raise InvalidArgumentError(f"image {height}x{width} is too small to crop")
    lo_h, hi_h = _size_bounds(height, min_frac, max_frac)
    lo_w, hi_w = _size_bounds(width, min_frac, max_frac)
    crop_h = int(rng.integers(lo_h, hi_h + 1))
    crop_w = int(rng.integers(lo_w, hi_w + 1))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return CropRegion(top, left, crop_h, crop_w)
