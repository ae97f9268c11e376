"""Attack procedures maximizing embedding distortion under an l-inf budget.

Every procedure is written against a ``loss_grad(x_adv) -> (value, grad)``
callable so the same update rules can be exercised on analytic surrogates;
the public ``*_attack`` functions bind it to an encoder oracle.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from .constraints import (clip_to_image_box, nearest_resize, nearest_resize_adjoint, project_linf,
                          sample_crop_region)
from .encoders.base import EncoderOracle
from .errors import InvalidArgumentError
from .objectives import CleanEmbeddingCache
from .types import LINF_SLACK, CropRegion, Perturbation, Provenance, as_image

log = logging.getLogger(__name__)

LossGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

APGD_RHO = 0.75
APGD_MOMENTUM = 0.75


class Init(str, enum.Enum):
    ZERO = "ZERO"
    RANDOM_UNIFORM = "RANDOM_UNIFORM"


@dataclass
class AttackConfig:
    """Image-specific attack settings.

    ``step_size="auto"`` means 2*eps with halving for APGD, eps/4 for PGD and
    eps/8 for multi-crop PGD. The distortion objective has a zero gradient at
    ``delta = 0``, so the default start is a seeded uniform draw in the ball.
    """

    epsilon: float
    iterations: int = 100
    step_size: float | str = "auto"
    seed: int = 0
    init: Init = Init.RANDOM_UNIFORM
    record_trace: bool = True

    def __post_init__(self):
        self.init = Init(self.init)
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if not self.epsilon >= 0:
            raise InvalidArgumentError("epsilon must be >= 0")
        if self.step_size != "auto" and not (isinstance(self.step_size, (int, float)) and self.step_size > 0):
            raise InvalidArgumentError(f"step_size must be positive or 'auto', got {self.step_size!r}")


@dataclass
class MultiCropConfig:
    base: AttackConfig
    p_crop: float = 0.8
    min_frac: float = 0.3
    max_frac: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.p_crop <= 1.0:
            raise InvalidArgumentError("p_crop must lie in [0, 1]")
        if not 0 < self.min_frac <= self.max_frac <= 1:
            raise InvalidArgumentError("need 0 < min_frac <= max_frac <= 1")


@dataclass
class UniversalConfig:
    epsilon: float = 8 / 255
    iterations: int = 500
    step_size: float = 1 / 255
    native_shape: tuple[int, int] = (1024, 1024)
    train_pool_size: int = 100
    batch_size: int = 10
    seed: int = 0
    init: Init = Init.RANDOM_UNIFORM
    # "native": l2-normalize after pulling the gradient back to native resolution
    # "image": normalize at image resolution, then pull back
    normalize_at: str = "native"
    record_trace: bool = True

    def __post_init__(self):
        self.init = Init(self.init)
        self.native_shape = tuple(int(v) for v in self.native_shape)
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if not self.epsilon >= 0 or not self.step_size > 0:
            raise InvalidArgumentError("epsilon must be >= 0 and step_size > 0")
        if not 1 <= self.batch_size <= self.train_pool_size:
            raise InvalidArgumentError("need 1 <= batch_size <= train_pool_size")
        if self.normalize_at not in ("native", "image"):
            raise InvalidArgumentError("normalize_at must be 'native' or 'image'")
        if min(self.native_shape) < 1:
            raise InvalidArgumentError("native_shape must be positive")


@dataclass
class AttackTrace:
    """Per-iteration record of an attack run.

    ``best_iter`` indexes ``objective_per_iter`` (0-based); entry ``t`` is the
    objective of the iterate produced by step ``t + 1``. For universal runs it is
    the batch objective at the iterate the step ``t + 1`` gradient was taken at.
    """

    objective_per_iter: list[float] = field(default_factory=list)
    step_size_per_iter: list[float] = field(default_factory=list)
    best_objective: float = -math.inf
    best_iter: int = -1
    crop_regions: list[CropRegion | None] | None = None
    grad_norms: list[list[float]] | None = None
    batches: list[list[int]] | None = None
    halvings: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def observe(self, t: int, value: float, step: float, record: bool) -> bool:
        if record:
            self.objective_per_iter.append(value)
            self.step_size_per_iter.append(step)
        # strict comparison: the earliest iterate wins ties
        if value > self.best_objective:
            self.best_objective = value
            self.best_iter = t
            return True
        return False


def _project(x: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    return clip_to_image_box(x, project_linf(delta, epsilon))


def _initial_delta(x: np.ndarray, epsilon: float, init: Init, rng: np.random.Generator) -> np.ndarray:
    if init is Init.ZERO:
        delta = np.zeros_like(x, dtype=np.float64)
    else:
        delta = rng.uniform(-epsilon, epsilon, size=x.shape)
    return _project(x, delta, epsilon)


def _resolve_step(step_size, default: float) -> float:
    return float(default if step_size == "auto" else step_size)


def _check_feasible(x: np.ndarray, delta: np.ndarray, epsilon: float) -> None:
    assert np.abs(delta).max(initial=0.0) <= epsilon + LINF_SLACK
    x_adv = x + delta
    assert x_adv.min(initial=0.0) >= 0.0 and x_adv.max(initial=1.0) <= 1.0


# ---------------------------------------------------------------------------
# generic maximizers

def pgd_maximize(loss_grad: LossGrad, x: np.ndarray, epsilon: float, iterations: int, step_size: float,
                 rng: np.random.Generator, init: Init = Init.RANDOM_UNIFORM, record_trace: bool = True,
                 crop: "Callable | None" = None):
    """Fixed-step sign ascent ``delta <- P(delta + step * sign(grad))``.

    ``crop`` optionally supplies ``(rng, delta) -> (region, grad_in_region)``
    per iteration; when it returns a region only that window of ``delta`` is
    updated. Returns ``(best_delta, trace)``.
    """
    trace = AttackTrace(crop_regions=[] if crop is not None else None)
    delta = _initial_delta(x, epsilon, Init(init), rng)
    _, grad = loss_grad(x + delta)
    best = delta
    for t in range(iterations):
        region = None
        if crop is not None:
            region, crop_grad = crop(rng, delta)
        if region is None:
            delta = _project(x, delta + step_size * np.sign(grad), epsilon)
        else:
            delta = delta.copy()
            win = region.slices()
            delta[win] = _project(x[win], delta[win] + step_size * np.sign(crop_grad), epsilon)
        if crop is not None and record_trace:
            trace.crop_regions.append(region)
        value, grad = loss_grad(x + delta)
        if trace.observe(t, value, step_size, record_trace):
            best = delta
    return best, trace


def apgd_checkpoints(iterations: int) -> list[int]:
    """Iterations ``ceil(p_j * N)`` at which the step-size conditions are checked."""
    p_prev, p = Fraction(0), Fraction(22, 100)
    points = []
    while p <= 1:
        w = math.ceil(p * iterations)
        if w >= 1 and (not points or w > points[-1]):
            points.append(w)
        p_prev, p = p, p + max(p - p_prev - Fraction(3, 100), Fraction(6, 100))
    return [w for w in points if w <= iterations]


def apgd_maximize(loss_grad: LossGrad, x: np.ndarray, epsilon: float, iterations: int,
                  rng: np.random.Generator, init: Init = Init.RANDOM_UNIFORM, record_trace: bool = True):
    """Momentum sign ascent with checkpointed step halving (l-inf APGD).

    The step starts at ``2 * epsilon``. At each checkpoint ``w_j`` the step is
    halved and the iterate reset to the best point so far when fewer than 75%
    of the steps since ``w_{j-1}`` increased the objective, or when neither the
    step nor the best objective changed since ``w_{j-1}``.
    """
    trace = AttackTrace()
    checkpoints = set(apgd_checkpoints(iterations))
    eta = 2.0 * epsilon

    x_prev = _initial_delta(x, epsilon, Init(init), rng)
    f_prev, grad = loss_grad(x + x_prev)
    # restart target tracks the start point too; the returned best covers steps only
    x_max, f_max, grad_max = x_prev, f_prev, grad
    best = x_prev

    delta = x_prev
    n_increase = 0
    last_ckpt, eta_at_last, f_max_at_last = 0, eta, f_max
    for t in range(1, iterations + 1):
        z = _project(x, delta + eta * np.sign(grad), epsilon)
        if t == 1:
            new = z
        else:
            new = _project(x, delta + APGD_MOMENTUM * (z - delta) + (1 - APGD_MOMENTUM) * (delta - x_prev),
                           epsilon)
        x_prev, delta = delta, new
        value, grad = loss_grad(x + delta)
        if value > f_prev:
            n_increase += 1
        f_prev = value
        if trace.observe(t - 1, value, eta, record_trace):
            best = delta
        if value > f_max:
            x_max, f_max, grad_max = delta, value, grad

        if t in checkpoints:
            span = t - last_ckpt
            oscillating = n_increase < APGD_RHO * span
            stalled = eta == eta_at_last and f_max == f_max_at_last
            eta_at_last, f_max_at_last = eta, f_max
            if oscillating or stalled:
                eta /= 2.0
                delta, x_prev, grad, f_prev = x_max, x_max, grad_max, f_max
                trace.halvings.append(t)
            last_ckpt, n_increase = t, 0
    return best, trace


# ---------------------------------------------------------------------------
# attacks against an encoder oracle

def _distortion_loss(oracle: EncoderOracle, x: np.ndarray) -> LossGrad:
    phi_clean = oracle.forward(x)
    return lambda x_adv: oracle.distortion_value_and_grad(x_adv, phi_clean)


def _wrap(x, delta, epsilon, kind, cfg_iterations, seed, oracle) -> Perturbation:
    _check_feasible(x, delta, epsilon)
    return Perturbation(delta=delta, epsilon=epsilon,
                        provenance=Provenance(kind, cfg_iterations, seed, oracle.encoder_id))


def pgd_attack(oracle: EncoderOracle, x: np.ndarray, cfg: AttackConfig):
    x = as_image(x)
    step = _resolve_step(cfg.step_size, cfg.epsilon / 4)
    rng = np.random.default_rng(cfg.seed)
    delta, trace = pgd_maximize(_distortion_loss(oracle, x), x, cfg.epsilon, cfg.iterations, step, rng,
                                cfg.init, cfg.record_trace)
    return _wrap(x, delta, cfg.epsilon, "pgd", cfg.iterations, cfg.seed, oracle), trace


def apgd_attack(oracle: EncoderOracle, x: np.ndarray, cfg: AttackConfig):
    if cfg.step_size != "auto":
        raise InvalidArgumentError("APGD manages its own step size; use step_size='auto'")
    x = as_image(x)
    rng = np.random.default_rng(cfg.seed)
    delta, trace = apgd_maximize(_distortion_loss(oracle, x), x, cfg.epsilon, cfg.iterations, rng,
                                 cfg.init, cfg.record_trace)
    return _wrap(x, delta, cfg.epsilon, "apgd", cfg.iterations, cfg.seed, oracle), trace


def multicrop_pgd(oracle: EncoderOracle, x: np.ndarray, cfg: MultiCropConfig):
    """PGD where each step, with probability ``p_crop``, only updates a random crop.

    On crop steps the gradient is that of the distortion between the cropped
    perturbed image and the cropped clean image.
    """
    x = as_image(x)
    base = cfg.base
    step = _resolve_step(base.step_size, base.epsilon / 8)
    rng = np.random.default_rng(base.seed)
    height, width = x.shape[:2]
    can_crop = height >= 2 and width >= 2
    warnings = []
    if not can_crop and cfg.p_crop > 0:
        msg = f"image {height}x{width} too small to crop; using full-image steps"
        log.warning(msg)
        warnings.append(msg)

    def crop(gen: np.random.Generator, delta: np.ndarray):
        if gen.random() >= cfg.p_crop or not can_crop:
            return None, None
        region = sample_crop_region(height, width, cfg.min_frac, cfg.max_frac, gen)
        win = region.slices()
        x_crop = np.ascontiguousarray(x[win])
        phi_crop = oracle.forward(x_crop)
        _, g = oracle.distortion_value_and_grad(x_crop + delta[win], phi_crop)
        return region, g

    delta, trace = pgd_maximize(_distortion_loss(oracle, x), x, base.epsilon, base.iterations, step, rng,
                                base.init, base.record_trace, crop=crop)
    trace.warnings.extend(warnings)
    return _wrap(x, delta, base.epsilon, "multicrop_pgd", base.iterations, base.seed, oracle), trace


def _l2_normalize(g: np.ndarray) -> tuple[np.ndarray, float]:
    norm = math.sqrt(math.fsum((g * g).ravel()))
    if norm == 0.0:
        return g, 0.0
    g = g / norm
    return g, math.sqrt(math.fsum((g * g).ravel()))


def universal_train(oracle: EncoderOracle, train_images, cfg: UniversalConfig):
    """Train one native-resolution delta over a pool of images of varying size.

    Each step samples ``batch_size`` pool images, resizes the delta to each
    with :func:`nearest_resize`, pulls each distortion gradient back through
    the resize adjoint, l2-normalizes it, sums and takes a sign step. Box
    feasibility is left to application time.
    """
    images = [as_image(x, f"train_images[{i}]") for i, x in enumerate(train_images)]
    if not images:
        raise InvalidArgumentError("universal_train needs a non-empty image pool")
    if len(images) < cfg.train_pool_size:
        raise InvalidArgumentError(f"pool of {len(images)} images is smaller than train_pool_size={cfg.train_pool_size}")
    pool = images[:cfg.train_pool_size]
    channels = {x.shape[2] for x in pool}
    if len(channels) != 1:
        raise InvalidArgumentError(f"train images mix channel counts {sorted(channels)}")
    (c,) = channels
    nh, nw = cfg.native_shape
    rng = np.random.default_rng(cfg.seed)
    if cfg.init is Init.ZERO:
        delta = np.zeros((nh, nw, c))
    else:
        delta = project_linf(rng.uniform(-cfg.epsilon, cfg.epsilon, size=(nh, nw, c)), cfg.epsilon)
    cache = CleanEmbeddingCache()
    trace = AttackTrace(grad_norms=[], batches=[])

    for t in range(cfg.iterations):
        batch = sorted(int(i) for i in rng.choice(len(pool), size=cfg.batch_size, replace=False))
        total = np.zeros_like(delta)
        batch_value = 0.0
        norms = []
        for i in batch:
            x = pool[i]
            d = nearest_resize(delta, x.shape[0], x.shape[1])
            d_clip = clip_to_image_box(x, d)
            value, g = oracle.distortion_value_and_grad(x + d_clip, cache.get(oracle, x))
            # clamp derivative: no signal through entries the box clipped
            g = np.where(d_clip == d, g, 0.0)
            if cfg.normalize_at == "image":
                g, n = _l2_normalize(g)
                g = nearest_resize_adjoint(g, nh, nw)
            else:
                g, n = _l2_normalize(nearest_resize_adjoint(g, nh, nw))
            norms.append(n)
            total += g
            batch_value += value
        if cfg.record_trace:
            trace.grad_norms.append(norms)
            trace.batches.append(batch)
        trace.observe(t, batch_value, cfg.step_size, cfg.record_trace)
        delta = project_linf(delta + cfg.step_size * np.sign(total), cfg.epsilon)

    assert np.abs(delta).max(initial=0.0) <= cfg.epsilon + LINF_SLACK
    pert = Perturbation(delta=delta, epsilon=cfg.epsilon,
                        provenance=Provenance("universal", cfg.iterations, cfg.seed, oracle.encoder_id))
    return pert, trace


def run_attack(kind: str, oracle: EncoderOracle, x: np.ndarray, cfg: AttackConfig, **multicrop_kwargs):
    """Dispatch an image-specific attack by name (``pgd``, ``apgd`` or ``multicrop``)."""
    if kind == "pgd":
        return pgd_attack(oracle, x, cfg)
    if kind == "apgd":
        return apgd_attack(oracle, x, cfg)
    if kind in ("multicrop", "multicrop_pgd"):
        return multicrop_pgd(oracle, x, MultiCropConfig(base=cfg, **multicrop_kwargs))
    raise InvalidArgumentError(f"unknown attack kind {kind!r}")


def with_epsilon(cfg: AttackConfig, epsilon: float) -> AttackConfig:
    return replace(cfg, epsilon=epsilon)
