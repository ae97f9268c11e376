import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segattack.constraints import clip_to_image_box, project_linf
from segattack.encoders.base import EmbeddingVector, EncoderOracle
from segattack.encoders.toy import ToyConvEncoder
from segattack.errors import InvalidArgumentError
from segattack.objectives import distortion
from segattack.optimizers import (AttackConfig, Init, MultiCropConfig, UniversalConfig, apgd_attack, apgd_checkpoints,
                                  apgd_maximize, multicrop_pgd, pgd_attack, pgd_maximize, run_attack, universal_train)

from .conftest import random_image

EPS = 4 / 255


def objective(enc, x, delta):
    return distortion(enc.forward(x), enc.forward(x + delta))


def assert_feasible(x, delta, eps):
    assert np.abs(delta).max() <= eps + 1e-12
    assert (x + delta).min() >= 0.0 and (x + delta).max() <= 1.0


def test_checkpoints_for_100():
    assert apgd_checkpoints(100) == [22, 41, 57, 70, 80, 87, 93, 99]


def test_checkpoints_small_budget_strictly_increasing():
    for n in range(1, 60):
        pts = apgd_checkpoints(n)
        assert all(a < b for a, b in zip(pts, pts[1:]))
        assert all(1 <= p <= n for p in pts)


def test_pgd_zero_init_single_step_stays_at_zero(encoder, rng):
    # gradient of the distortion vanishes at delta = 0 and sign(0) = 0
    x = random_image(rng)
    pert, trace = pgd_attack(encoder, x, AttackConfig(EPS, iterations=1, init=Init.ZERO, step_size=EPS / 4))
    assert not pert.delta.any()
    assert trace.objective_per_iter == [0.0]


def test_pgd_single_step_hand_oracle(encoder, rng):
    x = random_image(rng)
    alpha = EPS / 4
    cfg = AttackConfig(EPS, iterations=1, step_size=alpha, seed=3)
    pert, _ = pgd_attack(encoder, x, cfg)
    d0 = clip_to_image_box(x, project_linf(np.random.default_rng(3).uniform(-EPS, EPS, size=x.shape), EPS))
    phi = encoder.forward(x)
    _, g = encoder.distortion_value_and_grad(x + d0, phi)
    d1 = clip_to_image_box(x, project_linf(d0 + alpha * np.sign(g), EPS))
    np.testing.assert_array_equal(pert.delta, d1)


def test_pgd_hand_stepped_on_linear_objective():
    x = np.full((2, 2, 1), 0.5)
    c = np.array([1.0, -2.0, 0.0, 3.0]).reshape(x.shape)

    def loss_grad(x_adv):
        return float(np.sum(c * (x_adv - x))), c

    best, trace = pgd_maximize(loss_grad, x, 0.1, 1, 0.03, np.random.default_rng(0), Init.ZERO)
    np.testing.assert_array_equal(best, 0.03 * np.sign(c))
    assert trace.objective_per_iter == [pytest.approx(0.03 * 6)]


def test_eps_zero_gives_zero(encoder, rng):
    x = random_image(rng, 32, 32)
    for method in ("pgd", "apgd", "multicrop"):
        pert, trace = run_attack(method, encoder, x, AttackConfig(0.0, iterations=5))
        assert not pert.delta.any()
        assert trace.objective_per_iter == [0.0] * 5


def test_small_eps_ramp(encoder, rng):
    x = random_image(rng)
    vals = [pgd_attack(encoder, x, AttackConfig(e, iterations=5))[1].best_objective for e in (0.0, 1e-6, 1e-4)]
    assert vals[0] == 0.0 and vals[0] < vals[1] < vals[2]
    assert vals[1] < 1e-6


def test_pgd_beats_random_baseline(encoder):
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = random_image(r)
        pert, _ = pgd_attack(encoder, x, AttackConfig(EPS, iterations=10, seed=seed))
        rand = clip_to_image_box(x, r.uniform(-EPS, EPS, size=x.shape))
        assert objective(encoder, x, pert.delta) >= objective(encoder, x, rand)


def test_best_is_monotone_in_iterations(encoder, rng):
    x = random_image(rng)
    bests = [pgd_attack(encoder, x, AttackConfig(EPS, iterations=n))[1].best_objective for n in (1, 3, 6, 12)]
    assert bests == sorted(bests)


def test_returned_delta_is_best_iterate(encoder, rng):
    x = random_image(rng)
    pert, trace = apgd_attack(encoder, x, AttackConfig(EPS, iterations=30))
    assert trace.best_objective == max(trace.objective_per_iter)
    assert trace.objective_per_iter.index(trace.best_objective) == trace.best_iter
    assert objective(encoder, x, pert.delta) == pytest.approx(trace.best_objective, rel=1e-12)


def test_attacks_deterministic(encoder, rng):
    x = random_image(rng, 32, 32)
    for method in ("pgd", "apgd", "multicrop"):
        a, _ = run_attack(method, encoder, x, AttackConfig(EPS, iterations=8, seed=5))
        b, _ = run_attack(method, encoder, x, AttackConfig(EPS, iterations=8, seed=5))
        assert a.delta.tobytes() == b.delta.tobytes()


def test_attack_feasible_near_box(encoder, rng):
    x = rng.choice([0.0, 0.005, 0.995, 1.0], size=(32, 32, 3))
    for method in ("pgd", "apgd", "multicrop"):
        pert, _ = run_attack(method, encoder, x, AttackConfig(8 / 255, iterations=6))
        assert_feasible(x, pert.delta, 8 / 255)


def test_apgd_rejects_fixed_step(encoder, rng):
    with pytest.raises(InvalidArgumentError):
        apgd_attack(encoder, random_image(rng), AttackConfig(EPS, step_size=0.01))


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"epsilon": -1.0}, {"step_size": -0.1},
                                    {"step_size": "big"}])
def test_attack_config_validation(kwargs):
    base = {"epsilon": EPS}
    with pytest.raises(InvalidArgumentError):
        AttackConfig(**{**base, **kwargs})


def test_unknown_method(encoder, rng):
    with pytest.raises(InvalidArgumentError):
        run_attack("fgsm", encoder, random_image(rng), AttackConfig(EPS))


def test_apgd_halving_is_exact(encoder, rng):
    x = random_image(rng)
    _, trace = apgd_attack(encoder, x, AttackConfig(EPS, iterations=100))
    steps = trace.step_size_per_iter
    assert steps[0] == 2 * EPS
    assert all(b <= a for a, b in zip(steps, steps[1:]))
    assert set(trace.halvings) <= set(apgd_checkpoints(100))
    for t in trace.halvings:
        assert steps[t] == steps[t - 1] / 2
    # no change anywhere else
    changes = {i + 1 for i in range(len(steps) - 1) if steps[i + 1] != steps[i]}
    assert changes == set(trace.halvings)


def test_apgd_quadratic_interior_optimum():
    gen = np.random.default_rng(1)
    x = gen.uniform(0.3, 0.7, size=(3, 3, 3))
    eps = 8 / 255
    target = gen.uniform(-0.8 * eps, 0.8 * eps, size=x.shape)

    def loss_grad(x_adv):
        d = x_adv - x
        return -float(np.sum((d - target) ** 2)), -2 * (d - target)

    best, _ = apgd_maximize(loss_grad, x, eps, 100, gen)
    assert -loss_grad(x + best)[0] <= 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.2), iters=st.integers(1, 15))
def test_maximizers_stay_feasible(seed, eps, iters):
    gen = np.random.default_rng(seed)
    x = gen.choice([0.0, 0.02, 0.5, 0.98, 1.0], size=(3, 4, 2))
    c = gen.normal(size=x.shape)

    def loss_grad(x_adv):
        return float(np.sum(np.sin(3 * x_adv) * c)), 3 * np.cos(3 * x_adv) * c

    for best, trace in (pgd_maximize(loss_grad, x, eps, iters, eps / 4 + 1e-3, gen),
                        apgd_maximize(loss_grad, x, eps, iters, gen)):
        assert_feasible(x, best, eps)
        assert len(trace.objective_per_iter) == iters


def test_multicrop_p0_byte_identical_to_pgd(encoder, rng):
    x = random_image(rng)
    base = AttackConfig(EPS, iterations=10, seed=9, step_size=EPS / 8)
    a, ta = multicrop_pgd(encoder, x, MultiCropConfig(base, p_crop=0.0))
    b, tb = pgd_attack(encoder, x, base)
    assert a.delta.tobytes() == b.delta.tobytes()
    assert ta.objective_per_iter == tb.objective_per_iter


def test_multicrop_full_crop_matches_pgd(encoder, rng):
    x = random_image(rng)
    base = AttackConfig(EPS, iterations=6, seed=2, step_size=EPS / 8)
    a, ta = multicrop_pgd(encoder, x, MultiCropConfig(base, p_crop=1.0, min_frac=1.0, max_frac=1.0))
    b, _ = pgd_attack(encoder, x, base)
    assert all(r is not None for r in ta.crop_regions)
    np.testing.assert_array_equal(a.delta, b.delta)


class RecordingEncoder(ToyConvEncoder):
    """Keeps every full-size iterate the attack evaluates."""

    def __init__(self, full_shape):
        super().__init__(seed=0)
        self.full_shape = full_shape
        self.iterates = []

    def distortion_value_and_grad(self, x_adv, phi_clean):
        if x_adv.shape == self.full_shape:
            self.iterates.append(x_adv.copy())
        return super().distortion_value_and_grad(x_adv, phi_clean)


def test_multicrop_updates_only_inside_region(rng):
    x = random_image(rng, 32, 32)
    enc = RecordingEncoder(x.shape)
    _, trace = multicrop_pgd(enc, x, MultiCropConfig(AttackConfig(EPS, iterations=20, seed=4), p_crop=0.8))
    deltas = [it - x for it in enc.iterates]
    assert len(deltas) == 21
    n_crops = 0
    for t, region in enumerate(trace.crop_regions):
        if region is None:
            continue
        n_crops += 1
        outside = np.ones(x.shape[:2], dtype=bool)
        outside[region.slices()] = False
        np.testing.assert_array_equal(deltas[t + 1][outside], deltas[t][outside])
    assert 0 < n_crops < 20


class LinearEncoder(EncoderOracle):
    """phi(x) = w * x, flattened; accepts any image size."""

    encoder_id = "linear"

    def forward(self, x):
        return EmbeddingVector(np.cos(np.arange(x.size)) * x.ravel(), self.encoder_id)

    def vjp(self, x, cotangent):
        return (np.cos(np.arange(x.size)) * cotangent).reshape(x.shape)


def test_multicrop_tiny_image_warns():
    x = np.full((1, 9, 3), 0.5)
    _, trace = multicrop_pgd(LinearEncoder(), x, MultiCropConfig(AttackConfig(EPS, iterations=2)))
    assert trace.warnings and all(r is None for r in trace.crop_regions)


@pytest.mark.parametrize("kwargs", [{"p_crop": 1.5}, {"min_frac": 0.0}, {"min_frac": 0.9, "max_frac": 0.5}])
def test_multicrop_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        MultiCropConfig(AttackConfig(EPS), **kwargs)


def test_universal_single_image_reduces_to_pgd(encoder, rng):
    x = random_image(rng, lo=0.3, hi=0.7)
    step = 1 / 255
    ucfg = UniversalConfig(epsilon=EPS, iterations=5, step_size=step, native_shape=x.shape[:2],
                           train_pool_size=1, batch_size=1, seed=11)
    upert, _ = universal_train(encoder, [x], ucfg)
    ppert, ptrace = pgd_attack(encoder, x, AttackConfig(EPS, iterations=5, step_size=step, seed=11))
    # the distortion keeps rising, so PGD's best iterate is its last one
    assert ptrace.best_iter == 4
    np.testing.assert_array_equal(upert.delta, ppert.delta)


def test_universal_grad_norms_and_batches(encoder, rng):
    pool = [random_image(rng, 16, 16), random_image(rng, 24, 16), random_image(rng, 16, 32)] * 2
    cfg = UniversalConfig(epsilon=EPS, iterations=6, step_size=1 / 255, native_shape=(8, 8),
                          train_pool_size=6, batch_size=4, seed=0)
    pert, trace = universal_train(encoder, pool, cfg)
    assert pert.delta.shape == (8, 8, 3)
    assert np.abs(pert.delta).max() <= EPS
    assert all(len(b) == 4 and len(set(b)) == 4 for b in trace.batches)
    for norms in trace.grad_norms:
        assert all(n == 0.0 or abs(n - 1.0) <= 1e-10 for n in norms)


def test_universal_image_normalization_mode(encoder, rng):
    pool = [random_image(rng, 16, 16) for _ in range(3)]
    cfg = UniversalConfig(epsilon=EPS, iterations=3, step_size=1 / 255, native_shape=(8, 8),
                          train_pool_size=3, batch_size=2, normalize_at="image")
    _, trace = universal_train(encoder, pool, cfg)
    assert all(abs(n - 1.0) <= 1e-10 for norms in trace.grad_norms for n in norms)


def test_universal_zero_gradient_norm_is_zero(encoder):
    x = np.full((16, 16, 3), 0.5)
    cfg = UniversalConfig(epsilon=EPS, iterations=2, step_size=1 / 255, native_shape=(16, 16),
                          train_pool_size=1, batch_size=1, init=Init.ZERO)
    _, trace = universal_train(encoder, [x], cfg)
    assert trace.grad_norms[0] == [0.0]


def test_universal_errors(encoder):
    with pytest.raises(InvalidArgumentError):
        universal_train(encoder, [], UniversalConfig(train_pool_size=1, batch_size=1))
    with pytest.raises(InvalidArgumentError):
        UniversalConfig(train_pool_size=5, batch_size=6)
    with pytest.raises(InvalidArgumentError):
        UniversalConfig(normalize_at="somewhere")
    mixed = [np.full((8, 8, 3), 0.5), np.full((8, 8, 1), 0.5)]
    with pytest.raises(InvalidArgumentError):
        universal_train(encoder, mixed, UniversalConfig(train_pool_size=2, batch_size=1, native_shape=(8, 8)))
