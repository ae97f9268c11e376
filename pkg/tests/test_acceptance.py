"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line (collected again in the terminal
summary). Tolerances are the contractual ones; nothing here is loosened.
"""

import csv
import filecmp
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from segattack import synthetic
from segattack.config import config_from_dict
from segattack.constraints import clip_to_image_box, nearest_resize, nearest_resize_adjoint, project_linf, \
    sample_crop_region
from segattack.encoders.toy import ToyConvEncoder
from segattack.evaluation import iou
from segattack.experiment import run_experiment
from segattack.objectives import distortion, universal_objective
from segattack.optimizers import (AttackConfig, Init, MultiCropConfig, UniversalConfig, apgd_attack, apgd_checkpoints,
                                  apgd_maximize, multicrop_pgd, pgd_attack, universal_train)
from segattack.prompts import SegMap, build_eval_set

from .conftest import criterion

EPSILONS = [1 / 255, 2 / 255, 4 / 255, 8 / 255]
N_SEEDS = 10


@pytest.fixture(scope="module")
def toy():
    return ToyConvEncoder(seed=0)


@pytest.fixture(scope="module")
def seeded_images():
    # image i pairs with attack seed i
    return [x for _, x, _ in synthetic.make_dataset(N_SEEDS, seed=5)]


@pytest.fixture(scope="module")
def apgd_runs(toy, seeded_images):
    """APGD best objective per (seed, epsilon), shared by criteria 4 and 5."""
    out = {}
    for seed, x in enumerate(seeded_images):
        for eps in EPSILONS:
            _, trace = apgd_attack(toy, x, AttackConfig(eps, iterations=100, seed=seed))
            out[seed, eps] = trace.best_objective
    return out


def test_c1_constraint_exactness():
    with criterion(1, "constraint exactness") as c:
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        violations = 0
        for _ in range(1000):
            h, w = rng.integers(1, 33, size=2)
            x = rng.uniform(0.0, 1.0, size=(h, w, 3))
            # include exact box faces
            x[rng.random(x.shape) < 0.1] = 0.0
            x[rng.random(x.shape) < 0.1] = 1.0
            eps = float(rng.choice([0.0, 1 / 255, 8 / 255, 16 / 255, rng.uniform(0.0, 1.0)]))
            delta = rng.normal(0.0, 0.3, size=x.shape)
            d = clip_to_image_box(x, project_linf(delta, eps))
            x_adv = x + d
            violations += int(np.count_nonzero(np.abs(d) > eps))
            violations += int(np.count_nonzero((x_adv < 0.0) | (x_adv > 1.0)))
        elapsed = time.perf_counter() - start
        c.note(f"1000 triples, {violations} violations, {elapsed:.2f} s")
        assert violations == 0
        assert elapsed < 5.0


def test_c2_gradient_fidelity(toy):
    with criterion(2, "gradient fidelity") as c:
        rng = np.random.default_rng(7)
        h = 1e-5
        start = time.perf_counter()
        worst = 0.0
        for _ in range(20):
            size = int(rng.choice([16, 24, 32]))
            x = rng.uniform(0.05, 0.95, size=(size, size, 3))
            x_adv = np.clip(x + rng.uniform(-8 / 255, 8 / 255, size=x.shape), 0.0, 1.0)
            phi = toy.forward(x)
            _, grad = toy.distortion_value_and_grad(x_adv, phi)
            for _ in range(3):
                v = rng.normal(size=x.shape)
                fd = (distortion(phi, toy.forward(x_adv + h * v)) - distortion(phi, toy.forward(x_adv - h * v))) / (2 * h)
                an = float(np.sum(grad * v))
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
        elapsed = time.perf_counter() - start
        c.note(f"20 pairs x 3 directions, worst relative error {worst:.2e}, {elapsed:.1f} s")
        assert worst < 1e-4
        assert elapsed < 30.0


def test_c3_apgd_quadratic():
    with criterion(3, "APGD on a concave quadratic") as c:
        rng = np.random.default_rng(0)
        eps = 8 / 255
        x = rng.uniform(0.2, 0.8, size=(4, 4, 3))
        # a mix of interior optima and optima on the faces of the ball
        target = rng.uniform(-1.5 * eps, 1.5 * eps, size=x.shape)
        maximizer = np.clip(target, -eps, eps)

        def loss_grad(x_adv):
            d = x_adv - x
            return -float(np.sum((d - target) ** 2)), -2.0 * (d - target)

        best, trace = apgd_maximize(loss_grad, x, eps, 100, rng, Init.RANDOM_UNIFORM)
        gap = loss_grad(x + maximizer)[0] - loss_grad(x + best)[0]
        steps = trace.step_size_per_iter
        checkpoints = apgd_checkpoints(100)
        c.note(f"objective gap {gap:.2e} after {len(steps)} iters, halvings at {trace.halvings}")
        assert len(steps) <= 100
        assert 0.0 <= gap <= 1e-6
        assert all(b <= a for a, b in zip(steps, steps[1:]))
        assert set(trace.halvings) <= set(checkpoints)
        for t in trace.halvings:
            # steps[t] is the first step taken after the checkpoint at iteration t
            assert steps[t] == steps[t - 1] / 2
        changed = {i for i in range(1, len(steps)) if steps[i] != steps[i - 1]}
        assert changed == set(trace.halvings)


def test_c4_apgd_beats_pgd(toy, seeded_images, apgd_runs):
    with criterion(4, "APGD >= PGD") as c:
        eps = 4 / 255
        wins = 0
        for seed, x in enumerate(seeded_images):
            _, pgd_trace = pgd_attack(toy, x, AttackConfig(eps, iterations=100, seed=seed))
            wins += apgd_runs[seed, eps] >= pgd_trace.best_objective
        c.note(f"APGD >= PGD in {wins}/10 seeds at eps=4/255")
        assert wins >= 8


def test_c5_effectiveness_ramp(toy, seeded_images, apgd_runs):
    with criterion(5, "attack effectiveness ramp") as c:
        monotone = all(apgd_runs[s, a] < apgd_runs[s, b] for s in range(N_SEEDS)
                       for a, b in zip(EPSILONS, EPSILONS[1:]))
        ratios = {}
        for eps in EPSILONS:
            per_seed = []
            for seed, x in enumerate(seeded_images):
                gen = np.random.default_rng(10_000 + seed)
                rand = clip_to_image_box(x, gen.uniform(-eps, eps, size=x.shape))
                baseline = distortion(toy.forward(x), toy.forward(x + rand))
                per_seed.append(apgd_runs[seed, eps] / baseline)
            ratios[eps] = statistics.median(per_seed)
        c.note("strictly increasing per seed: " + str(monotone))
        c.note("median ratio vs random " + ", ".join(f"{r:.1f}x" for r in ratios.values()))
        assert monotone
        assert all(r >= 10.0 for r in ratios.values())


def test_c6_end_to_end_degradation(tmp_path):
    with criterion(6, "end-to-end degradation") as c:
        start = time.perf_counter()
        summary = run_experiment(config_from_dict({"output_dir": str(tmp_path / "run")}))
        elapsed = time.perf_counter() - start
        clean = summary["clean"]
        specific = [summary["rows"]["image-specific"][k] for k in ("1/255", "2/255", "4/255", "8/255")]
        c.note(f"clean {clean:.3f}, image-specific " + "/".join(f"{v:.3f}" for v in specific)
               + f", {summary['n_images']} images, {elapsed:.0f} s")
        with open(tmp_path / "run" / "table.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert summary["n_images"] == 20
        assert clean >= 0.9
        assert specific[-1] < 0.5 * clean
        # monotone over the attacked columns
        assert all(b <= a for a, b in zip(specific, specific[1:]))
        assert rows[0] == ["attack", "clean", "1/255", "2/255", "4/255", "8/255"]
        assert [r[0] for r in rows[1:]] == ["image-specific", "universal"]
        assert all(len(r) == 6 and all(cell for cell in r) for r in rows[1:])
        assert elapsed < 600


def test_c7_universal_contracts(toy):
    with criterion(7, "universal protocol") as c:
        eps = 8 / 255
        # batch size and normalization at the pool=100 setting
        gen = np.random.default_rng(0)
        pool = [gen.uniform(0.1, 0.9, size=(16, 16, 3)) for _ in range(100)]
        cfg = UniversalConfig(epsilon=eps, iterations=5, step_size=1 / 255, native_shape=(32, 32),
                              train_pool_size=100, batch_size=10, seed=0)
        _, trace = universal_train(toy, pool, cfg)
        assert all(len(b) == 10 and len(set(b)) == 10 for b in trace.batches)
        norms = [n for per_iter in trace.grad_norms for n in per_iter]
        assert all(n == 0.0 or abs(n - 1.0) <= 1e-10 for n in norms)
        c.note(f"batches of 10 from 100, {len(norms)} grad norms within 1e-10 of 1")

        # generalization against a random delta on held-out images
        margins = []
        for seed in range(5):
            train = [x for _, x, _ in synthetic.make_dataset(20, seed=1000 + seed)]
            held_out = [x for _, x, _ in synthetic.make_dataset(5, seed=2000 + seed)]
            ucfg = UniversalConfig(epsilon=eps, iterations=60, step_size=1 / 255, native_shape=(96, 96),
                                   train_pool_size=20, batch_size=10, seed=seed)
            pert, _ = universal_train(toy, train, ucfg)
            rand = np.random.default_rng(seed).uniform(-eps, eps, size=(96, 96, 3))
            trained = universal_objective(toy, held_out, pert.delta).value
            random = universal_objective(toy, held_out, rand).value
            margins.append(trained / random)
        c.note(f"held-out trained/random median {statistics.median(margins):.1f}x")
        assert statistics.median(margins) > 1.0

        worst = 0.0
        for _ in range(50):
            nh, nw, th, tw = gen.integers(1, 64, size=4)
            d = gen.normal(size=(nh, nw, 3))
            y = gen.normal(size=(th, tw, 3))
            worst = max(worst, abs(np.sum(nearest_resize(d, th, tw) * y) - np.sum(d * nearest_resize_adjoint(y, nh, nw))))
        c.note(f"adjoint mismatch {worst:.1e}")
        assert worst <= 1e-10


class _Recorder(ToyConvEncoder):
    def __init__(self, full_shape):
        super().__init__(seed=0)
        self.full_shape = full_shape
        self.iterates = []

    def distortion_value_and_grad(self, x_adv, phi_clean):
        if x_adv.shape == self.full_shape:
            self.iterates.append(x_adv.copy())
        return super().distortion_value_and_grad(x_adv, phi_clean)


def test_c8_multicrop_contracts(toy):
    with criterion(8, "multi-crop contracts") as c:
        x = synthetic.make_dataset(1, seed=3)[0][1]
        eps = 8 / 255
        base = AttackConfig(eps, iterations=30, seed=4, step_size=eps / 8)
        a, _ = multicrop_pgd(toy, x, MultiCropConfig(base, p_crop=0.0))
        b, _ = pgd_attack(toy, x, base)
        assert a.delta.tobytes() == b.delta.tobytes()
        c.note("p_crop=0 byte-identical to PGD")

        rec = _Recorder(x.shape)
        _, trace = multicrop_pgd(rec, x, MultiCropConfig(AttackConfig(eps, iterations=30, seed=4)))
        deltas = [it - x for it in rec.iterates]
        crops = 0
        for t, region in enumerate(trace.crop_regions):
            if region is None:
                continue
            crops += 1
            outside = np.ones(x.shape[:2], dtype=bool)
            outside[region.slices()] = False
            assert np.array_equal(deltas[t + 1][outside], deltas[t][outside])
        c.note(f"{crops}/30 crop steps leave the outside untouched")
        assert crops > 0

        gen = np.random.default_rng(0)
        h, w = 96, 128
        fracs = []
        for _ in range(10_000):
            r = sample_crop_region(h, w, 0.3, 0.9, gen)
            fracs += [r.crop_height / h, r.crop_width / w]
        c.note(f"crop fractions in [{min(fracs):.3f}, {max(fracs):.3f}]")
        assert 0.3 <= min(fracs) and max(fracs) <= 0.9


def test_c9_evaluation_set_protocol():
    with criterion(9, "evaluation-set protocol") as c:
        labels = np.zeros((120, 120), dtype=np.int64)
        labels[5:36, 5:36] = 1            # 31x31 = 961 px, centre (20, 20)
        labels[50:80, 0:30] = 2           # 900 px, kept at the threshold
        labels[0:4, 60:64] = 2            # smaller component of class 2, not the largest
        labels[50:79, 60:91] = 3          # 29x31 = 899 px, filtered
        labels[90:100, 90:100] = 4        # 100 px, filtered
        labels[85:120, 40:75] = 6         # 35x35 touching the bottom edge, centre (102, 57)
        pairs = build_eval_set([SegMap(labels, "crafted")], 900)
        got = [(m.class_id, m.area, p.row, p.col) for m, p in pairs]
        expected = [(1, 961, 20, 20), (2, 900, 64, 14), (6, 1225, 102, 57)]
        c.note(f"{len(got)} pairs match the hand-enumerated oracle" if got == expected else f"got {got}")
        assert got == expected

        gen = np.random.default_rng(0)
        mismatches = 0
        for _ in range(1000):
            a = gen.random((16, 16)) < gen.random()
            b = gen.random((16, 16)) < gen.random()
            inter = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p and q)
            union = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p or q)
            mismatches += iou(a, b) != (1.0 if union == 0 else inter / union)
        c.note(f"IoU: {mismatches} discrepancies on 1000 pairs")
        assert mismatches == 0


def _tree(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_c10_reproducibility(tmp_path):
    with criterion(10, "reproducibility") as c:
        cfg = {"workers": 2, "dataset": {"n_eval": 6, "n_train": 10},
               "attack": {"iterations": 20},
               "universal": {"iterations": 20, "train_pool_size": 10, "batch_size": 5}}
        for name in ("a", "b"):
            run_experiment(config_from_dict({**cfg, "output_dir": str(tmp_path / name)}))
        a, b = tmp_path / "a", tmp_path / "b"
        files = _tree(a)
        assert files == _tree(b)
        perts = [f for f in files if f.endswith(".pert")]
        same = [f for f in files if filecmp.cmp(a / f, b / f, shallow=False)]
        c.note(f"{len(perts)} .pert files, {len(same)}/{len(files)} artefacts byte-identical")
        assert perts and len(same) == len(files)
        assert (a / "records.ndjson").read_text() == (b / "records.ndjson").read_text()
