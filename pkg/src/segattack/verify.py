"""Quick built-in invariant suites, run by ``segattack verify``.

Each check raises ``AssertionError`` on failure and returns a short detail
string on success. They are small enough to finish in a few seconds.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .constraints import clip_to_image_box, nearest_resize, nearest_resize_adjoint, project_linf
from .encoders.toy import ToyConvEncoder
from .evaluation import iou
from .io import load_perturbation, save_perturbation
from .objectives import distortion
from .optimizers import Init, apgd_checkpoints, apgd_maximize
from .prompts import SegMap, build_eval_set
from .types import Perturbation, Provenance


def check_constraints(n: int = 1000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for _ in range(n):
        h, w = rng.integers(1, 9, size=2)
        x = rng.uniform(0, 1, size=(h, w, 3))
        eps = float(rng.choice([0.0, 1 / 255, 8 / 255, rng.uniform(0, 0.5)]))
        delta = clip_to_image_box(x, project_linf(rng.normal(0, 0.2, size=x.shape), eps))
        assert np.abs(delta).max() <= eps, "l-inf budget violated"
        x_adv = x + delta
        assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0, "box violated"
    return f"{n} random triples, no violations"


def check_gradient(pairs: int = 5, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> str:
    enc = ToyConvEncoder(seed)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        x = rng.uniform(0.1, 0.9, size=(16, 16, 3))
        x_adv = x + rng.uniform(-0.03, 0.03, size=x.shape)
        phi = enc.forward(x)
        _, g = enc.distortion_value_and_grad(x_adv, phi)
        v = rng.normal(size=x.shape)
        f_plus = distortion(phi, enc.forward(x_adv + h * v))
        f_minus = distortion(phi, enc.forward(x_adv - h * v))
        fd = (f_plus - f_minus) / (2 * h)
        an = float(np.sum(g * v))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    assert worst < tol, f"relative error {worst:.2e}"
    return f"directional finite differences, worst relative error {worst:.1e}"


def check_apgd_quadratic(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, size=(4, 4, 3))
    eps = 8 / 255
    # some optima inside the ball, some clipped to its faces
    target = rng.uniform(-1.5 * eps, 1.5 * eps, size=x.shape)
    opt = np.clip(target, -eps, eps)

    def loss_grad(x_adv):
        d = x_adv - x
        return -float(np.sum((d - target) ** 2)), -2 * (d - target)

    best, trace = apgd_maximize(loss_grad, x, eps, 100, rng, Init.RANDOM_UNIFORM)
    gap = loss_grad(x + opt)[0] - loss_grad(x + best)[0]
    assert gap <= 1e-6, f"objective gap {gap:.2e}"
    steps = trace.step_size_per_iter
    assert all(b <= a for a, b in zip(steps, steps[1:])), "step size increased"
    assert set(trace.halvings) <= set(apgd_checkpoints(100)), "halving off-checkpoint"
    return f"objective gap {gap:.1e}, {len(trace.halvings)} halvings"


def check_resize_adjoint(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        nh, nw, th, tw = rng.integers(1, 40, size=4)
        d = rng.normal(size=(nh, nw, 3))
        y = rng.normal(size=(th, tw, 3))
        lhs = float(np.sum(nearest_resize(d, th, tw) * y))
        rhs = float(np.sum(d * nearest_resize_adjoint(y, nh, nw)))
        worst = max(worst, abs(lhs - rhs))
    assert worst <= 1e-10, f"dot-product mismatch {worst:.2e}"
    return f"dot-product test, max mismatch {worst:.1e}"


def check_iou(n: int = 1000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = rng.random((16, 16)) < rng.random()
        b = rng.random((16, 16)) < rng.random()
        inter = sum(bool(p and q) for p, q in zip(a.ravel(), b.ravel()))
        union = sum(bool(p or q) for p, q in zip(a.ravel(), b.ravel()))
        expected = 1.0 if union == 0 else inter / union
        assert iou(a, b) == expected, "IoU differs from pixel count"
    return f"{n} random pairs match pixel counting"


def check_evalset() -> str:
    labels = np.zeros((64, 64), dtype=np.int64)
    labels[10:41, 10:41] = 1  # 31 x 31 = 961 px, kept
    labels[50:60, 50:60] = 2  # 100 px, filtered
    items = build_eval_set([SegMap(labels, "crafted")], min_area=900)
    assert [(m.class_id, m.area) for m, _ in items] == [(1, 961)], "unexpected eval items"
    point = items[0][1]
    assert (point.row, point.col) == (25, 25), f"interior point {point}"
    return "900-px filter and square-centre prompt"


def check_perturbation_roundtrip(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    eps = 8 / 255
    p = Perturbation(project_linf(rng.normal(0, 0.05, size=(7, 5, 3)), eps), eps,
                     Provenance("apgd", 100, seed, "toyconv-s0"))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.pert"
        save_perturbation(p, path)
        q = load_perturbation(path)
    assert np.array_equal(q.delta.astype(np.float32), p.delta.astype(np.float32)), "payload changed"
    return "float32 round trip is bit-identical"


SUITES = {
    "constraints": check_constraints,
    "gradient": check_gradient,
    "apgd-quadratic": check_apgd_quadratic,
    "resize-adjoint": check_resize_adjoint,
    "iou": check_iou,
    "evalset": check_evalset,
    "perturbation-file": check_perturbation_roundtrip,
}


def run_all(names=None) -> list[tuple[str, bool, str]]:
    results = []
    for name in names or SUITES:
        try:
            results.append((name, True, SUITES[name]()))
        except AssertionError as exc:
            results.append((name, False, str(exc) or "assertion failed"))
    return results


def format_result(name: str, ok: bool, detail: str) -> str:
    return f"{'PASS' if ok else 'FAIL'}  {name:<18} {detail}"
