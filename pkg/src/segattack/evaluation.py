"""Segmenter oracles, IoU/mIoU and the clean-vs-attacked degradation table."""

from __future__ import annotations

import abc
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .constraints import apply_perturbation
from .encoders.toy import ToyConvEncoder
from .errors import InvalidArgumentError, SegmenterError
from .prompts import BoxPrompt, MaskInstance, PointPrompt, Polarity
from .types import Perturbation

log = logging.getLogger(__name__)

TABLE_EPSILONS = (Fraction(1, 255), Fraction(2, 255), Fraction(4, 255), Fraction(8, 255))
TABLE_COLUMNS = ["attack", "clean"] + [f"{e.numerator}/{e.denominator}" for e in TABLE_EPSILONS]
TABLE_ROWS = ["image-specific", "universal"]


class SegmenterOracle(abc.ABC):
    """A promptable segmenter ``m = f(x, P)`` returning scored mask proposals."""

    segmenter_id: str
    concurrent_safe: bool = False

    @abc.abstractmethod
    def predict(self, image: np.ndarray, prompts) -> tuple[list[np.ndarray], list[float]]:
        ...


class ToyPromptSegmenter(SegmenterOracle):
    """Patch-feature similarity segmenter built on a :class:`ToyConvEncoder`.

    Features of the encoder's spatial grid are centred by their image mean and
    compared to the prompt reference by cosine similarity; every pixel takes
    the similarity of the patch containing it. A proposal is the set of pixels
    whose similarity exceeds ``tau * m`` for each multiplier ``m``; its score is the
    mean similarity inside it.
    """

    concurrent_safe = True

    def __init__(self, encoder: ToyConvEncoder, tau: float = 0.3, multipliers=(0.9, 1.0, 1.1),
                 segmenter_id: str | None = None):
        self.encoder = encoder
        self.tau = tau
        self.multipliers = tuple(multipliers)
        self.segmenter_id = segmenter_id or f"toyseg-{encoder.encoder_id}"

    @property
    def encoder_id(self) -> str:
        return self.encoder.encoder_id

    def _cell_index(self, n_pixels: int, n_cells: int) -> np.ndarray:
        return np.minimum(np.arange(n_pixels) // self.encoder.patch_size, n_cells - 1)

    def similarity_map(self, image, prompts) -> np.ndarray | None:
        """Per-pixel cosine similarity of the pixel's patch to the prompt reference.

        Returns ``None`` when there is no positive prompt.
        """
        feats = self.encoder.features(image)
        gh, gw, d = feats.shape
        feats = feats - feats.reshape(-1, d).mean(axis=0)
        unit = feats / (np.linalg.norm(feats, axis=-1, keepdims=True) + 1e-12)
        rows = self._cell_index(image.shape[0], gh)
        cols = self._cell_index(image.shape[1], gw)

        refs, negs, box = [], [], None
        for p in prompts:
            if isinstance(p, PointPrompt):
                cell = unit[rows[p.row], cols[p.col]]
                (refs if p.polarity is Polarity.POSITIVE else negs).append(cell)
            elif isinstance(p, BoxPrompt):
                box = p
                refs.append(unit[rows[p.top]:rows[p.bottom - 1] + 1, cols[p.left]:cols[p.right - 1] + 1]
                            .reshape(-1, d).mean(axis=0))
            else:
                raise SegmenterError(f"unsupported prompt {p!r}")
        if not refs:
            return None
        ref = np.mean(refs, axis=0)
        ref = ref / (np.linalg.norm(ref) + 1e-12)
        sim = unit @ ref
        for n in negs:
            # cells closer to a negative prompt than to the reference are pushed out
            sim = np.where(unit @ n > sim, -1.0, sim)
        sim = sim[rows[:, None], cols[None, :]]
        if box is not None:
            inside = np.zeros(image.shape[:2], dtype=bool)
            inside[box.top:box.bottom, box.left:box.right] = True
            sim = np.where(inside, sim, -1.0)
        return sim

    def predict(self, image, prompts):
        sim = self.similarity_map(image, prompts)
        if sim is None:
            empty = np.zeros(image.shape[:2], dtype=bool)
            return [empty.copy() for _ in self.multipliers], [-1.0] * len(self.multipliers)
        proposals, scores = [], []
        for m in self.multipliers:
            mask = sim > self.tau * m
            scores.append(float(sim[mask].mean()) if mask.any() else -1.0)
            proposals.append(mask)
        return proposals, scores


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def select_best_proposal(proposals, scores):
    if len(proposals) == 0:
        raise InvalidArgumentError("no proposals to select from")
    if len(proposals) != len(scores):
        raise InvalidArgumentError(f"{len(proposals)} proposals but {len(scores)} scores")
    k = int(np.argmax(np.asarray(scores, dtype=float)))
    return proposals[k], float(scores[k])


@dataclass
class EvalItem:
    image_id: str
    image: np.ndarray
    mask: MaskInstance
    prompts: list

    @property
    def mask_id(self) -> str:
        return self.mask.mask_id


@dataclass
class EvaluationRecord:
    image_id: str
    mask_id: str
    prompt_descriptor: list
    epsilon: float
    attack_kind: str
    iou: float | None
    encoder_id: str
    segmenter_id: str
    status: str = "OK"
    message: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class EvaluationResult:
    miou: float
    records: list[EvaluationRecord] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(r.status != "OK" for r in self.records)


def _mean_iou(records, per: str) -> float:
    ok = [r for r in records if r.status == "OK"]
    if not ok:
        return math.nan
    if per == "pair":
        return math.fsum(r.iou for r in ok) / len(ok)
    if per == "image":
        by_image: dict[str, list[float]] = {}
        for r in ok:
            by_image.setdefault(r.image_id, []).append(r.iou)
        means = [math.fsum(v) / len(v) for _, v in sorted(by_image.items())]
        return math.fsum(means) / len(means)
    raise InvalidArgumentError(f"unknown averaging granularity {per!r}")


def evaluate_miou(segmenter: SegmenterOracle, eval_set, perturbations, per: str = "pair"):
    """mIoU of ``segmenter`` on ``eval_set`` with each image perturbed per ``perturbations``.

    ``perturbations`` maps image_id to a :class:`Perturbation` or ``None``
    (clean). Universal perturbations are resized to each image. Segmenter
    failures become ``FAILED`` records, excluded from the mean.
    Returns ``(miou, records)``.
    """
    eval_set = list(eval_set)
    missing = sorted({item.image_id for item in eval_set} - set(perturbations))
    if missing:
        raise InvalidArgumentError(f"no perturbation entry for images {missing[:5]}")
    default_encoder = getattr(segmenter, "encoder_id", "")
    perturbed: dict[str, np.ndarray] = {}
    records = []
    for item in eval_set:
        pert: Perturbation | None = perturbations[item.image_id]
        if item.image_id not in perturbed:
            perturbed[item.image_id] = (item.image if pert is None
                                        else apply_perturbation(item.image, pert.delta))
        rec = EvaluationRecord(
            image_id=item.image_id,
            mask_id=item.mask_id,
            prompt_descriptor=[p.to_dict() for p in item.prompts],
            epsilon=0.0 if pert is None else float(pert.epsilon),
            attack_kind="none" if pert is None else pert.provenance.attack_kind,
            iou=None,
            encoder_id=default_encoder if pert is None else pert.provenance.encoder_id,
            segmenter_id=segmenter.segmenter_id,
        )
        try:
            proposals, scores = segmenter.predict(perturbed[item.image_id], item.prompts)
            pred, _ = select_best_proposal(proposals, scores)
            rec.iou = iou(pred, item.mask.mask)
        except Exception as exc:  # noqa: BLE001 - any oracle failure is recorded, not raised
            log.warning("segmenter failed on %s/%s: %s", item.image_id, item.mask_id, exc)
            rec.status, rec.message = "FAILED", f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return _mean_iou(records, per), records


def cross_encoder_eval(source_perturbations, target_segmenter: SegmenterOracle, eval_set, per: str = "pair"):
    """Transfer evaluation: perturbations crafted on one encoder, scored on another segmenter."""
    sources = {p.provenance.encoder_id for p in source_perturbations.values() if p is not None}
    if getattr(target_segmenter, "encoder_id", None) in sources:
        log.info("cross-encoder evaluation with source == target encoder %s", target_segmenter.encoder_id)
    return evaluate_miou(target_segmenter, eval_set, source_perturbations, per=per)


def epsilon_label(eps) -> str:
    frac = Fraction(eps).limit_denominator(255 * 64)
    return f"{frac.numerator}/{frac.denominator}"


def degradation_table(clean: float, rows: dict) -> list[dict]:
    """Rows of the clean / per-epsilon mIoU table (values in percent, two decimals).

    ``rows`` maps a row name (``image-specific``, ``universal``) to
    ``{epsilon: miou}``; missing cells are left blank.
    """
    out = []
    for name in TABLE_ROWS:
        cells = {epsilon_label(e): v for e, v in rows.get(name, {}).items()}
        row = {"attack": name, "clean": f"{100 * clean:.2f}"}
        for col in TABLE_COLUMNS[2:]:
            v = cells.get(col)
            row[col] = "" if v is None else f"{100 * v:.2f}"
        out.append(row)
    return out


def write_table_csv(path, table: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(table)


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[EvaluationRecord]:
    return [EvaluationRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]
