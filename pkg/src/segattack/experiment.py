"""End-to-end experiment: eval-set construction, attack sweeps, universal training, mIoU tables."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthetic
from .config import GRADIENT_SERVICE_ENV, DatasetSection, ExperimentConfig, parse_fraction, parse_shape
from .encoders.base import EncoderOracle
from .encoders.remote import RemoteEncoder
from .encoders.toy import DEFAULT_TAPER, ToyConvEncoder
from .errors import ConfigError
from .evaluation import (EvalItem, ToyPromptSegmenter, cross_encoder_eval, degradation_table, epsilon_label,
                         evaluate_miou, write_records, write_table_csv)
from .io import ResizePolicy, ingest_image, list_images, load_segmap, save_perturbation
from .optimizers import AttackConfig, UniversalConfig, run_attack, universal_train
from .prompts import SegMap, build_eval_set

log = logging.getLogger(__name__)

# fixed so re-runs of one config produce identical sidecars
REPRODUCIBLE_TIMESTAMP = "1970-01-01T00:00:00+00:00"


@dataclass
class Dataset:
    eval_images: dict[str, np.ndarray]
    segmaps: dict[str, np.ndarray]
    train_images: list[np.ndarray] = field(default_factory=list)


TRAIN_SEED_OFFSET = 10_000


def make_encoder(kind: str = "toy", seed: int = 0, gain: float = 2.0, address: str = "",
                 taper: float = DEFAULT_TAPER) -> EncoderOracle:
    if kind == "toy":
        return ToyConvEncoder(seed=seed, gain=gain, taper=taper)
    if kind == "remote":
        address = address or os.environ.get(GRADIENT_SERVICE_ENV, "")
        if not address:
            raise ConfigError(f"remote encoder needs an address or ${GRADIENT_SERVICE_ENV}")
        return RemoteEncoder.connect(address)
    raise ConfigError(f"unknown encoder kind {kind!r}")


def parse_encoder_spec(spec: str | None) -> EncoderOracle:
    """``toy``, ``toy:seed=3,gain=2,taper=0.8`` or ``tcp://host:port``; empty falls back to $FB_GRADIENT_SERVICE."""
    spec = spec or os.environ.get(GRADIENT_SERVICE_ENV) or "toy"
    if spec.startswith("tcp://"):
        return RemoteEncoder.connect(spec)
    name, _, args = spec.partition(":")
    if name != "toy":
        raise ConfigError(f"unknown encoder spec {spec!r} (expected toy[:k=v,...] or tcp://host:port)")
    kwargs = {}
    try:
        for part in filter(None, args.split(",")):
            key, _, value = part.partition("=")
            if key == "seed":
                kwargs["seed"] = int(value)
            elif key in ("gain", "taper"):
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown toy encoder option {key!r}")
    except ValueError as exc:
        raise ConfigError(f"bad toy encoder spec {spec!r}: {exc}") from exc
    return ToyConvEncoder(**kwargs)


def load_dataset_section(ds: DatasetSection, need_segmaps: bool = True) -> Dataset:
    if ds.kind == "synthetic":
        kw = {"size": ds.size, "contrast": ds.contrast, "texture": ds.texture}
        scenes = synthetic.make_dataset(ds.n_eval, ds.seed, **kw)
        train = synthetic.make_dataset(ds.n_train, ds.seed + TRAIN_SEED_OFFSET, **kw) if ds.n_train else []
        return Dataset({i: x for i, x, _ in scenes}, {i: s for i, _, s in scenes}, [x for _, x, _ in train])
    policy = ResizePolicy.parse(ds.resize)
    images = {p.stem: ingest_image(p, policy) for p in list_images(ds.images_dir)} if ds.images_dir else {}
    segmaps = {}
    if ds.segmaps_dir:
        for p in sorted(Path(ds.segmaps_dir).iterdir()):
            if p.suffix.lower() in (".png", ".npy") and (not images or p.stem in images):
                segmaps[p.stem] = load_segmap(p)
    elif need_segmaps:
        raise ConfigError("segmentation maps are required (dataset.segmaps_dir / --segmaps)")
    train = [ingest_image(p, policy) for p in list_images(ds.train_dir)] if ds.train_dir else []
    return Dataset(images, segmaps, train)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return load_dataset_section(cfg.dataset)


def eval_items(images: dict, segmaps: dict, min_area: int) -> list[EvalItem]:
    items = []
    for image_id in sorted(segmaps):
        if image_id not in images:
            raise ConfigError(f"segmentation map {image_id!r} has no matching image")
        for inst, point in build_eval_set([SegMap(segmaps[image_id], image_id)], min_area):
            items.append(EvalItem(image_id, images[image_id], inst, [point]))
    return items


def write_evalset(path, items: list[EvalItem]) -> None:
    rows = [{"image_id": it.image_id, "mask_id": it.mask_id, "class_id": it.mask.class_id,
             "area": it.mask.area, "prompts": [p.to_dict() for p in it.prompts]} for it in items]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def eps_dirname(eps: float) -> str:
    return "eps_" + epsilon_label(eps).replace("/", "_")


def _attack_job(oracle, x, method, cfg, multicrop):
    pert, _ = run_attack(method, oracle, x, cfg, **(multicrop if method == "multicrop" else {}))
    return pert


def attack_sweep(oracle, images: dict, epsilons, base: AttackConfig, method: str, multicrop: dict | None = None,
                 workers: int = 1) -> dict[float, dict]:
    """Image-specific perturbations for every (epsilon, image) job; results keyed, order-independent."""
    jobs = [(eps, image_id) for eps in epsilons for image_id in sorted(images)]
    multicrop = multicrop or {}

    def run(job):
        eps, image_id = job
        cfg = AttackConfig(epsilon=eps, iterations=base.iterations, step_size=base.step_size,
                           seed=base.seed, init=base.init, record_trace=False)
        return job, _attack_job(oracle, images[image_id], method, cfg, multicrop)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    out: dict[float, dict] = {eps: {} for eps in epsilons}
    for (eps, image_id), pert in results:
        out[eps][image_id] = pert
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the configured pipeline and write every artefact under ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    items = eval_items(data.eval_images, data.segmaps, cfg.dataset.min_area)
    write_evalset(out / "evalset.json", items)
    used_images = {it.image_id: data.eval_images[it.image_id] for it in items}

    enc_cfg = cfg.encoder
    oracle = make_encoder(enc_cfg.kind, enc_cfg.seed, enc_cfg.gain, enc_cfg.address, enc_cfg.taper)
    seg_seed = cfg.segmenter.encoder_seed if cfg.segmenter.encoder_seed is not None else enc_cfg.seed
    segmenter = ToyPromptSegmenter(ToyConvEncoder(seed=seg_seed, gain=enc_cfg.gain, taper=enc_cfg.taper),
                                   tau=cfg.segmenter.tau)

    epsilons = cfg.epsilons
    step = cfg.attack.step_size if cfg.attack.step_size == "auto" else parse_fraction(cfg.attack.step_size)
    base = AttackConfig(epsilon=epsilons[0] if epsilons else 0.0, iterations=cfg.attack.iterations,
                        step_size=step, seed=cfg.seed, init=cfg.attack.init)
    multicrop = {"p_crop": cfg.attack.p_crop, "min_frac": cfg.attack.min_frac, "max_frac": cfg.attack.max_frac}

    all_records = []
    clean_miou, recs = evaluate_miou(segmenter, items, {i: None for i in used_images}, per=cfg.eval_per)
    all_records += recs
    rows: dict[str, dict] = {"image-specific": {}, "universal": {}}

    specific = attack_sweep(oracle, used_images, epsilons, base, cfg.attack.method, multicrop, cfg.workers)
    for eps in epsilons:
        for image_id, pert in sorted(specific[eps].items()):
            save_perturbation(pert, out / "perturbations" / cfg.attack.method / eps_dirname(eps) / f"{image_id}.pert",
                              created_at=REPRODUCIBLE_TIMESTAMP)
        miou, recs = evaluate_miou(segmenter, items, specific[eps], per=cfg.eval_per)
        rows["image-specific"][eps] = miou
        all_records += recs

    universal = {}
    if cfg.universal.enabled:
        if not data.train_images:
            raise ConfigError("universal attacks need training images (dataset.train_dir or synthetic n_train)")
        for eps in epsilons:
            ucfg = UniversalConfig(epsilon=eps, iterations=cfg.universal.iterations,
                                   step_size=parse_fraction(cfg.universal.step_size),
                                   native_shape=parse_shape(cfg.universal.native_shape),
                                   train_pool_size=cfg.universal.train_pool_size,
                                   batch_size=cfg.universal.batch_size, seed=cfg.seed,
                                   normalize_at=cfg.universal.normalize_at, record_trace=False)
            pert, _ = universal_train(oracle, data.train_images, ucfg)
            universal[eps] = pert
            save_perturbation(pert, out / "perturbations" / "universal" / eps_dirname(eps) / "universal.pert",
                              created_at=REPRODUCIBLE_TIMESTAMP)
            miou, recs = evaluate_miou(segmenter, items, {i: pert for i in used_images}, per=cfg.eval_per)
            rows["universal"][eps] = miou
            all_records += recs

    table = degradation_table(clean_miou, rows)
    write_table_csv(out / "table.csv", table)
    write_records(out / "records.ndjson", all_records)
    summary = {"clean": clean_miou, "rows": {k: {epsilon_label(e): v for e, v in r.items()} for k, r in rows.items()},
               "n_pairs": len(items), "n_images": len(used_images),
               "n_failed": sum(r.status != "OK" for r in all_records),
               "resize_policy": cfg.dataset.resize, "resize_rounding": "half-away-from-zero"}

    if cfg.transfer.enabled:
        target = ToyPromptSegmenter(ToyConvEncoder(seed=cfg.transfer.target_encoder_seed, gain=enc_cfg.gain,
                                                   taper=enc_cfg.taper),
                                    tau=cfg.segmenter.tau)
        t_clean, t_recs = evaluate_miou(target, items, {i: None for i in used_images}, per=cfg.eval_per)
        t_rows: dict[str, dict] = {"image-specific": {}, "universal": {}}
        transfer_records = list(t_recs)
        for eps in epsilons:
            miou, recs = cross_encoder_eval(specific[eps], target, items, per=cfg.eval_per)
            t_rows["image-specific"][eps] = miou
            transfer_records += recs
            if eps in universal:
                miou, recs = cross_encoder_eval({i: universal[eps] for i in used_images}, target, items,
                                                per=cfg.eval_per)
                t_rows["universal"][eps] = miou
                transfer_records += recs
        write_table_csv(out / "transfer_table.csv", degradation_table(t_clean, t_rows))
        write_records(out / "transfer_records.ndjson", transfer_records)
        summary["transfer"] = {"clean": t_clean,
                               "rows": {k: {epsilon_label(e): v for e, v in r.items()} for k, r in t_rows.items()}}

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if hasattr(oracle, "close"):
        oracle.close()
    return summary
