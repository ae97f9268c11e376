"""Command-line entry point: ``segattack <subcommand> ...``.

Exit codes: 0 success, 1 unexpected failure or failed verification,
2 configuration / input error, 3 encoder oracle failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

from . import __version__
from .config import DatasetSection, load_config, parse_epsilons, parse_fraction, parse_shape
from .encoders.remote import make_tcp_server, parse_address, serve_stdio
from .encoders.toy import ToyConvEncoder
from .errors import ConfigError, EncoderUnavailableError, InvalidArgumentError, PerturbationFileError
from .evaluation import (ToyPromptSegmenter, degradation_table, epsilon_label, evaluate_miou, select_best_proposal,
                         write_records, write_table_csv)
from .experiment import (REPRODUCIBLE_TIMESTAMP, eps_dirname, eval_items, load_dataset_section, parse_encoder_spec,
                         run_experiment, write_evalset)
from .io import load_perturbation, render_overlay, save_perturbation
from .constraints import apply_perturbation
from .optimizers import AttackConfig, Init, UniversalConfig, run_attack, universal_train
from .verify import SUITES, format_result, run_all

log = logging.getLogger("segattack")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# argument helpers

def _add_data_args(p: argparse.ArgumentParser, segmaps: bool = True) -> None:
    g = p.add_argument_group("data")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", metavar="DIR", help="directory of PNG/JPEG images")
    src.add_argument("--synthetic", type=int, metavar="N", help="use N seeded synthetic scenes")
    if segmaps:
        g.add_argument("--segmaps", metavar="DIR", help="label maps (PNG or .npy) named like the images")
    g.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic scenes (default 0)")
    g.add_argument("--resize", default="NONE", help="NONE or SHORTEST_EDGE:<n> (default NONE)")


def _dataset(args, train: bool = False, need_segmaps: bool = True):
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise ConfigError("--synthetic needs a positive count")
        section = DatasetSection(kind="synthetic", seed=args.data_seed,
                                 n_eval=0 if train else args.synthetic, n_train=args.synthetic if train else 0)
    else:
        section = DatasetSection(kind="paths", resize=args.resize,
                                 images_dir="" if train else args.images,
                                 train_dir=args.images if train else "",
                                 segmaps_dir=getattr(args, "segmaps", None) or "")
    return load_dataset_section(section, need_segmaps=need_segmaps)


def _segmenter(args) -> ToyPromptSegmenter:
    encoder = parse_encoder_spec(args.encoder)
    if not isinstance(encoder, ToyConvEncoder):
        raise ConfigError("the in-process segmenter needs a toy encoder spec, e.g. toy:seed=0")
    return ToyPromptSegmenter(encoder, tau=args.tau)


def _fraction(text: str) -> float:
    try:
        return parse_fraction(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_attack(args) -> int:
    data = _dataset(args, need_segmaps=False)
    if not data.eval_images:
        raise ConfigError("no input images found")
    oracle = parse_encoder_spec(args.encoder)
    if args.method == "apgd" and args.step is not None:
        raise ConfigError("APGD adapts its own step size; drop --step")
    step = "auto" if args.step is None else _fraction(args.step)
    epsilons = parse_epsilons(args.eps)
    multicrop = {"p_crop": args.p_crop, "min_frac": args.min_frac, "max_frac": args.max_frac} \
        if args.method == "multicrop" else {}
    out = Path(args.out)

    def job(eps, image_id):
        cfg = AttackConfig(epsilon=eps, iterations=args.iters, step_size=step, seed=args.seed,
                           init=Init(args.init), record_trace=True)
        pert, trace = run_attack(args.method, oracle, data.eval_images[image_id], cfg, **multicrop)
        path = out / args.method / eps_dirname(eps) / f"{image_id}.pert"
        # written as soon as each job finishes so an interrupted sweep keeps its results
        save_perturbation(pert, path, created_at=REPRODUCIBLE_TIMESTAMP)
        return eps, image_id, trace.best_objective

    jobs = [(eps, image_id) for eps in epsilons for image_id in sorted(data.eval_images)]
    objectives: dict[float, dict[str, float]] = {eps: {} for eps in epsilons}
    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        futures = [pool.submit(job, *j) for j in jobs]
        for fut in as_completed(futures):
            eps, image_id, best = fut.result()
            objectives[eps][image_id] = best
    for eps in epsilons:
        vals = objectives[eps]
        print(f"{args.method} eps={epsilon_label(eps)}: {len(vals)} images, "
              f"mean distortion {sum(vals.values()) / len(vals):.6g}")
    return EXIT_OK


def cmd_universal(args) -> int:
    data = _dataset(args, train=True, need_segmaps=False)
    if not data.train_images:
        raise ConfigError("no training images found")
    oracle = parse_encoder_spec(args.encoder)
    pool = args.pool if args.pool is not None else len(data.train_images)
    for eps in parse_epsilons(args.eps):
        cfg = UniversalConfig(epsilon=eps, iterations=args.iters, step_size=_fraction(args.step),
                              native_shape=parse_shape(args.native), train_pool_size=pool, batch_size=args.batch,
                              seed=args.seed, init=Init(args.init), normalize_at=args.normalize_at,
                              record_trace=True)
        pert, trace = universal_train(oracle, data.train_images, cfg)
        path = Path(args.out) / eps_dirname(eps) / "universal.pert"
        save_perturbation(pert, path, created_at=REPRODUCIBLE_TIMESTAMP)
        last = trace.objective_per_iter[-1] if trace.objective_per_iter else float("nan")
        print(f"universal eps={epsilon_label(eps)}: {cfg.iterations} iters, batch objective "
              f"{last:.6g} (best {trace.best_objective:.6g}) -> {path}")
    return EXIT_OK


def cmd_build_evalset(args) -> int:
    data = _dataset(args)
    items = eval_items(data.eval_images, data.segmaps, args.min_area)
    write_evalset(args.out, items)
    print(f"{len(items)} (mask, prompt) pairs -> {args.out}")
    return EXIT_OK


def _load_perturbation_set(path: Path, image_ids) -> dict:
    if path.is_file():
        p = load_perturbation(path)
        return {i: p for i in image_ids}
    perts = {}
    for image_id in image_ids:
        f = path / f"{image_id}.pert"
        if not f.exists():
            raise ConfigError(f"{path}: no perturbation for image {image_id!r}")
        perts[image_id] = load_perturbation(f)
    return perts


def cmd_evaluate(args) -> int:
    data = _dataset(args)
    items = eval_items(data.eval_images, data.segmaps, args.min_area)
    if not items:
        raise ConfigError("evaluation set is empty (check --min-area and the label maps)")
    image_ids = sorted({it.image_id for it in items})
    segmenter = _segmenter(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    clean, records = evaluate_miou(segmenter, items, {i: None for i in image_ids}, per=args.per)
    print(f"clean mIoU {clean:.4f} ({len(items)} pairs, {len(image_ids)} images)")
    rows: dict[str, dict] = {"image-specific": {}, "universal": {}}
    sources = {}
    for spec in args.perturbations or []:
        perts = _load_perturbation_set(Path(spec), image_ids)
        first = perts[image_ids[0]]
        kind = "universal" if first.provenance.attack_kind == "universal" else "image-specific"
        miou, recs = evaluate_miou(segmenter, items, perts, per=args.per)
        records += recs
        rows[kind][first.epsilon] = miou
        transfer = first.provenance.encoder_id != segmenter.encoder_id
        sources[spec] = {"attack_kind": first.provenance.attack_kind, "epsilon": first.epsilon,
                         "encoder_id": first.provenance.encoder_id, "cross_encoder": transfer, "miou": miou}
        note = f" (transfer {first.provenance.encoder_id} -> {segmenter.encoder_id})" if transfer else ""
        print(f"{kind} eps={epsilon_label(first.epsilon)}: mIoU {miou:.4f}{note}")
    write_records(out / "records.ndjson", records)
    write_table_csv(out / "table.csv", degradation_table(clean, rows))
    failed = sum(r.status != "OK" for r in records)
    summary = {"clean": clean, "rows": {k: {epsilon_label(e): v for e, v in r.items()} for k, r in rows.items()},
               "segmenter_id": segmenter.segmenter_id, "n_pairs": len(items), "n_images": len(image_ids),
               "n_failed": failed, "per": args.per, "perturbations": sources}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if failed:
        print(f"warning: {failed} segmenter queries failed; see records.ndjson", file=sys.stderr)
    return EXIT_OK


def cmd_render(args) -> int:
    data = _dataset(args)
    if args.image_id not in data.eval_images:
        raise ConfigError(f"unknown image id {args.image_id!r}")
    image = data.eval_images[args.image_id]
    items = eval_items({args.image_id: image}, {args.image_id: data.segmaps[args.image_id]}, args.min_area)
    if args.ground_truth:
        masks = [it.mask.mask for it in items]
    else:
        if args.perturbation:
            image = apply_perturbation(image, load_perturbation(args.perturbation).delta)
        segmenter = _segmenter(args)
        masks = [select_best_proposal(*segmenter.predict(image, it.prompts))[0] for it in items]
    render_overlay(image, masks, args.out)
    print(f"{len(masks)} masks -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(args.suite)
    for r in results:
        print(format_result(*r))
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAILED


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"artefacts in {cfg.output_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    oracle = parse_encoder_spec(args.encoder)
    if args.stdio:
        serve_stdio(oracle)
        return EXIT_OK
    host, port = parse_address(args.listen)
    with make_tcp_server(oracle, host, port) as server:
        h, p = server.server_address[:2]
        print(f"serving {oracle.encoder_id} on tcp://{h}:{p}", file=sys.stderr, flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segattack",
                                     description="Prompt-agnostic embedding-distortion attacks on promptable segmenters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    encoder_help = "toy[:seed=S,gain=G,taper=T] or tcp://host:port (default: $FB_GRADIENT_SERVICE, else toy)"

    p = sub.add_parser("attack", help="image-specific PGD / APGD / multi-crop PGD over an epsilon sweep")
    _add_data_args(p, segmaps=False)
    p.add_argument("--encoder", help=encoder_help)
    p.add_argument("--method", choices=["pgd", "apgd", "multicrop"], default="apgd")
    p.add_argument("--eps", default="1/255,2/255,4/255,8/255", help="comma-separated radii, fractions allowed")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--step", help="fixed step (not for apgd); default eps/4, multicrop eps/8")
    p.add_argument("--init", choices=[i.value for i in Init], default=Init.RANDOM_UNIFORM.value)
    p.add_argument("--p-crop", type=float, default=0.8)
    p.add_argument("--min-frac", type=float, default=0.3)
    p.add_argument("--max-frac", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="perturbations")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("universal", help="train and save a universal perturbation")
    _add_data_args(p, segmaps=False)
    p.add_argument("--encoder", help=encoder_help)
    p.add_argument("--eps", default="8/255")
    p.add_argument("--pool", type=int, help="training pool size (default: all images)")
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", default="1/255")
    p.add_argument("--native", default="1024x1024", help="native perturbation size HxW")
    p.add_argument("--normalize-at", choices=["native", "image"], default="native")
    p.add_argument("--init", choices=[i.value for i in Init], default=Init.RANDOM_UNIFORM.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="perturbations/universal")
    p.set_defaults(func=cmd_universal)

    p = sub.add_parser("build-evalset", help="masks of at least --min-area pixels with one interior point each")
    _add_data_args(p)
    p.add_argument("--min-area", type=int, default=900)
    p.add_argument("--out", default="evalset.json")
    p.set_defaults(func=cmd_build_evalset)

    p = sub.add_parser("evaluate", help="mIoU of the toy segmenter, clean and under saved perturbations")
    _add_data_args(p)
    p.add_argument("--encoder", default="toy", help="segmenter backbone, toy[:seed=S,...]")
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--perturbations", action="append", metavar="PATH",
                   help="directory of <image_id>.pert files or one universal .pert file (repeatable)")
    p.add_argument("--min-area", type=int, default=900)
    p.add_argument("--per", choices=["pair", "image"], default="pair")
    p.add_argument("--out", default="evaluation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="write an [image | masks] overlay PNG")
    _add_data_args(p)
    p.add_argument("--image-id", required=True)
    p.add_argument("--encoder", default="toy")
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--perturbation", help="apply this .pert file before predicting")
    p.add_argument("--ground-truth", action="store_true", help="draw the reference masks instead")
    p.add_argument("--min-area", type=int, default=900)
    p.add_argument("--out", default="overlay.png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("verify", help="run the built-in invariant suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="run a full experiment from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="serve an encoder over the gradient-service protocol")
    p.add_argument("--encoder", default="toy")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--stdio", action="store_true", help="speak the protocol on stdin/stdout")
    mode.add_argument("--listen", default="tcp://127.0.0.1:0", help="tcp://host:port (port 0 picks one)")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, PerturbationFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EncoderUnavailableError as exc:
        print(f"error: encoder oracle failed: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
