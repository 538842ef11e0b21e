"""Command-line entry point: ``pointsynth <verb> [options]``.

Exit codes: 0 success, 2 configuration or validation error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .codec import centroids_from_instances
from .config import ConfigError, substream_seed
from .geometry import generate_point_labels, sample_instance_mask
from .io import (from_uint8, list_images, read_image, read_mask_png, read_points_csv, write_mask_png,
                 write_points_csv)
from .networks import build_networks
from .pipeline import (DatasetManifest, ExperimentConfig, StageFailure, evaluate_predictions, ingest_dataset,
                       load_split, run_pipeline, synthesis_rows, write_item, write_report)
from .segmentor import load_segmentor, predict_instances, save_segmentor, train_segmentor
from .synthesis import SynthItem, load_checkpoint, synthesize_dataset, train_synthesis

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_sections({})
    return cfg.override(seed=args.seed, out=args.out, stages=getattr(args, "stages", None),
                        n_synthetic=getattr(args, "n_synthetic", None))


def _canvas(text):
    parts = [int(v) for v in text.lower().replace("x", " ").replace(",", " ").split()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("canvas must be H,W")
    return tuple(parts)


def cmd_ingest(args):
    m = ingest_dataset(args.source, args.format, args.out, args.split)
    print(f"ingested {len(m.items)} items into {args.out} ({len(m.errata)} skipped)")


def cmd_points2mask(args):
    cfg = _config(args)
    canvas = args.canvas or (read_image(args.like).shape[:2] if args.like else None)
    if canvas is None:
        raise ConfigError("points2mask needs --canvas or --like")
    p = read_points_csv(args.points, canvas)
    mask = sample_instance_mask(p, cfg.sampler, seed=substream_seed(cfg.experiment.seed, "points2mask"))
    write_mask_png(args.out, mask)
    print(f"wrote {int(mask.max())} instances to {args.out}")


def cmd_gen_points(args):
    cfg = _config(args)
    s = cfg.sampler
    labels = generate_point_labels(args.n, (s.count_min, s.count_max), s.min_spacing, args.canvas,
                                   substream_seed(cfg.experiment.seed, "sample"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(labels):
        write_points_csv(out / f"label_{i:04d}.csv", p)
    print(f"wrote {len(labels)} point labels to {out}")


def cmd_train_synth(args):
    cfg = _config(args)
    out = Path(cfg.experiment.out)
    train_cfg = replace(cfg.synth_train, seed=cfg.experiment.seed)
    items = [SynthItem(img, pts, stem) for stem, img, _, pts in load_split(args.data)]
    ckpt = out / "checkpoint.pt"
    if args.resume and ckpt.is_file():
        bundle, state, train_cfg, sampler = load_checkpoint(ckpt, train_cfg, cfg.sampler, force=args.force)
    else:
        bundle, state, sampler = build_networks(cfg.network, seed=cfg.experiment.seed), None, cfg.sampler
    state = train_synthesis(bundle, items, train_cfg, sampler, state=state, out_dir=out)
    print(f"trained {state.step} steps; checkpoint at {ckpt}")


def cmd_synth(args):
    cfg = _config(args)
    bundle, _, _, sampler = load_checkpoint(args.checkpoint)
    files = sorted(Path(args.points).glob("*.csv"))
    if not files:
        raise ConfigError(f"no point CSVs in {args.points}")
    labels = [read_points_csv(f, args.canvas) for f in files]
    variants = args.variants or cfg.synth_gen.n_variants
    pairs, records = synthesize_dataset(bundle, labels, sampler, variants, cfg.experiment.seed,
                                        sources=[f.name for f in files])
    out = Path(cfg.experiment.out)
    items = [write_item(out, f"synth_{k:04d}", img, mask, labels[rec["label_index"]], {"kind": "synthetic", **rec})
             for k, ((img, mask), rec) in enumerate(zip(pairs, records))]
    DatasetManifest("synthetic", items).save(out)
    print(f"wrote {len(items)} synthetic pairs to {out}")


def cmd_train_seg(args):
    cfg = _config(args)
    pairs = [(img, mask) for _, img, mask, _ in load_split(args.data)]
    if any(m is None for _, m in pairs):
        raise ConfigError("training split needs dense masks")
    seg_cfg = replace(cfg.seg_train, seed=cfg.experiment.seed)
    model, records = train_segmentor(pairs, seg_cfg, cfg.seg_network)
    out = Path(cfg.experiment.out)
    out.mkdir(parents=True, exist_ok=True)
    save_segmentor(out / "segmentor.pt", model, cfg.seg_network, seg_cfg, records)
    print(f"saved segmentor to {out / 'segmentor.pt'} (final loss {records[-1]['loss']:.4f})")


def cmd_infer_seg(args):
    cfg = _config(args)
    model, _, _ = load_segmentor(args.model)
    out = Path(cfg.experiment.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = list_images(args.images)
    for path in paths:
        pred = predict_instances(model, from_uint8(read_image(path)), cfg.eval.tile, cfg.eval.overlap,
                                 cfg.eval.thresholds)
        write_mask_png(out / f"{path.stem}.png", pred)
        if args.points:
            write_points_csv(out / f"{path.stem}.csv", centroids_from_instances(pred))
    print(f"wrote {len(paths)} predictions to {out}")


def _mask_dir(path):
    p = Path(path)
    return p / "masks" if (p / "masks").is_dir() else p


def cmd_eval_seg(args):
    gt_dir, pred_dir = _mask_dir(args.gt), _mask_dir(args.pred)
    gt_paths = list_images(gt_dir)
    if not gt_paths:
        raise ConfigError(f"no masks in {gt_dir}")
    missing = [p.name for p in gt_paths if not (pred_dir / p.name).is_file()]
    if missing:
        raise ConfigError(f"predictions missing for: {', '.join(missing)}")
    gts = [read_mask_png(p) for p in gt_paths]
    preds = [read_mask_png(pred_dir / p.name) for p in gt_paths]
    rows = evaluate_predictions(preds, gts, [p.stem for p in gt_paths], run=args.run)
    _emit(rows, args.report)


def _images_of(path):
    p = Path(path)
    d = p / "images" if (p / "images").is_dir() else p
    return [from_uint8(read_image(f)) for f in list_images(d)]


def cmd_eval_synth(args):
    cfg = _config(args)
    rows = synthesis_rows(_images_of(args.real), _images_of(args.fake), cfg.eval,
                          substream_seed(cfg.experiment.seed, "extractor") % 2 ** 31)
    if not rows:
        raise ConfigError("need at least two real and two synthetic images")
    _emit(rows, args.report)


def _emit(rows, path):
    if path:
        write_report(path, rows)
        print(f"wrote {len(rows)} rows to {path}")
    else:
        for r in rows:
            print(",".join("" if v == "" else str(v) for v in r))


def cmd_run(args):
    cfg = _config(args)
    run_dir = run_pipeline(cfg)
    print(f"pipeline finished; report at {run_dir / 'report.csv'}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides [experiment] seed)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pointsynth", description="Point-label driven nuclei image synthesis.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", parents=[common], help="normalize a raw dataset")
    p.add_argument("source")
    p.add_argument("--format", required=True, choices=("monuseg_xml", "mask_png"))
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_ingest, need_out=True)

    p = sub.add_parser("points2mask", parents=[common], help="sample an instance mask from a point CSV")
    p.add_argument("points")
    p.add_argument("--canvas", type=_canvas)
    p.add_argument("--like", help="take the canvas size from this image")
    p.set_defaults(func=cmd_points2mask, need_out=True)

    p = sub.add_parser("gen-points", parents=[common], help="sample random point labels")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--canvas", type=_canvas, required=True)
    p.set_defaults(func=cmd_gen_points, need_out=True)

    p = sub.add_parser("train-synth", parents=[common], help="train the synthesis networks")
    p.add_argument("--data", required=True, help="ingested split directory")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true", help="resume despite a config hash mismatch")
    p.set_defaults(func=cmd_train_synth, need_out=True)

    p = sub.add_parser("synth", parents=[common], help="generate image/mask pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", required=True, help="directory of point CSVs")
    p.add_argument("--canvas", type=_canvas, required=True)
    p.add_argument("--variants", type=int)
    p.set_defaults(func=cmd_synth, need_out=True)

    p = sub.add_parser("train-seg", parents=[common], help="train the instance segmentor")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train_seg, need_out=True)

    p = sub.add_parser("infer-seg", parents=[common], help="predict instance masks")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--points", action="store_true", help="also write centroid CSVs")
    p.set_defaults(func=cmd_infer_seg, need_out=True)

    p = sub.add_parser("eval-seg", parents=[common], help="score predicted masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--run", default="eval")
    p.set_defaults(func=cmd_eval_seg, need_out=False)

    p = sub.add_parser("eval-synth", parents=[common], help="FID/KID between image sets")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.set_defaults(func=cmd_eval_synth, need_out=False)

    p = sub.add_parser("run", parents=[common], help="run the full pipeline")
    p.add_argument("--stages", help="comma-separated subset of sample,train-synth,synth,train-seg,eval")
    p.add_argument("--n-synthetic", type=int, nargs="+", help="one run per generated-pair count")
    p.set_defaults(func=cmd_run, need_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.need_out and not args.out:
        print(f"error: {args.verb} requires --out", file=sys.stderr)
        return EXIT_CONFIG
    if args.verb in ("eval-seg", "eval-synth"):
        args.report, args.out = args.out, None
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other crash is a failed stage
        logging.getLogger(__name__).debug("traceback", exc_info=True)
        print(f"error: {args.verb} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
