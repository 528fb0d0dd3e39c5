"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, arguments or inputs),
2 runtime failure (divergence, unreadable checkpoint, ...).
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .synth import AnnotationFormatError, Dataset, generate_dataset, load_png

log = logging.getLogger("hrdet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    if not Path(path).exists():
        raise UsageError(f"config file {path} does not exist")
    return load_config(path)


def _progress(rec):
    log.info("step %5d  %s  rpn %.4f  tr %.4f", rec.step, rec.image_id, rec.rpn_loss, rec.tr_loss)


def cmd_train(args) -> int:
    cfg = _config(args.config)
    data = P.resolve_dataset(cfg, args.data, args.out)
    P.train(cfg, data, args.out, _progress)
    print(f"checkpoint written to {Path(args.out) / 'checkpoint'}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = P.load_detector(args.ckpt)
    paths = sorted(glob.glob(args.images))
    if not paths:
        raise UsageError(f"no images match {args.images!r}")
    c = model.cfg.data

    def pairs():
        for p in paths:
            yield P.ImagePair.from_highres(Path(p).stem, load_png(p), c.canvas_res, c.lowres_res)

    dets = P.detect_pairs(model, pairs(), args.dump_proposals, args.dump_patches)
    P.write_detections(args.out, dets, model.cfg.class_names)
    print(f"{len(dets)} detections on {len(paths)} images -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = P.load_detector(args.ckpt)
    data = Dataset(args.data)
    report, _ = P.evaluate(model, data, args.split)
    Path(args.report).write_text(report.to_json() + "\n")
    table = report.table(P.variant_label(model.cfg))
    if args.table:
        Path(args.table).write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()] if args.axes else []
    if args.steps is not None:
        cfg = cfg.replace(**{"ablation.steps": args.steps})
    P.ablation_variants(cfg, axes)     # validate axes before any work
    data = P.resolve_dataset(cfg, args.data, args.out)
    result = P.ablate(cfg, data, axes, args.out, _progress)
    print(result["table"], end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    ok = True
    for name, report in run_gradchecks():
        print(f"{'PASS' if report.passed else 'FAIL'}  {name:<28} {report.max_rel_error:.2e} (tol {report.tol:g})")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    if args.n < 5:
        raise UsageError("--n must be at least 5")
    _, _, anns, split = generate_dataset(args.n, args.seed, cfg.data, args.out)
    print(f"{args.n} images ({len(split['train'])} train / {len(split['test'])} test), "
          f"{len(anns)} parts -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hrdet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (default: data.root, else render one into OUT/data)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over original-resolution images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="glob of PNG files")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-proposals", metavar="JSONL", help="also write low-res proposals")
    p.add_argument("--dump-patches", metavar="DIR", help="also write patch contact sheets")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--table", help="also write the text table here")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate structural variants")
    p.add_argument("--axes", default="", help=f"comma list from {','.join(P.AXES)}")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override training steps per variant")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the autodiff engine")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, AnnotationFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (P.TrainingDiverged, CheckpointError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
