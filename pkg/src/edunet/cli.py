"""Command-line entry point: synth, train, eval, infer, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    Sample,
    center_crop_resize,
    load_dataset,
    make_folds,
    resize_bilinear,
    resize_nearest,
    save_mask_png,
    save_sample,
    synth_generate,
)
from .train import NumericError, evaluate, log_to_csv, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fit_extent(samples: List[Sample], size) -> List[Sample]:
    size = tuple(size)
    return [s if s.image.shape == size else center_crop_resize(s, size) for s in samples]


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    for s in synth_generate(args.n, args.size, args.seed, args.classes):
        save_sample(s, out)
    (out / "synth.txt").write_text(
        f"n = {args.n}\nsize = {args.size}\nseed = {args.seed}\nclasses = {args.classes}\n"
    )
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _ablation(args, overrides: List[str]) -> List[str]:
    if args.global_only and args.local_only:
        raise UsageError("--global-only and --local-only are mutually exclusive")
    if args.no_mcega and args.local_only:
        raise UsageError("--no-mcega needs the global branch")
    extra = []
    if args.global_only:
        extra.append("model.use_local=false")
    if args.local_only:
        extra.append("model.use_global=false")
    if args.no_mcega:
        extra.append("model.use_mcega=false")
    return overrides + extra


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.epochs is not None:
        overrides.append(f"train.max_epochs={args.epochs}")
    if args.folds is not None:
        overrides.append(f"run.folds={args.folds}")
    if args.fold is not None:
        overrides.append(f"run.fold={args.fold}")
    run = cfgmod.load(args.config, _ablation(args, overrides))

    samples = _fit_extent(load_dataset(args.data, run.model.num_classes), run.model.input_size)
    if not samples:
        raise DataError(f"no samples found in {args.data}")
    if run.run.folds == 1:
        train_set, val_set = samples, None
    else:
        spec = make_folds([s.id for s in samples], run.run.folds, run.train.seed)
        keep = set(spec.train_ids(run.run.fold))
        train_set = [s for s in samples if s.id in keep]
        val_set = [s for s in samples if s.id not in keep]
        if not train_set or not val_set:
            raise DataError(f"fold {run.run.fold} of {run.run.folds} is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(run, out / "config.txt")

    def progress(row):
        if not args.quiet:
            print(f"epoch {row.epoch:4d}  train {row.train_loss:.5f}  val {row.val_loss:.5f}  lr {row.lr:.3g}", flush=True)

    res = train(train_set, run.model, run.train, val_set, run.augment, progress)
    save_checkpoint(res.best, out / "best.edun")
    save_checkpoint(res.last, out / "last.edun")
    (out / "train_log.csv").write_text(res.log_csv)
    print(f"best epoch {res.best.epoch}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    mc = ckpt.model_cfg
    samples = _fit_extent(load_dataset(args.data, mc.num_classes), mc.input_size)
    if not samples:
        raise DataError(f"no samples found in {args.data}")
    k = args.folds or 1
    seed = int(ckpt.train_cfg.get("seed", 0)) if args.seed is None else args.seed
    report = None
    if k == 1:
        report = evaluate(ckpt, samples, args.pooled, 0, args.dataset, args.output)
        report.flags.append("k=1: single evaluation over all samples")
    else:
        spec = make_folds([s.id for s in samples], k, seed)
        for f in range(k):
            ids = set(spec.fold_ids(f))
            part = evaluate(ckpt, [s for s in samples if s.id in ids], args.pooled, f, args.dataset, args.output)
            report = part if report is None else report.merge(part)
    text = report.to_csv()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        Path(str(out) + ".config.txt").write_text(
            cfgmod.format_config(cfgmod.RunConfig(model=mc, run=cfgmod.RunOptions(folds=k, dataset=args.dataset, pooled_metrics=args.pooled)))
        )
    else:
        sys.stdout.write(text)
    for flag in report.flags:
        print(f"note: {flag}", file=sys.stderr)
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / np.float32(255.0)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def cmd_infer(args) -> int:
    from .gradcam import grad_cam, save_heatmap_png

    ckpt = load_checkpoint(args.ckpt)
    mc = ckpt.model_cfg
    img = _read_image(args.image)
    h, w = img.shape
    x = resize_bilinear(img, *mc.input_size)
    probs = predict(ckpt, x[None, None])
    mask = np.argmax(probs["fused"][0], axis=0).astype(np.uint8)
    mask = resize_nearest(mask, h, w)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask_png(mask, out)
    if args.heatmap:
        try:
            heat = grad_cam(ckpt.params, mc, x, args.heatmap)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from exc
        heat = resize_bilinear(heat.astype(np.float32), h, w).clip(0.0, 1.0)
        heat_path = Path(args.heatmap_out) if args.heatmap_out else out.with_name(out.stem + "_heatmap.png")
        save_heatmap_png(heat, heat_path)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import REGISTRY, run_check

    names = list(REGISTRY) if not args.ops else [n.strip() for n in args.ops.split(",") if n.strip()]
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise UsageError(f"unknown ops {unknown}; available: {', '.join(REGISTRY)}")
    dtype = np.float64 if args.dtype == "float64" else np.float32
    failed = 0
    print(f"{'case':24s} {'max_rel_err':>12s} {'checked':>8s} {'skipped':>8s}  result")
    for n in names:
        r = run_check(n, args.seed, dtype, inject_fault=args.inject_fault)
        ok = r.passed
        failed += not ok
        print(
            f"{n:24s} {r.max_error:12.3e} {sum(r.checked.values()):8d} {sum(r.skipped.values()):8d}  {'PASS' if ok else 'FAIL'}",
            flush=True,
        )
    print(f"{len(names) - failed}/{len(names)} passed (tol {r.tol:g}, {args.dtype})")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edunet", description="Edge-guided dual-branch OCT fluid segmentation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=3)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model (optionally on one fold)")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--fold", type=int)
    t.add_argument("--folds", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--global-only", action="store_true")
    t.add_argument("--local-only", action="store_true")
    t.add_argument("--no-mcega", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class DSC / sensitivity as CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--folds", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--dataset", default="data")
    e.add_argument("--pooled", action="store_true", help="pool pixel counts instead of averaging per image")
    e.add_argument("--output", choices=("fused", "global", "local"), default="fused")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a mask for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--heatmap", metavar="LAYER")
    i.add_argument("--heatmap-out")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--ops", help="comma-separated case names (default: all)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    g.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
