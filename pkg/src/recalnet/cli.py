"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort, 3 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from recalnet import checkpoint, config as runconfig
from recalnet.blocks import recal_weight_formula
from recalnet.checkpoint import CheckpointError, DigestMismatch
from recalnet.imageio import ImageParseError
from recalnet.metrics import MetricsReport, format_cell, per_sample_scores
from recalnet.model import PLACEMENTS, STAGES, VARIANTS, ModelConfig, build_model, census, \
    dump_activations, recount_calibration
from recalnet.synthdata import SampleBatch, generate, load_dataset, write_dataset
from recalnet.tensor import ConfigError, Tensor
from recalnet.train import NumericalError, predict, train, write_log

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("recalnet")


class UsageFailure(Exception):
    pass


def _overrides(args) -> dict[str, str]:
    flags = {"seed": "seed", "variant": "model.variant", "lr": "train.lr0", "epochs": "train.epochs",
             "width_scale": "model.width_scale"}
    out = {}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(args) -> runconfig.RunConfig:
    cfg = runconfig.load(args.config, _overrides(args))
    h, w = cfg.data.image_size
    if tuple(cfg.model.input_size) != (h, w):
        cfg.model = ModelConfig(**{**cfg.model.to_dict(), "input_size": (h, w)})
    return cfg


def datasets(cfg: runconfig.RunConfig) -> tuple[SampleBatch, SampleBatch]:
    d = cfg.data
    if d.root:
        return load_dataset(d.root, d.cls, "train"), load_dataset(d.root, d.cls, "val")
    spec = d.phantom()
    return generate(spec, d.train_count, "train"), generate(spec, d.val_count, "val")


def run_training(cfg: runconfig.RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    runconfig.write(cfg, out_dir / "resolved.cfg")
    train_set, val_set = datasets(cfg)
    model = build_model(cfg.model)
    return train(model, train_set, cfg.train, cfg.loss, val_set=val_set, out_dir=out_dir)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve(args)
    out = Path(args.out or f"runs/{cfg.model.variant}-lr{cfg.train.lr0}-seed{cfg.seed}")
    result = run_training(cfg, out)
    print(f"{out}: best val IoU {100 * result.best_iou:.2f} at epoch {result.best_epoch}")
    return EXIT_OK


def _checkpoint_args(items, default_cls):
    pairs = []
    for item in items:
        cls, sep, path = item.partition("=")
        pairs.append((cls, path) if sep else (default_cls, item))
    return pairs


def cmd_eval(args) -> int:
    cfg = resolve(args) if (args.config or args.set) else None
    base = cfg or runconfig.load(None)
    report = MetricsReport()
    for cls, path in _checkpoint_args(args.checkpoint, base.data.cls):
        model = checkpoint.load_model(path, expected=cfg.model if cfg and args.strict else None)
        if args.data:
            batch = load_dataset(args.data, cls, args.split)
        else:
            spec = base.data.phantom()
            spec.cls = cls
            spec.image_size = tuple(model.config.input_size)
            batch = generate(spec, base.data.val_count, args.split)
        if batch.images.shape[1] != model.config.in_channels:
            raise DigestMismatch(f"{path}: model expects {model.config.in_channels} channels, "
                                  f"dataset has {batch.images.shape[1]}")
        ious, dices = per_sample_scores(predict(model, batch.images), batch.masks)
        report.add(cls, batch.ids, ious, dices)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_samples_csv(out / "samples.csv")
    for r in report.rows():
        print(f"{r['class']:<12} IoU {format_cell(r['iou_mean'], r['iou_std']):>16}   "
              f"Dice {format_cell(r['dice_mean'], r['dice_std']):>16}")
    return EXIT_OK


def audit_rows(width_scale: int = 1) -> tuple[list[dict], dict]:
    """Per-placement census for the recal variant plus per-variant totals."""
    rows, totals = [], {}
    models = {v: build_model(ModelConfig(variant=v, width_scale=width_scale), init=False) for v in VARIANTS}
    rc = census(models["recal"])
    sc = census(models["scse"])
    recount = recount_calibration(models["recal"])
    for name, width in zip(PLACEMENTS, models["recal"].config.placement_widths):
        rows.append({"placement": name, "channels": width, "recal": rc.per_placement[name],
                     "formula": recal_weight_formula(width), "recount": recount[name],
                     "scse": sc.per_placement[name]})
    for v, m in models.items():
        c = census(m)
        totals[v] = {"calibration": c.calibration_total, "weights": c.total_weights,
                     "with_bias": c.total_with_bias, "all": c.total_all}
    return rows, totals


def cmd_audit(args) -> int:
    ws = args.width_scale or 1
    rows, totals = audit_rows(ws)
    ok = True
    print(f"{'placement':<10}{'C':>6}{'recal':>10}{'C^2+22C+4':>12}{'recount':>10}{'scse':>10}  check")
    for r in rows:
        good = r["recal"] == r["formula"] == r["recount"]
        ok &= good
        print(f"{r['placement']:<10}{r['channels']:>6}{r['recal']:>10,}{r['formula']:>12,}{r['recount']:>10,}"
              f"{r['scse']:>10,}  {'ok' if good else 'MISMATCH'}")
    recal_total = sum(r["recal"] for r in rows)
    scse_total = sum(r["scse"] for r in rows)
    print(f"{'total':<10}{'':>6}{recal_total:>10,}{sum(r['formula'] for r in rows):>12,}"
          f"{sum(r['recount'] for r in rows):>10,}{scse_total:>10,}")
    print(f"recal - scse delta: {recal_total - scse_total:,}")
    print(f"{'variant':<10}{'calibration':>13}{'weights':>14}{'+bias':>14}{'+norm':>14}")
    for v, t in totals.items():
        print(f"{v:<10}{t['calibration']:>13,}{t['weights']:>14,}{t['with_bias']:>14,}{t['all']:>14,}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "audit.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_gradcheck(args) -> int:
    from recalnet import gradcheck

    try:
        results = gradcheck.run_scope(args.scope)
    except KeyError as exc:
        raise UsageFailure(str(exc.args[0])) from exc
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_dump_activations(args) -> int:
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise UsageFailure(f"unknown stage(s) {unknown}; choose from {', '.join(STAGES)}")
    base = runconfig.load(args.config, _overrides(args))
    out = Path(args.out or "activations")
    for path in args.checkpoint:
        model = checkpoint.load_model(path)
        spec = base.data.phantom()
        spec.image_size = tuple(model.config.input_size)
        if args.data:
            batch = load_dataset(args.data, spec.cls, args.split)
            idx = batch.ids.index(args.sample) if args.sample in batch.ids else int(args.sample)
            images = batch.images[idx:idx + 1]
        else:
            images = generate(spec, 1, args.split, start=int(args.sample)).images
        target = out / Path(path).stem if len(args.checkpoint) > 1 else out
        maps = dump_activations(model, Tensor(images), stages, target)
        for s, m in maps.items():
            print(f"{target / (s + '.png')}: {m.shape[1]}x{m.shape[0]}")
    return EXIT_OK


def cmd_generate_data(args) -> int:
    base = runconfig.load(args.config, _overrides(args))
    classes = args.classes.split(",") if args.classes else [base.data.cls]
    root = Path(args.out or "data")
    for cls in classes:
        spec = base.data.phantom()
        spec.cls = cls
        spec.validate()
        manifest = write_dataset(root, spec, {"train": base.data.train_count, "val": base.data.val_count})
    print(f"wrote {manifest}")
    return EXIT_OK


ABLATION_NAMES = {"baseline": "Baseline", "recal": "ReCal-Net", "scse": "scSE-Net", "se": "SE-Net"}


def ablation_grid(results: dict) -> list[dict]:
    """One row per (lr, variant), one IoU ``mean ± std`` column per class.

    ``results`` maps ``(lr, variant, cls)`` to a TrainResult; each cell is the
    best-by-IoU validation epoch of that run.
    """
    lrs = sorted({k[0] for k in results}, reverse=True)
    variants = list(dict.fromkeys(k[1] for k in results))
    classes = list(dict.fromkeys(k[2] for k in results))
    grid = []
    for lr in lrs:
        for variant in variants:
            row = {"lr": repr(lr), "network": ABLATION_NAMES.get(variant, variant)}
            for cls in classes:
                res = results[(lr, variant, cls)]
                best = res.rows[res.best_epoch]
                row[cls] = format_cell(best["val_iou_mean"], best["val_iou_std"])
            grid.append(row)
    return grid


def cmd_ablate(args) -> int:
    cfg = resolve(args)
    out = Path(args.out or "runs/ablation")
    lrs = [float(v) for v in args.lrs.split(",")]
    variants = args.variants.split(",")
    classes = args.classes.split(",") if args.classes else [cfg.data.cls]
    results: dict = {}
    for cls in classes:
        for variant in variants:
            for lr in lrs:
                run_cfg = runconfig.apply(cfg, {"model.variant": variant, "train.lr0": repr(lr),
                                                "data.cls": cls})
                run_cfg.apply_seed()
                res = run_training(run_cfg, out / f"{cls}-{variant}-lr{lr}")
                results[(lr, variant, cls)] = res
                print(f"{cls} {variant} lr={lr}: best val IoU {100 * res.best_iou:.2f} (epoch {res.best_epoch})")
    grid = ablation_grid(results)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["lr", "network", *classes])
        writer.writeheader()
        writer.writerows(grid)
    for g in grid:
        print(f"{g['lr']:<7} {g['network']:<10} " + "  ".join(f"{g[c]:>16}" for c in classes))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recalnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config override")
        if training:
            p.add_argument("--variant", choices=VARIANTS)
            p.add_argument("--lr", type=float)
            p.add_argument("--epochs", type=int)
            p.add_argument("--width-scale", type=int, dest="width_scale")

    p = sub.add_parser("train", help="train one variant")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints, write a mean ± std report")
    common(p, training=False)
    p.add_argument("--checkpoint", action="append", required=True, help="PATH or CLASS=PATH")
    p.add_argument("--data", help="dataset root (default: generate from config)")
    p.add_argument("--split", default="val")
    p.add_argument("--strict", action="store_true", help="refuse unless the config digest matches")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter census of every variant")
    p.add_argument("--width-scale", type=int, dest="width_scale")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("scope", help="op:<name>|op:all, block:<name>|block:all, or model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-activations", help="write channel-mean maps of network stages")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--stages", default="E5,D1")
    p.add_argument("--sample", default="0", help="sample index or id")
    p.add_argument("--data")
    p.add_argument("--split", default="val")
    common(p, training=False)
    p.set_defaults(func=cmd_dump_activations)

    p = sub.add_parser("generate-data", help="write a phantom dataset to disk")
    common(p, training=False)
    p.add_argument("--classes", help="comma-separated classes (default: data.cls)")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("ablate", help="baseline vs recal over both learning rates")
    common(p)
    p.add_argument("--variants", default="baseline,recal")
    p.add_argument("--lrs", default="0.005,0.002")
    p.add_argument("--classes", help="comma-separated classes (default: data.cls)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DigestMismatch as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, CheckpointError, ImageParseError, UsageFailure, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
