# -*- coding: utf-8 -*-
import argparse
import dataclasses
import logging
import os
import sys
import traceback

import numpy as np

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

# Add the library path to Python's search paths to ensure modules can be imported
script_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.append(script_dir)

# Status goes to stderr; stdout carries machine-readable results only
console = Console(stderr=True)

try:
    from Heightfusion_lib.banner import show_banner
    from Heightfusion_lib.config import resolve_config
    from Heightfusion_lib.errors import ConfigError, HeightfusionError, MetricError
    from Heightfusion_lib.experiments import best_row, run_variant_sweep, write_sweep_csv
    from Heightfusion_lib.metrics import (EvalReport, ap50, evaluate_heights, read_coco_json, read_report,
                                          write_coco_json, write_report)
    from Heightfusion_lib.model_zoo import FusionMode, FusionVariant, join_late, split_late
    from Heightfusion_lib.raster_io import clamp_ndsm, list_tile_names, read_tiff, write_tiff
    from Heightfusion_lib.synth_data import SceneSpec, generate_dataset, instances_from_heights, load_dataset
    from Heightfusion_lib.training import load_checkpoint, predict, prepare_inputs, save_checkpoint, train, write_loss_csv
except ImportError as e:
    console.print(f"❌ [bold red]Error:[/bold red] 'Heightfusion_lib' library was not found. ({e})")
    sys.exit(4)

logger = logging.getLogger("heightfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


# ==============================================================================
# == HELPERS
# ==============================================================================

def _require_dir(path, what):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"{what} directory '{path}' does not exist")


def _require_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} file '{path}' does not exist")


def _require_parent(path, what):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"directory for {what} '{path}' does not exist")


def _json_path(report_path):
    return os.path.splitext(report_path)[0] + ".json"


def _late_paths(out):
    stem, ext = os.path.splitext(out)
    return f"{stem}.rgb{ext}", f"{stem}.sar{ext}"


def _height_dir(path):
    """A split directory (with dsm/) or a flat directory of height tiles."""
    nested = os.path.join(path, 'dsm')
    return nested if os.path.isdir(nested) else path


def _print_report(title, report: EvalReport):
    table = Table(title=title, show_header=False)
    for key in ("delta1", "rmse", "mae", "r2", "ap50", "combined_score"):
        value = getattr(report, key)
        if value is not None:
            table.add_row(key, f"{value:.6g}")
    console.print(table)


# ==============================================================================
# == SUBCOMMANDS
# ==============================================================================

def cmd_synth(args):
    template = SceneSpec(size=args.size, n_buildings=args.buildings)
    template.validate()
    os.makedirs(args.out, exist_ok=True)
    samples = generate_dataset(template, args.scenes, args.seed, out_dir=args.out)
    console.print(f"✅ [bold green]Wrote {len(samples)} scenes[/bold green] to {escape(args.out)}")
    print(len(samples))


def _train_overrides(args):
    return {
        'variant': args.variant, 'skip_connections': args.skip, 'epochs': args.epochs,
        'batch_size': args.batch_size, 'optimizer': args.optimizer, 'lr': args.lr,
        'seed': args.seed, 'arch': args.arch, 'max_steps': args.max_steps,
    }


def cmd_train(args):
    _require_dir(args.data, "data")
    if args.config:
        _require_file(args.config, "config")
    _require_parent(args.out, "checkpoint")
    config = resolve_config(args.config, _train_overrides(args))
    dataset = load_dataset(args.data)

    console.print(f"[*] [bold bright_blue]Training[/bold bright_blue] {config.fusion_variant} "
                  f"on {len(dataset)} scenes ({config.optimizer}, lr={config.lr})")
    state = train(config, dataset)

    if state.model.variant.mode is FusionMode.LATE:
        written = []
        for branch, path in zip(split_late(state.model), _late_paths(args.out)):
            save_checkpoint(branch, path)
            written.append(path)
    else:
        save_checkpoint(state, args.out)
        written = [args.out]
    loss_path = os.path.splitext(args.out)[0] + ".loss.csv"
    write_loss_csv(state.loss_history, loss_path)
    for path in written:
        console.print(f"✅ [bold green]Checkpoint[/bold green] {escape(path)}")
    console.print(f"✅ [bold green]Loss curve[/bold green] {escape(loss_path)} "
                  f"({state.step} steps, final loss {state.loss_history[-1][1]:.4f})")


def _load_models(paths):
    if len(paths) > 2:
        raise ConfigError(f"predict takes one checkpoint, or two for late fusion; got {len(paths)}")
    models = [load_checkpoint(p) for p in paths]
    if len(models) == 1:
        return models[0]
    by_mode = {m.variant.mode: m for m in models}
    if set(by_mode) != {FusionMode.RGB_ONLY, FusionMode.SAR_ONLY}:
        raise ConfigError("late-fusion prediction needs one rgb_only and one sar_only checkpoint, got "
                          + " and ".join(str(m.variant) for m in models))
    return join_late(by_mode[FusionMode.RGB_ONLY], by_mode[FusionMode.SAR_ONLY])


def cmd_predict(args):
    for path in args.ckpt:
        _require_file(path, "checkpoint")
    _require_dir(args.data, "data")
    if args.instances:
        _require_parent(args.instances, "instances")
    model = _load_models(args.ckpt)
    dataset = load_dataset(args.data)
    for sample in dataset:
        prepare_inputs(sample, model.variant)
    os.makedirs(args.out, exist_ok=True)

    console.print(f"[*] [bold bright_blue]Predicting[/bold bright_blue] {len(dataset)} tiles with {model.variant}")
    instances = []
    for sample in dataset:
        tile = predict(model, sample)
        write_tiff(tile, os.path.join(args.out, f"{sample.name}.tif"))
        if args.instances:
            instances.extend(instances_from_heights(sample.name, tile.planes[0], args.min_height, scored=True))
    console.print(f"✅ [bold green]Wrote {len(dataset)} height tiles[/bold green] to {escape(args.out)}")
    if args.instances:
        write_coco_json(instances, args.instances)
        console.print(f"✅ [bold green]Wrote {len(instances)} building instances[/bold green] to {escape(args.instances)}")


def _paired_names(pred_dir, gt_dir):
    pred_names, gt_names = list_tile_names(pred_dir), list_tile_names(gt_dir)
    if pred_names != gt_names:
        only_pred = sorted(set(pred_names) - set(gt_names))
        only_gt = sorted(set(gt_names) - set(pred_names))
        raise MetricError(f"tile names differ: only in predictions {only_pred}, only in reference {only_gt}")
    if not pred_names:
        raise MetricError(f"no .tif tiles in '{pred_dir}'")
    return pred_names


def cmd_eval_height(args):
    _require_dir(args.pred, "prediction")
    _require_dir(args.gt, "reference")
    _require_parent(args.report, "report")
    gt_dir = _height_dir(args.gt)
    preds, gts = [], []
    for name in _paired_names(args.pred, gt_dir):
        pred = read_tiff(os.path.join(args.pred, f"{name}.tif")).planes[0]
        gt = clamp_ndsm(read_tiff(os.path.join(gt_dir, f"{name}.tif"))).planes[0]
        if pred.shape != gt.shape:
            raise MetricError(f"tile '{name}': prediction {pred.shape} vs reference {gt.shape}")
        preds.append(pred.ravel())
        gts.append(gt.ravel())

    metrics = evaluate_heights(np.concatenate(preds), np.concatenate(gts))
    report = EvalReport.from_height(metrics)
    write_report(report, args.report, _json_path(args.report) if args.json else None)
    _print_report("Height metrics", report)


def _with_default_scores(records):
    missing = sum(r.score is None for r in records)
    if missing:
        logger.warning("%d prediction(s) carry no score; scoring them as 1.0", missing)
    return [r if r.score is not None else dataclasses.replace(r, score=1.0) for r in records]


def cmd_eval_masks(args):
    _require_file(args.pred, "prediction")
    _require_file(args.gt, "reference")
    _require_parent(args.report, "report")
    predictions = _with_default_scores(read_coco_json(args.pred))
    result = ap50(predictions, read_coco_json(args.gt))
    report = EvalReport(ap50=result.ap50, details={"n_predictions": len(predictions)})
    write_report(report, args.report, _json_path(args.report) if args.json else None)
    _print_report("Mask metrics", report)


def cmd_score(args):
    _require_file(args.height_report, "height report")
    _require_file(args.mask_report, "mask report")
    if args.out:
        _require_parent(args.out, "report")
    merged = read_report(args.height_report).merged(read_report(args.mask_report))
    if merged.combined_score is None:
        raise MetricError("the reports must provide both delta1 and ap50")
    if args.out:
        write_report(merged, args.out, _json_path(args.out) if args.json else None)
    print(f"{merged.combined_score:.10g}")


def cmd_compare(args):
    _require_dir(args.data, "data")
    if args.config:
        _require_file(args.config, "config")
    if args.csv:
        _require_parent(args.csv, "CSV")
    overrides = {'epochs': args.epochs, 'max_steps': args.max_steps, 'seed': args.seed, 'arch': args.arch}
    config = resolve_config(args.config, overrides)
    for label in args.variants:
        FusionVariant.parse(label.partition('+')[0])
    rows = run_variant_sweep(config, load_dataset(args.data), args.variants, args.optimizers)

    table = Table(title="Height estimation by fusion variant")
    for column in ("Variant", "Optimizer", "Steps", "delta1", "RMSE", "MAE", "R2"):
        table.add_column(column, justify="left" if column in ("Variant", "Optimizer") else "right")
    for r in rows:
        table.add_row(r.variant, r.optimizer, str(r.steps), f"{r.delta1:.4f}", f"{r.rmse:.3f}",
                      f"{r.mae:.3f}", "nan" if r.r2 is None else f"{r.r2:.3f}")
    console.print(table)
    best = best_row(rows)
    console.print(f"✅ [bold green]Best:[/bold green] {best.variant} ({best.optimizer}), delta1 {best.delta1:.4f}")
    if args.csv:
        write_sweep_csv(rows, args.csv)


# ==============================================================================
# == PARSER
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='store_true',
                        help='Enable verbose mode to display detailed information during execution.')
    common.add_argument('--no-banner', action='store_true', help='Do not show the startup banner.')

    parser = argparse.ArgumentParser(
        description="Height estimation from RGB and SAR tiles with early, intermediate and late fusion.",
        formatter_class=argparse.RawTextHelpFormatter,
        epilog="""
Usage examples:
-----------------
1. Generate a synthetic split and train the early-fusion model with skip connections:
        python heightfusion_cli.py synth --out data/train --scenes 8 --seed 7
        python heightfusion_cli.py train --data data/train --variant early --skip --out runs/early.ckpt

2. Predict, evaluate and combine the two contest metrics:
        python heightfusion_cli.py predict --ckpt runs/early.ckpt --data data/train --out runs/pred
        python heightfusion_cli.py eval-height --pred runs/pred --gt data/train --report runs/height.txt
        python heightfusion_cli.py eval-masks --pred data/train/instances.json --gt data/train/instances.json --report runs/masks.txt
        python heightfusion_cli.py score --height-report runs/height.txt --mask-report runs/masks.txt

Available variants: rgb_only, sar_only, early, intermediate, late
"""
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='Generate a synthetic RGB/SAR/nDSM split.')
    p.add_argument('--out', required=True, help='Split directory to create.')
    p.add_argument('--scenes', type=int, default=8)
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--buildings', type=int, default=2, help='Buildings per scene.')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('train', parents=[common], help='Train a height model; writes checkpoint(s) and a loss CSV.')
    p.add_argument('--data', required=True, help='Split directory (rgb/, sar/, dsm/).')
    p.add_argument('--config', help='key=value file with TrainConfig fields.')
    p.add_argument('--out', required=True, help='Checkpoint path (late fusion writes <stem>.rgb / <stem>.sar).')
    p.add_argument('--variant', help='rgb_only, sar_only, early, intermediate or late.')
    p.add_argument('--skip', action='store_true', default=None, help='Decoder skip connections (the default).')
    p.add_argument('--no-skip', dest='skip', action='store_false', default=None, help='Train without skip connections.')
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--optimizer', help='sgd or adam.')
    p.add_argument('--lr', type=float)
    p.add_argument('--seed', type=int)
    p.add_argument('--arch', help='Architecture preset from data/arch_presets.json.')
    p.add_argument('--max-steps', type=int, help='Stop after this many optimizer steps.')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('predict', parents=[common], help='Write one height TIFF per optical tile.')
    p.add_argument('--ckpt', required=True, action='append', help='Checkpoint; give it twice for late fusion.')
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--instances', help='Also write building instances found in the predicted heights (COCO JSON).')
    p.add_argument('--min-height', type=float, default=2.0,
                   help='Height in meters above which a predicted pixel belongs to a building (default: 2.0).')
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('eval-height', parents=[common], help='delta1, RMSE, MAE and R2 of predicted heights.')
    p.add_argument('--pred', required=True)
    p.add_argument('--gt', required=True, help='Split directory or a directory of reference height tiles.')
    p.add_argument('--report', required=True)
    p.add_argument('--json', action='store_true', help='Also write a JSON duplicate of the report.')
    p.set_defaults(handler=cmd_eval_height)

    p = sub.add_parser('eval-masks', parents=[common], help='AP at IoU 0.5 of instance masks.')
    p.add_argument('--pred', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--report', required=True)
    p.add_argument('--json', action='store_true', help='Also write a JSON duplicate of the report.')
    p.set_defaults(handler=cmd_eval_masks)

    p = sub.add_parser('score', parents=[common], help='Combined score (AP50 + delta1) / 2.')
    p.add_argument('--height-report', required=True)
    p.add_argument('--mask-report', required=True)
    p.add_argument('--out', help='Write a report with all six keys.')
    p.add_argument('--json', action='store_true', help='Also write a JSON duplicate of --out.')
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser('compare', parents=[common], help='Train and tabulate several fusion variants.')
    p.add_argument('--data', required=True)
    p.add_argument('--config')
    p.add_argument('--variants', nargs='+', default=['rgb_only', 'sar_only', 'early', 'intermediate', 'late'],
                   help="Variants to train; append '+skip' for skip connections.")
    p.add_argument('--optimizers', nargs='+', help='sgd and/or adam (default: the config optimizer).')
    p.add_argument('--epochs', type=int)
    p.add_argument('--max-steps', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--arch')
    p.add_argument('--csv', help='Write the table as CSV.')
    p.set_defaults(handler=cmd_compare)
    return parser


def _setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(message)s",
                        handlers=[RichHandler(console=console, show_path=False)], force=True)


def _fail(error, code):
    console.print(f"❌ [bold red]Error:[/bold red] {escape(str(error))}", soft_wrap=True)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if not args.no_banner:
        show_banner(console)
    try:
        args.handler(args)
    except ConfigError as e:
        return _fail(e, EXIT_USAGE)
    except (HeightfusionError, OSError) as e:
        return _fail(e, EXIT_DATA)
    except Exception as e:
        logger.debug(traceback.format_exc())
        return _fail(f"internal error: {e!r}", EXIT_INTERNAL)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
