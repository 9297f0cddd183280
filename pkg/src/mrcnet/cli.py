"""Command-line entry point: ``mrcnet {train,eval,infer,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 dataset error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import RunConfig, dump_config, load_config
from .data import FundusSample, load_dataset, preprocess, read_binary, read_rgb, resize_prob
from .errors import ConfigError, DatasetError, NumericError
from .evaluation import Predictor, evaluate_samples, model_predictor, predict_samples, threshold_sweep
from .metrics import (METRIC_NAMES, MetricsReport, confusion, read_metrics_csv, summary_line,
                      threshold_map, write_metrics_csv)
from .training import ABLATION_TABLES, load_generator, run_ablation, select_best_round, train

log = logging.getLogger("mrcnet")

EXIT_CONFIG, EXIT_DATASET, EXIT_NUMERIC = 2, 3, 4
TABLE_COLUMNS = ("acc", "f1", "bacc", "jaccard", "overlap_error", "auc")
SWEEP_THRESHOLDS = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))

OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 0, 255),
}


def _bool_arg(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.output_dir is not None:
        cfg.output.directory = str(args.output_dir)
    return cfg


def _load_split(cfg: RunConfig):
    d = cfg.dataset
    return load_dataset(d.root, d.name, d.split_file)


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.adversarial is not None:
        cfg.train = dataclasses.replace(cfg.train, adversarial=args.adversarial)
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    data = _load_split(cfg)
    size = cfg.generator.input_size
    data = dataclasses.replace(data, train=[preprocess(s, size) for s in data.train], test=[])
    records = train(data, cfg.train, out, cfg.generator, cfg.discriminator)
    best = select_best_round(records)
    print(f"trained {len(records)} rounds; best round {best.round_index} (val F1 {best.val_f1:.4f})")
    print(f"best checkpoint: {best.checkpoint_path}")
    return 0


# ---------------------------------------------------------------- eval

def _resolve_checkpoint(checkpoint, out_dir: Path) -> Path:
    if checkpoint is not None:
        return Path(checkpoint)
    marker = out_dir / "best_round.json"
    if not marker.is_file():
        raise ConfigError(f"no --checkpoint given and no best-round marker at {marker}")
    return Path(json.loads(marker.read_text())["checkpoint_path"])


def run_eval(cfg: RunConfig, predictor: Predictor, out_dir: Path, native_eval: bool = False,
             sweep: bool = False) -> MetricsReport:
    """Evaluate ``predictor`` on the test split; writes metrics.csv (and sweep.csv)."""
    raw_test = _load_split(cfg).test
    if not raw_test:
        raise DatasetError("test split is empty")
    test = [preprocess(s, cfg.generator.input_size) for s in raw_test]
    probs = predict_samples(predictor, test)
    refs = raw_test if native_eval else test
    rows, agg = evaluate_samples(probs, refs, cfg.eval.threshold, cfg.eval.fov_mask, cfg.eval.aggregation)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w") as fh:
        write_metrics_csv([*rows, ("aggregate", agg)], fh)
    if sweep:
        with open(out_dir / "sweep.csv", "w") as fh:
            write_metrics_csv([(f"t={t:.2f}", r) for t, r in
                               threshold_sweep(probs, refs, SWEEP_THRESHOLDS, cfg.eval.fov_mask)], fh)
    return agg


def cmd_eval(args, predictor: Predictor | None = None) -> int:
    cfg = _run_config(args)
    if args.threshold is not None:
        cfg.eval.threshold = args.threshold
    if args.fov_mask:
        cfg.eval.fov_mask = True
    if args.aggregation is not None:
        cfg.eval.aggregation = args.aggregation
    out = Path(cfg.output.directory)
    if predictor is None:
        model = load_generator(_resolve_checkpoint(args.checkpoint, out))
        cfg.generator = model.config
        predictor = model_predictor(model)
    agg = run_eval(cfg, predictor, out, native_eval=args.native_eval or cfg.dataset.native_eval,
                   sweep=args.threshold_sweep)
    print(summary_line(agg))
    return 0


# ---------------------------------------------------------------- infer

def overlay_image(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB rendering of a binary prediction against ground truth: TP white, FP red, FN blue."""
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & gt] = OVERLAY_COLORS["tp"]
    out[pred & ~gt] = OVERLAY_COLORS["fp"]
    out[~pred & gt] = OVERLAY_COLORS["fn"]
    return out


def cmd_infer(args) -> int:
    model = load_generator(args.checkpoint)
    size = model.config.input_size
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    gts = args.gt or []
    if gts and len(gts) != len(args.images):
        raise ConfigError("--gt must be given once per input image")
    for i, path in enumerate(args.images):
        path = Path(path)
        raw = read_rgb(path)
        gt = read_binary(gts[i]) if gts else np.zeros(raw.shape[:2], bool)
        sample = preprocess(FundusSample(id=path.stem, image=raw, gt=gt), size)
        prob = resize_prob(model_predictor(model)(sample), raw.shape[:2])
        mask = threshold_map(prob, args.threshold)
        Image.fromarray(np.round(prob * 255).astype(np.uint8), mode="L").save(out / f"{path.stem}_prob.png")
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / f"{path.stem}_mask.png")
        if gts:
            Image.fromarray(overlay_image(mask, gt), mode="RGB").save(out / f"{path.stem}_overlay.png")
            c = confusion(mask, gt)
            print(f"{path.stem}: tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")
    return 0


# ---------------------------------------------------------------- ablate / report

def format_table(rows: Sequence[tuple[str, MetricsReport]], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    header = ["run", *columns]
    body = [[name, *(f"{getattr(r, c):.4f}" for c in columns)] for name, r in rows]
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) if j == 0 else str(cell).rjust(w)
                       for j, (cell, w) in enumerate(zip(row, widths))) for row in [header, *body]]
    return "\n".join(lines) + "\n"


def _write_table(rows, out_dir: Path, stem: str, columns) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.csv", "w") as fh:
        write_metrics_csv(rows, fh)
    text = format_table(rows, columns)
    (out_dir / f"{stem}.txt").write_text(text)
    return text


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    data = _load_split(cfg)
    size = cfg.generator.input_size
    data = dataclasses.replace(data, train=[preprocess(s, size) for s in data.train],
                               test=[preprocess(s, size) for s in data.test])
    out = Path(cfg.output.directory)
    results = run_ablation(data, cfg.train, out, cfg.generator, cfg.discriminator, tables,
                           cfg.eval.threshold, cfg.eval.fov_mask, cfg.eval.aggregation)
    print(_write_table(list(results.items()), out, "ablation", TABLE_COLUMNS), end="")
    return 0


def merge_runs(run_dirs: Sequence[Path]) -> list[tuple[str, MetricsReport]]:
    """Aggregate rows of several run directories, labelled by directory name (deduplicated)."""
    rows, labels = [], set()
    for run_dir in map(Path, run_dirs):
        csv_path = run_dir / "metrics.csv"
        if not csv_path.is_file():
            raise DatasetError(f"no metrics.csv in {run_dir}")
        with open(csv_path) as fh:
            entries = dict(read_metrics_csv(fh))
        if "aggregate" not in entries:
            raise ConfigError(f"{csv_path} has no aggregate row")
        name = run_dir.resolve().name
        label, k = name, 2
        while label in labels:
            label, k = f"{name}_{k}", k + 1
        labels.add(label)
        rows.append((label, entries["aggregate"]))
    return rows


def cmd_report(args) -> int:
    rows = merge_runs(args.runs)
    columns = METRIC_NAMES if args.columns == "all" else tuple(c.strip() for c in args.columns.split(","))
    bad = set(columns) - set(METRIC_NAMES)
    if bad:
        raise ConfigError(f"unknown report columns {sorted(bad)}")
    out = Path(args.output_dir or ".")
    print(_write_table(rows, out, "report", columns), end="")
    return 0


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI run configuration")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--output-dir", type=Path, default=None, help="override [output] directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mrcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train and checkpoint every round")
    p.add_argument("--adversarial", type=_bool_arg, default=None, metavar="{true,false}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="defaults to the best round recorded in the output directory")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--threshold-sweep", action="store_true", help="also write sweep.csv")
    p.add_argument("--native-eval", action="store_true", help="score at the native image resolution")
    p.add_argument("--fov-mask", action="store_true", help="restrict metrics to the field of view")
    p.add_argument("--aggregation", choices=("per_image_mean", "pooled"), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="write probability maps, masks and overlays")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--gt", nargs="*", type=Path, default=None, help="ground truths, one per image")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", parents=[common], help="train and score the ablation variants")
    p.add_argument("--tables", default=",".join(ABLATION_TABLES), help="comma list from {2,3,4}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="merge run metrics into one table")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--columns", default=",".join(TABLE_COLUMNS), help="comma list or 'all'")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
