"""Command-line surface: synth, validate, train, ttt-eval, sweep, extract.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

from . import data as data_mod
from .config import ExperimentConfig, load_config
from .data import ShiftConfig, event_kfold_split, load_dataset, synthesize_dataset, temporal_split, write_dataset
from .engine import TrainConfig, run_pipeline, train as train_phase
from .errors import ConfigError, DataParseError, DataValidationError, TrainingDiverged
from .model import DetectionModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_ABLATION_FLAGS = {"ttt": "no_ttt", "mlm": "no_mlm", "trans": "no_trans", "v": "no_v", "a": "no_a"}


def _load_records(cfg: ExperimentConfig):
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return synthesize_dataset(cfg.synthetic)


def _build_split(cfg: ExperimentConfig, records):
    if cfg.split.mode == "temporal":
        return temporal_split(records, cfg.split.train_fraction)
    return event_kfold_split(records, k=cfg.split.folds, seed=cfg.split.seed)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    for name in getattr(args, "ablate", None) or []:
        if name not in _ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(_ABLATION_FLAGS)}")
        train = replace(train, **{_ABLATION_FLAGS[name]: True})
    split = cfg.split
    if getattr(args, "folds", None) is not None:
        split = replace(split, folds=args.folds)
    out_dir = args.out if getattr(args, "out", None) else cfg.output_dir
    return replace(cfg, train=train, split=split, output_dir=out_dir)


def _line_plot(path: str, xs, ys, xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def run_experiment(config_path: str, args=None) -> dict:
    """Execute the configured pipeline and write report.json (plus optional plots)."""
    cfg = load_config(config_path)
    if args is not None:
        cfg = _apply_overrides(cfg, args)
    header, records = _load_records(cfg)
    split = _build_split(cfg, records)
    jobs = getattr(args, "jobs", 1) if args is not None else 1
    result = run_pipeline(header, records, split, cfg.train, cfg.model, jobs=jobs or 1)
    os.makedirs(cfg.output_dir, exist_ok=True)
    report = result.to_dict()
    with open(os.path.join(cfg.output_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2)
    if cfg.plots:
        for fold in result.folds:
            stats = fold.train_report.epochs
            if stats:
                _line_plot(
                    os.path.join(cfg.output_dir, f"train_loss_fold{fold.fold}.svg"),
                    [e.epoch for e in stats],
                    [e.total_loss for e in stats],
                    "epoch",
                    "training loss",
                    f"fold {fold.fold}",
                )
    return report


_SWEEP_PARAMS = {"alpha": "aux_weight", "mask_ratio": "mask_ratio"}


def sweep(config_path: str, param: str, values: list[float], seeds: list[int] | None = None, args=None) -> list[dict]:
    """Run the experiment once per value (per seed), holding everything else fixed.

    Emits sweep_<param>.csv and sweep_<param>.svg under the output directory,
    together with a small JSON echo of the values held fixed.
    """
    if param not in _SWEEP_PARAMS:
        raise ConfigError(f"sweep param must be one of {sorted(_SWEEP_PARAMS)}")
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    cfg = load_config(config_path)
    if args is not None:
        cfg = _apply_overrides(cfg, args)
    seeds = seeds or [cfg.train.seed]
    header, records = _load_records(cfg)
    split = _build_split(cfg, records)
    field = _SWEEP_PARAMS[param]

    rows = []
    cumulative = 0.0
    for value in values:
        t0 = time.perf_counter()
        accs, losses = [], []
        for seed in seeds:
            train_cfg = replace(cfg.train, seed=seed, **{field: value})
            result = run_pipeline(header, records, split, train_cfg, cfg.model)
            accs.append(result.mean["accuracy"])
            losses.append(result.folds[-1].train_report.epochs[-1].total_loss)
        wall = time.perf_counter() - t0
        cumulative += wall
        n = len(seeds)
        mean_acc = sum(accs) / n
        mean_loss = sum(losses) / n
        rows.append(
            {
                "param": param,
                "value": value,
                "seeds": ";".join(str(s) for s in seeds),
                "accuracies": ";".join(f"{a:.6f}" for a in accs),
                "final_train_losses": ";".join(f"{x:.6f}" for x in losses),
                "mean_accuracy": mean_acc,
                "std_accuracy": (sum((a - mean_acc) ** 2 for a in accs) / n) ** 0.5,
                "mean_final_train_loss": mean_loss,
                "std_final_train_loss": (sum((x - mean_loss) ** 2 for x in losses) / n) ** 0.5,
                "wall_time_s": wall,
                "cumulative_wall_time_s": cumulative,
            }
        )

    os.makedirs(cfg.output_dir, exist_ok=True)
    csv_path = os.path.join(cfg.output_dir, f"sweep_{param}.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    fixed = cfg.train.to_dict()
    fixed.pop(field)
    with open(os.path.join(cfg.output_dir, f"sweep_{param}_fixed.json"), "w") as f:
        json.dump({"swept": param, "values": values, "fixed": fixed}, f, indent=2)
    _line_plot(
        os.path.join(cfg.output_dir, f"sweep_{param}.svg"),
        [r["value"] for r in rows],
        [r["mean_accuracy"] for r in rows],
        param,
        "mean accuracy",
        f"{param} sweep",
    )
    return rows


def _cmd_synth(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        shift = cfg.synthetic or ShiftConfig(seed=cfg.train.seed)
    else:
        shift = ShiftConfig()
    if args.seed is not None:
        shift = replace(shift, seed=args.seed)
    header, records = synthesize_dataset(shift)
    write_dataset(args.out, header, records, float_mode=args.float_mode)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    header, records = load_dataset(args.data)
    violations = []
    for r in records:
        violations.extend(data_mod.validate_record(header, r))
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return EXIT_DATA
    print(f"{args.data}: {len(records)} records, no violations")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    header, records = _load_records(cfg)
    split = _build_split(cfg, records)
    train_records, _ = split.fold_records(records, args.fold)
    model = DetectionModel(header, cfg.model, seed=[cfg.train.seed, args.fold])
    report = train_phase(model, train_records, cfg.train)
    os.makedirs(cfg.output_dir, exist_ok=True)
    ckpt = os.path.join(cfg.output_dir, "model.ckpt")
    model.save(ckpt)
    with open(os.path.join(cfg.output_dir, "train_report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    print(f"trained fold {args.fold}: final loss {report.epochs[-1].total_loss:.4f}, saved {ckpt}")
    return EXIT_OK


def _cmd_ttt_eval(args) -> int:
    report = run_experiment(args.config, args)
    print(json.dumps(report["mean_metrics"], indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v != ""]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = sweep(args.config, args.param, values, seeds, args)
    for r in rows:
        print(f"{args.param}={r['value']}: accuracy {r['mean_accuracy']:.4f}")
    return EXIT_OK


def _cmd_extract(args) -> int:
    try:
        from fakevid_extract.pipeline import extract_all
    except ImportError:
        print(
            "the feature-extraction package (fakevid-extract) is not installed",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    report = extract_all(args.manifest, args.out)
    print(f"extracted {report['written']} records to {args.out} ({len(report['errors'])} errors)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fakevid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--float-mode", choices=("jsonl", "f32bin"), default="jsonl")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="check a dataset directory against the format invariants")
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("train", help="joint training only; saves a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=0)
    _common_run_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ttt-eval", help="full pipeline: train, adapt at test time, evaluate")
    p.add_argument("--config", required=True)
    _common_run_flags(p)
    p.set_defaults(func=_cmd_ttt_eval)

    p = sub.add_parser("sweep", help="hyper-parameter sweep with CSV and plot output")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=sorted(_SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    _common_run_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("extract", help="turn raw media into a dataset directory (needs fakevid-extract)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract)
    return parser


def _common_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ablate", action="append", choices=sorted(_ABLATION_FLAGS), default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataParseError, DataValidationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
