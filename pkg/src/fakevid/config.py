"""Experiment configuration: JSON file with fixed sections, unknown keys rejected.

Sections: dataset, model, train, ttt, split, ablation, output, plus a top
level seed. Every training hyper-parameter and ablation switch is
addressable here; command-line flags override after loading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import ShiftConfig
from .engine import TrainConfig
from .errors import ConfigError
from .model import ModelConfig

_SECTION_KEYS = {
    "dataset": {"path", "synthetic"},
    "model": {"d_model", "n_heads", "d_ff", "depth"},
    "train": {"aux_weight", "mask_ratio", "batch_size", "epochs", "lr"},
    "ttt": {"lr", "epochs", "mode", "reset_between_batches"},
    "split": {"mode", "folds", "train_fraction", "seed"},
    "ablation": {"no_ttt", "no_mlm", "no_trans", "no_v", "no_a"},
    "output": {"dir", "plots"},
}
_SYNTH_KEYS = {
    "n_events",
    "samples_per_event",
    "class_balance",
    "signal_strength",
    "mu_shift",
    "sigma_shift",
    "shift_fraction",
    "shift_class_alignment",
    "seed",
}
_TOP_KEYS = set(_SECTION_KEYS) | {"seed"}


@dataclass
class SplitSettings:
    mode: str = "temporal"  # or "event-5fold"
    folds: int = 5
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset_path: str | None = None
    synthetic: ShiftConfig | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSettings = field(default_factory=SplitSettings)
    output_dir: str = "out"
    plots: bool = True


def _reject_unknown(section: str, obj: dict, allowed: set) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown("config", raw, _TOP_KEYS)
    for section in _SECTION_KEYS:
        obj = raw.get(section, {})
        if not isinstance(obj, dict):
            raise ConfigError(f"section '{section}' must be an object")
        _reject_unknown(section, obj, _SECTION_KEYS[section])

    seed = int(raw.get("seed", 0))
    dataset = raw.get("dataset", {})
    synthetic = None
    if "synthetic" in dataset:
        synth_obj = dataset["synthetic"] or {}
        _reject_unknown("dataset.synthetic", synth_obj, _SYNTH_KEYS)
        synthetic = ShiftConfig(**{**{"seed": seed}, **synth_obj})
    dataset_path = dataset.get("path")
    if dataset_path is None and synthetic is None:
        synthetic = ShiftConfig(seed=seed)

    model_obj = raw.get("model", {})
    try:
        model = ModelConfig(**model_obj)
    except TypeError as e:
        raise ConfigError(f"model section: {e}") from e

    train_obj = raw.get("train", {})
    ttt_obj = raw.get("ttt", {})
    ablation_obj = raw.get("ablation", {})
    train = TrainConfig(
        aux_weight=float(train_obj.get("aux_weight", 1.0)),
        mask_ratio=float(train_obj.get("mask_ratio", 0.15)),
        batch_size=int(train_obj.get("batch_size", 16)),
        train_epochs=int(train_obj.get("epochs", 5)),
        train_lr=float(train_obj.get("lr", 1e-3)),
        ttt_lr=float(ttt_obj["lr"]) if "lr" in ttt_obj else None,
        ttt_epochs=int(ttt_obj.get("epochs", 2)),
        ttt_mode=str(ttt_obj.get("mode", "offline")),
        reset_between_batches=bool(ttt_obj.get("reset_between_batches", True)),
        seed=seed,
        no_ttt=bool(ablation_obj.get("no_ttt", False)),
        no_mlm=bool(ablation_obj.get("no_mlm", False)),
        no_trans=bool(ablation_obj.get("no_trans", False)),
        no_v=bool(ablation_obj.get("no_v", False)),
        no_a=bool(ablation_obj.get("no_a", False)),
    )

    split_obj = raw.get("split", {})
    split = SplitSettings(
        mode=str(split_obj.get("mode", "temporal")),
        folds=int(split_obj.get("folds", 5)),
        train_fraction=float(split_obj.get("train_fraction", 0.8)),
        seed=int(split_obj.get("seed", seed)),
    )
    if split.mode not in ("temporal", "event-5fold", "event-kfold"):
        raise ConfigError(f"unknown split mode {split.mode!r}")

    output_obj = raw.get("output", {})
    return ExperimentConfig(
        dataset_path=dataset_path,
        synthetic=synthetic,
        model=model,
        train=train,
        split=split,
        output_dir=str(output_obj.get("dir", "out")),
        plots=bool(output_obj.get("plots", True)),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from e
    return parse_config(raw)
