"""INI experiment configuration with presets, env and flag overrides.

Precedence, highest first: ``--set``/flags, ``ADANORM_SEED``, the config
file, the named preset, built-in defaults.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass
from pathlib import Path

from .models import MODEL_KINDS
from .normalization import NORMALIZER_KINDS, DainMode
from .training import PRESETS

SEED_ENV = "ADANORM_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending ``section.key``."""


DEFAULTS: dict[str, dict[str, str]] = {
    "dataset": {
        "source": "csv",
        "path": "",
        "task": "midprice",
        "window": "15",
        "horizon": "10",
        "theta": "",
        "features": "",
        "target": "",
        "day": "",
        "segment": "",
        "labels": "",
        "label_column": "",
        "split": "anchored",
        "max_folds": "",
        "train_fraction": "0.9",
    },
    "synthetic": {
        "levels": "1,100",
        "noise": "1e-4",
        "day_length": "500",
        "train_days": "4",
        "test_days": "2",
        "persistence": "0.9",
        "signal": "1.0",
        "price_unit": "1e-4",
        "seed": "0",
    },
    "model": {
        "kind": "mlp",
        "hidden": "512",
        "filters": "256",
        "kernel": "3",
        "recurrent": "256",
        "dropout": "0.5",
        "init": "uniform",
    },
    "normalizer": {"kind": "dain", "mode": "full"},
    "training": {
        "epochs": "20",
        "batch_size": "128",
        "seed": "0",
        "eta": "1e-4",
        "eta_a": "1e-6",
        "eta_b": "1e-3",
        "eta_c": "10",
    },
    "output": {"dir": "runs/latest"},
}


def _preset(model: str, task: str, window: int, lr_name: str, split: str = "anchored") -> dict[str, dict[str, str]]:
    lr = PRESETS[lr_name]
    return {
        "dataset": {"task": task, "window": str(window), "split": split},
        "model": {"kind": model},
        "training": {"eta": repr(lr.eta), "eta_a": repr(lr.eta_a), "eta_b": repr(lr.eta_b), "eta_c": repr(lr.eta_c)},
    }


PRESET_CONFIGS = {
    "fi2010-mlp": _preset("mlp", "midprice", 15, "fi2010-mlp"),
    "fi2010-cnn": _preset("cnn", "midprice", 15, "fi2010-cnn"),
    "fi2010-rnn": _preset("gru", "midprice", 15, "fi2010-rnn"),
    "power": _preset("mlp", "power", 20, "power", split="fraction"),
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, str]]
    base_dir: Path

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _typed(self, section: str, key: str, cast, allow_empty: bool = False):
        raw = self.get(section, key).strip()
        if raw == "" and allow_empty:
            return None
        try:
            return cast(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: cannot interpret {raw!r} as {cast.__name__}") from None

    def get_int(self, section: str, key: str, allow_empty: bool = False):
        return self._typed(section, key, int, allow_empty)

    def get_float(self, section: str, key: str, allow_empty: bool = False):
        return self._typed(section, key, float, allow_empty)

    def get_list(self, section: str, key: str) -> list[str]:
        raw = self.get(section, key).strip()
        return [p.strip() for p in raw.split(",") if p.strip()] if raw else []

    def path(self, section: str, key: str) -> Path:
        p = Path(self.get(section, key)).expanduser()
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in sorted(self.values):
            parser[section] = dict(sorted(self.values[section].items()))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def as_dict(self) -> dict[str, dict[str, str]]:
        return {s: dict(v) for s, v in self.values.items()}


def _apply(target: dict[str, dict[str, str]], layer: dict[str, dict[str, str]], origin: str) -> None:
    for section, items in layer.items():
        if section not in target:
            raise ConfigError(f"{section}: unknown section (from {origin})")
        for key, value in items.items():
            if key not in target[section]:
                raise ConfigError(f"{section}.{key}: unknown key (from {origin})")
            target[section][key] = str(value)


def parse_overrides(pairs: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        dotted, value = pair.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        out.setdefault(section, {})[key] = value.strip()
    return out


def load_config(path=None, overrides: list[str] | None = None, preset: str | None = None, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    values = {s: dict(v) for s, v in DEFAULTS.items()}
    file_layer: dict[str, dict[str, str]] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config: file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.read(path)
        file_layer = {s: dict(parser[s]) for s in parser.sections()}
        base = path.resolve().parent
        preset = preset or file_layer.get("run", {}).get("preset")
        file_layer.pop("run", None)
    if preset:
        if preset not in PRESET_CONFIGS:
            raise ConfigError(f"run.preset: unknown preset {preset!r}; expected one of {sorted(PRESET_CONFIGS)}")
        _apply(values, PRESET_CONFIGS[preset], f"preset {preset}")
    _apply(values, file_layer, str(path))
    if env.get(SEED_ENV):
        values["training"]["seed"] = env[SEED_ENV]
    _apply(values, parse_overrides(overrides or []), "command line")
    cfg = ExperimentConfig(values, base)
    validate(cfg)
    # pin paths so the echoed config reruns identically from any directory
    for section, key in (("dataset", "path"), ("output", "dir")):
        if cfg.get(section, key).strip():
            values[section][key] = str(cfg.path(section, key))
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    source = cfg.get("dataset", "source")
    if source not in ("csv", "synthetic"):
        raise ConfigError(f"dataset.source: expected csv or synthetic, got {source!r}")
    if source == "csv":
        if not cfg.get("dataset", "path").strip():
            raise ConfigError("dataset.path: required when dataset.source = csv")
        if not cfg.path("dataset", "path").is_file():
            raise ConfigError(f"dataset.path: {cfg.path('dataset', 'path')} does not exist")
        if not cfg.get("dataset", "target").strip() and not cfg.get("dataset", "labels").strip():
            raise ConfigError("dataset.target: a target column (or precomputed labels) is required")
    task = cfg.get("dataset", "task")
    if task not in ("midprice", "power"):
        raise ConfigError(f"dataset.task: expected midprice or power, got {task!r}")
    split = cfg.get("dataset", "split")
    if split not in ("anchored", "fraction", "holdout"):
        raise ConfigError(f"dataset.split: expected anchored, fraction or holdout, got {split!r}")
    if split == "holdout" and source != "synthetic":
        raise ConfigError("dataset.split: holdout is only defined for synthetic data")
    for key in ("window", "horizon"):
        if cfg.get_int("dataset", key) < 1:
            raise ConfigError(f"dataset.{key}: must be >= 1")
    cfg.get_float("dataset", "theta", allow_empty=True)
    cfg.get_int("dataset", "max_folds", allow_empty=True)
    cfg.get_int("dataset", "label_column", allow_empty=True)
    if not 0.0 < cfg.get_float("dataset", "train_fraction") < 1.0:
        raise ConfigError("dataset.train_fraction: must lie in (0, 1)")
    if cfg.get("model", "kind") not in MODEL_KINDS:
        raise ConfigError(f"model.kind: expected one of {sorted(MODEL_KINDS)}")
    for key in ("hidden", "filters", "kernel", "recurrent"):
        if cfg.get_int("model", key) < 1:
            raise ConfigError(f"model.{key}: must be >= 1")
    if not 0.0 <= cfg.get_float("model", "dropout") < 1.0:
        raise ConfigError("model.dropout: must lie in [0, 1)")
    if cfg.get("model", "init") not in ("uniform", "normal"):
        raise ConfigError("model.init: expected uniform or normal")
    kind = cfg.get("normalizer", "kind")
    if kind not in NORMALIZER_KINDS:
        raise ConfigError(f"normalizer.kind: expected one of {NORMALIZER_KINDS}, got {kind!r}")
    try:
        DainMode.parse(cfg.get("normalizer", "mode"))
    except ValueError:
        raise ConfigError(f"normalizer.mode: unknown DAIN mode {cfg.get('normalizer', 'mode')!r}") from None
    if cfg.get_int("training", "epochs") < 0:
        raise ConfigError("training.epochs: must be >= 0")
    if cfg.get_int("training", "batch_size") < 1:
        raise ConfigError("training.batch_size: must be >= 1")
    cfg.get_int("training", "seed")
    for key in ("eta", "eta_a", "eta_b", "eta_c"):
        if cfg.get_float("training", key) < 0:
            raise ConfigError(f"training.{key}: must be non-negative")
    if source == "synthetic":
        levels = cfg.get_list("synthetic", "levels")
        if len(levels) < 2:
            raise ConfigError("synthetic.levels: at least two price levels required")
        for key in ("day_length", "train_days"):
            if cfg.get_int("synthetic", key) < 1:
                raise ConfigError(f"synthetic.{key}: must be >= 1")
        cfg.get_int("synthetic", "test_days")
        for key in ("noise", "persistence", "signal", "price_unit"):
            cfg.get_float("synthetic", key)
