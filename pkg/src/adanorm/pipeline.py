"""Config-driven runs: dataset assembly, per-fold training, evaluation and reports."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import (
    ColumnMap,
    RawSeries,
    SyntheticSpec,
    WindowedDataset,
    anchored_folds,
    default_theta,
    fold_masks,
    label_windows,
    load_feature_csv,
    make_windows,
    synth_bimodal,
)
from .evaluation import MetricsReport, ShiftSpec, aggregate, evaluate, format_table, robustness_shift_eval
from .models import ModelConfig, build_model, load_checkpoint, load_model_state, model_state, save_checkpoint
from .normalization import make_normalizer
from .training import LrGroups, fit

log = logging.getLogger(__name__)

METRIC_KEYS = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "kappa")


@dataclass
class Split:
    name: str
    train: np.ndarray
    test: np.ndarray
    train_days: tuple[int, ...] = ()
    test_day: int | None = None


def synthetic_spec(cfg: ExperimentConfig) -> SyntheticSpec:
    noise = cfg.get_float("synthetic", "noise")
    return SyntheticSpec(
        modes=[(float(level), noise) for level in cfg.get_list("synthetic", "levels")],
        day_length=cfg.get_int("synthetic", "day_length"),
        train_days=cfg.get_int("synthetic", "train_days"),
        test_days=cfg.get_int("synthetic", "test_days"),
        seed=cfg.get_int("synthetic", "seed"),
        persistence=cfg.get_float("synthetic", "persistence"),
        signal=cfg.get_float("synthetic", "signal"),
        price_unit=cfg.get_float("synthetic", "price_unit"),
        horizon=cfg.get_int("dataset", "horizon"),
        theta=cfg.get_float("dataset", "theta", allow_empty=True),
    )


def _concat_series(a: RawSeries, b: RawSeries) -> RawSeries:
    return RawSeries(
        values=np.concatenate([a.values, b.values]),
        day_ids=np.concatenate([a.day_ids, b.day_ids]),
        feature_names=a.feature_names,
        target=np.concatenate([a.target, b.target]),
        segment_ids=np.concatenate([a.segment_ids, b.segment_ids]),
    )


def load_series(cfg: ExperimentConfig) -> RawSeries:
    if cfg.get("dataset", "source") == "synthetic":
        return _concat_series(*synth_bimodal(synthetic_spec(cfg)))
    schema = ColumnMap(
        features=cfg.get_list("dataset", "features"),
        target=cfg.get("dataset", "target").strip() or None,
        day=cfg.get("dataset", "day").strip() or None,
        segment=cfg.get("dataset", "segment").strip() or None,
        labels=cfg.get_list("dataset", "labels"),
    )
    series, _ = load_feature_csv(cfg.path("dataset", "path"), schema)
    return series


def n_classes_for(cfg: ExperimentConfig) -> int:
    return 3 if cfg.get("dataset", "task") == "midprice" else 2


def build_dataset(cfg: ExperimentConfig) -> WindowedDataset:
    series = load_series(cfg)
    task = cfg.get("dataset", "task")
    horizon = cfg.get_int("dataset", "horizon")
    theta = cfg.get_float("dataset", "theta", allow_empty=True)
    if task == "midprice" and theta is None:
        theta = default_theta(horizon)
    windows = make_windows(series, cfg.get_int("dataset", "window"))
    dataset = label_windows(windows, series, task, horizon, theta, cfg.get_int("dataset", "label_column", allow_empty=True))
    if len(dataset) == 0:
        raise ConfigError("dataset.window: no labelled windows could be formed from the data")
    return dataset


def plan_splits(cfg: ExperimentConfig, dataset: WindowedDataset) -> list[Split]:
    split = cfg.get("dataset", "split")
    if split == "holdout":
        cut = cfg.get_int("synthetic", "train_days")
        train = dataset.day_ids < cut
        return [Split("holdout", train, ~train, tuple(sorted(set(dataset.day_ids[train].tolist()))), None)]
    if split == "fraction":
        order = np.argsort(dataset.end_index, kind="stable")
        cut = int(round(cfg.get_float("dataset", "train_fraction") * len(order)))
        train = np.zeros(len(dataset), dtype=bool)
        train[order[:cut]] = True
        return [Split("fraction", train, ~train)]
    plan = anchored_folds(dataset.day_ids)
    limit = cfg.get_int("dataset", "max_folds", allow_empty=True)
    folds = plan.folds[:limit] if limit else plan.folds
    out = []
    for k, fold in enumerate(folds, start=1):
        train, test = fold_masks(dataset, fold)
        out.append(Split(f"fold{k}", train, test, fold.train_days, fold.test_day))
    return out


def model_config(cfg: ExperimentConfig, features: int) -> ModelConfig:
    return ModelConfig(
        kind=cfg.get("model", "kind"),
        window=cfg.get_int("dataset", "window"),
        features=features,
        n_classes=n_classes_for(cfg),
        hidden=cfg.get_int("model", "hidden"),
        filters=cfg.get_int("model", "filters"),
        kernel=cfg.get_int("model", "kernel"),
        recurrent=cfg.get_int("model", "recurrent"),
        dropout=cfg.get_float("model", "dropout"),
        init=cfg.get("model", "init"),
    )


def lr_groups(cfg: ExperimentConfig) -> LrGroups:
    return LrGroups(*(cfg.get_float("training", k) for k in ("eta", "eta_a", "eta_b", "eta_c")))


@dataclass
class FoldResult:
    split: str
    report: MetricsReport
    log_lines: list[str]
    checkpoint: Path


def _fold_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def train_split(cfg: ExperimentConfig, dataset: WindowedDataset, split: Split, index: int, out_dir: Path) -> FoldResult:
    train, test = dataset.subset(split.train), dataset.subset(split.test)
    if len(train) == 0 or len(test) == 0:
        raise RuntimeError(f"{split.name}: empty train or test set")
    d = dataset.windows.shape[-1]
    rng = _fold_rng(cfg.get_int("training", "seed"), index)
    mcfg = model_config(cfg, d)
    model = build_model(mcfg, rng)
    norm = make_normalizer(cfg.get("normalizer", "kind"), d, cfg.get("normalizer", "mode"), rng)
    lines: list[str] = []
    fit(
        model,
        norm,
        train.windows,
        train.labels,
        lr_groups(cfg),
        epochs=cfg.get_int("training", "epochs"),
        batch_size=cfg.get_int("training", "batch_size"),
        seed=rng,
        log_fn=lambda line: lines.append(f"split={split.name} {line}"),
    )
    report = evaluate(model, norm, test.windows, test.labels, mcfg.n_classes)
    fold_dir = out_dir / split.name
    fold_dir.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v for k, v in model_state(model).items()}
    tensors.update({f"norm/{k}": v for k, v in norm.state_dict().items()})
    tensors["train_means"] = train.windows.reshape(-1, d).mean(axis=0)
    header = {
        "run": cfg.as_dict(),
        "split": split.name,
        "train_days": list(split.train_days),
        "test_day": split.test_day,
        "features": d,
    }
    ckpt = fold_dir / "checkpoint.npz"
    save_checkpoint(ckpt, tensors, header)
    (fold_dir / "train.log").write_text("".join(line + "\n" for line in lines))
    return FoldResult(split.name, report, lines, ckpt)


def _train_job(args):
    cfg, dataset, split, index, out_dir = args
    return train_split(cfg, dataset, split, index, out_dir)


def summary_lines(results: list[FoldResult]) -> list[str]:
    lines = [f"split={r.split} {r.report.kv()}" for r in results]
    agg = aggregate([r.report for r in results])
    lines.append("aggregate " + " ".join(f"{k}_mean={agg[k][0]:.6f} {k}_sd={agg[k][1]:.6f}" for k in METRIC_KEYS))
    return lines


def run_train(cfg: ExperimentConfig, jobs: int = 1) -> list[FoldResult]:
    out_dir = cfg.path("output", "dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(cfg.to_ini())
    dataset = build_dataset(cfg)
    splits = plan_splits(cfg, dataset)
    jobs_args = [(cfg, dataset, s, i, out_dir) for i, s in enumerate(splits, start=1)]
    if jobs > 1 and len(splits) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, jobs_args))
    else:
        results = [_train_job(a) for a in jobs_args]
    with open(out_dir / "train.log", "w") as fh:
        for r in results:
            fh.writelines(line + "\n" for line in r.log_lines)
    (out_dir / "metrics.txt").write_text("\n".join(summary_lines(results)) + "\n")
    agg = aggregate([r.report for r in results])
    (out_dir / "metrics_table.txt").write_text(format_table({r.split: r.report for r in results}, agg) + "\n")
    return results


@dataclass
class EvalResult:
    split: str
    clean: MetricsReport
    shifted: MetricsReport | None = None


def run_evaluate(cfg: ExperimentConfig, checkpoint, shift: float | None = None, exempt=()) -> EvalResult:
    tensors, header = load_checkpoint(checkpoint)
    dataset = build_dataset(cfg)
    d = dataset.windows.shape[-1]
    if header.get("features") != d:
        raise ConfigError(f"dataset.features: checkpoint expects {header.get('features')} features, data has {d}")
    mcfg = model_config(cfg, d)
    model = build_model(mcfg, 0)
    model_tensors = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        load_model_state(model, model_tensors)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"model: checkpoint does not match configured model ({exc})") from None
    norm = make_normalizer(cfg.get("normalizer", "kind"), d, cfg.get("normalizer", "mode"), 0)
    try:
        norm.load_state_dict({k[len("norm/"):]: v for k, v in tensors.items() if k.startswith("norm/")})
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"normalizer: checkpoint does not match configured normalizer ({exc})") from None
    splits = {s.name: s for s in plan_splits(cfg, dataset)}
    if header["split"] not in splits:
        raise ConfigError(f"dataset.split: checkpoint split {header['split']!r} not produced by this config")
    test = dataset.subset(splits[header["split"]].test)
    if shift is None:
        return EvalResult(header["split"], evaluate(model, norm, test.windows, test.labels, mcfg.n_classes))
    spec = ShiftSpec(means=tensors["train_means"], multiplier=shift, exempt=tuple(exempt))
    res = robustness_shift_eval(model, norm, test.windows, test.labels, spec, mcfg.n_classes)
    return EvalResult(header["split"], res.clean, res.shifted)
