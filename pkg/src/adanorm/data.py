"""Ingestion, windowing, labelling, anchored splits and synthetic series."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

UP, STATIONARY, DOWN = 0, 1, 2
DECREASE, INCREASE = 0, 1
MIDPRICE_CLASSES = ("up", "stationary", "down")
POWER_CLASSES = ("decrease", "increase")
POWER_PAST, POWER_FUTURE = 20, 10  # rows (minutes) either side of the window end

MISSING = {"", "?", "nan", "NaN", "NA"}

CACHE_FORMAT = "adanorm-windows"
CACHE_VERSION = 1


def default_theta(horizon: int) -> float:
    """Stationarity band: 0.01% at horizon 10, 0.02% at horizon 20."""
    return 2e-4 if horizon >= 20 else 1e-4


class IngestError(ValueError):
    pass


# -- types ----------------------------------------------------------------


@dataclass
class ColumnMap:
    """Which columns of a delimited file hold what.

    Columns are given by header name or zero-based index.  ``target`` is the
    series labels are computed from (mid price, or active power).
    """

    features: list = field(default_factory=list)
    target: str | int | None = None
    day: str | int | None = None
    labels: list = field(default_factory=list)
    segment: str | int | None = None


@dataclass
class RawSeries:
    values: np.ndarray
    day_ids: np.ndarray
    feature_names: list[str]
    target: np.ndarray | None = None
    labels: np.ndarray | None = None
    segment_ids: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("series values must be a (T, d) matrix")
        self.day_ids = np.asarray(self.day_ids, dtype=np.int64)
        if self.day_ids.shape != (len(self.values),):
            raise ValueError("one day id per row required")
        if self.segment_ids is None:
            self.segment_ids = self.day_ids.copy()

    @property
    def length(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_dropped: int = 0
    values_filled: int = 0


@dataclass
class WindowedDataset:
    windows: np.ndarray
    end_index: np.ndarray
    day_ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.windows):
            raise ValueError("label count must equal window count")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def M(self) -> int:
        return len(self.windows)

    def subset(self, mask) -> "WindowedDataset":
        mask = np.asarray(mask)
        return WindowedDataset(
            windows=self.windows[mask],
            end_index=self.end_index[mask],
            day_ids=self.day_ids[mask],
            labels=None if self.labels is None else self.labels[mask],
        )


@dataclass
class Fold:
    train_days: tuple[int, ...]
    test_day: int


@dataclass
class SplitPlan:
    folds: list[Fold]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


# -- ingestion ------------------------------------------------------------


def _sniff_delimiter(line: str) -> str:
    return ";" if line.count(";") > line.count(",") else ","


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _resolve(col, header: list[str] | None, width: int, what: str) -> int:
    if isinstance(col, int) or (isinstance(col, str) and col.strip().lstrip("-").isdigit() and (header is None or col not in header)):
        idx = int(col)
    else:
        if header is None:
            raise IngestError(f"column {col!r} ({what}) given by name but the file has no header")
        if col not in header:
            raise IngestError(f"column {col!r} ({what}) not found in header")
        idx = header.index(col)
    if not 0 <= idx < width:
        raise IngestError(f"column index {idx} ({what}) out of range for {width} columns")
    return idx


def load_feature_csv(path, schema: ColumnMap) -> tuple[RawSeries, IngestReport]:
    """Parse a comma- or semicolon-delimited feature file.

    Missing cells (``?`` or empty) are forward-filled within a day; rows
    before the first complete observation of a day are dropped.  Any other
    non-numeric cell is an error naming the line.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        text = fh.read().splitlines()
    text = [line for line in text if line.strip()]
    if not text:
        raise IngestError(f"{path}: no rows")
    delim = _sniff_delimiter(text[0])
    rows = list(csv.reader(text, delimiter=delim))
    first = [c.strip() for c in rows[0]]
    width = len(first)

    named = [c for c in list(schema.features) + [schema.target, schema.day, schema.segment] + list(schema.labels) if isinstance(c, str) and not c.lstrip("-").isdigit()]
    numeric_idx = [int(c) for c in (schema.features or range(width)) if not isinstance(c, str) or c.lstrip("-").isdigit()]
    header = None
    start = 0
    if named or any(0 <= i < width and not _is_number(first[i]) and first[i] not in MISSING for i in numeric_idx):
        header, start = first, 1

    feature_cols = [_resolve(c, header, width, "features") for c in (schema.features or range(width))]
    target_col = None if schema.target is None else _resolve(schema.target, header, width, "target")
    day_col = None if schema.day is None else _resolve(schema.day, header, width, "day")
    seg_col = None if schema.segment is None else _resolve(schema.segment, header, width, "segment")
    label_cols = [_resolve(c, header, width, "labels") for c in schema.labels]
    if not schema.features:
        feature_cols = [c for c in feature_cols if c not in (day_col, seg_col, target_col, *label_cols)]
    numeric = feature_cols + ([target_col] if target_col is not None else []) + label_cols

    report = IngestReport()
    day_keys: dict[str, int] = {}
    parsed, days, segs = [], [], []
    for offset, row in enumerate(rows[start:]):
        lineno = start + offset + 1
        report.rows_read += 1
        if len(row) != width:
            raise IngestError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        cells = [c.strip() for c in row]
        vals = []
        for c in numeric:
            cell = cells[c]
            if cell in MISSING:
                vals.append(np.nan)
            else:
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise IngestError(f"{path}:{lineno}: cannot parse {cell!r} in column {c}") from None
        parsed.append(vals)
        if day_col is None:
            days.append(0)
        else:
            key = cells[day_col]
            if key in MISSING:
                raise IngestError(f"{path}:{lineno}: missing day id")
            if key.lstrip("-").isdigit():
                days.append(int(key))
            else:
                days.append(day_keys.setdefault(key, len(day_keys)))
        if seg_col is not None:
            try:
                segs.append(int(float(cells[seg_col])))
            except ValueError:
                raise IngestError(f"{path}:{lineno}: cannot parse segment id {cells[seg_col]!r}") from None

    data = np.array(parsed, dtype=np.float64).reshape(len(parsed), len(numeric))
    days = np.array(days, dtype=np.int64)
    segs = np.array(segs, dtype=np.int64) if seg_col is not None else days.copy()
    keep = np.ones(len(data), dtype=bool)
    for i in range(len(data)):
        new_day = i == 0 or days[i] != days[i - 1] or segs[i] != segs[i - 1]
        for j in range(data.shape[1]):
            if np.isnan(data[i, j]):
                if new_day or not keep[i - 1]:
                    keep[i] = False
                else:
                    data[i, j] = data[i - 1, j]
                    report.values_filled += 1
    report.rows_dropped = int((~keep).sum())
    data, days, segs = data[keep], days[keep], segs[keep]
    if len(data) == 0:
        raise IngestError(f"{path}: zero usable rows")

    nf = len(feature_cols)
    names = [header[c] if header else f"f{c}" for c in feature_cols]
    target = data[:, nf] if target_col is not None else None
    labels = data[:, len(numeric) - len(label_cols) :].astype(np.int64) if label_cols else None
    series = RawSeries(values=data[:, :nf], day_ids=days, feature_names=names, target=target, labels=labels, segment_ids=segs)
    log.info("ingested %s: %d rows, %d dropped, %d filled", path, report.rows_read, report.rows_dropped, report.values_filled)
    return series, report


HOUSEHOLD_COLUMNS = ColumnMap(
    features=[
        "Global_active_power",
        "Global_reactive_power",
        "Voltage",
        "Global_intensity",
        "Sub_metering_1",
        "Sub_metering_2",
        "Sub_metering_3",
    ],
    target="Global_active_power",
    day="Date",
)


# -- windows and labels ---------------------------------------------------


def _segments(series: RawSeries) -> list[tuple[int, int]]:
    """Maximal runs of rows sharing both day id and segment id."""
    change = np.ones(series.length, dtype=bool)
    change[1:] = (series.day_ids[1:] != series.day_ids[:-1]) | (series.segment_ids[1:] != series.segment_ids[:-1])
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], series.length)
    return list(zip(starts.tolist(), ends.tolist()))


def make_windows(series: RawSeries, L: int) -> WindowedDataset:
    """Stride-1 windows of ``L`` consecutive rows that never cross a day boundary."""
    if L < 1:
        raise ValueError("window length must be >= 1")
    wins, ends = [], []
    for start, stop in _segments(series):
        if stop - start < L:
            log.warning("segment of %d rows (day %d) shorter than window %d; skipped", stop - start, series.day_ids[start], L)
            continue
        view = np.lib.stride_tricks.sliding_window_view(series.values[start:stop], L, axis=0)
        wins.append(np.swapaxes(view, 1, 2))
        ends.append(np.arange(start + L - 1, stop))
    if not wins:
        return WindowedDataset(np.zeros((0, L, series.dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    end_index = np.concatenate(ends)
    return WindowedDataset(
        windows=np.ascontiguousarray(np.concatenate(wins)),
        end_index=end_index,
        day_ids=series.day_ids[end_index],
    )


def label_midprice(mid, t: int, horizon: int = 10, theta: float | None = None) -> int:
    """Direction of the mean mid price over ``t+1..t+horizon`` relative to ``mid[t]``.

    Stationary iff the relative change is strictly below ``theta`` in size.
    """
    mid = np.asarray(mid, dtype=np.float64)
    if theta is None:
        theta = default_theta(horizon)
    if t < 0 or t + horizon >= len(mid):
        raise IndexError(f"horizon {horizon} from t={t} runs past the series end ({len(mid)} rows)")
    r = (mid[t + 1 : t + horizon + 1].mean() - mid[t]) / mid[t]
    if abs(r) < theta:
        return STATIONARY
    return UP if r > 0 else DOWN


def label_power(power, t: int, past: int = POWER_PAST, future: int = POWER_FUTURE) -> int:
    """Increase iff the next ``future`` mean exceeds the last ``past`` mean (ties: decrease)."""
    power = np.asarray(power, dtype=np.float64)
    if t - past + 1 < 0:
        raise IndexError(f"t={t} has fewer than {past} rows of history")
    if t + future >= len(power):
        raise IndexError(f"t={t} has fewer than {future} rows of future")
    before = power[t - past + 1 : t + 1].mean()
    after = power[t + 1 : t + future + 1].mean()
    return INCREASE if after > before else DECREASE


def label_windows(dataset: WindowedDataset, series: RawSeries, task: str = "midprice", horizon: int = 10, theta: float | None = None, label_column: int | None = None) -> WindowedDataset:
    """Attach labels, dropping windows whose look-ahead leaves the window's day.

    ``label_column`` selects a precomputed label column instead of recomputing.
    """
    if label_column is not None:
        if series.labels is None:
            raise ValueError("series carries no precomputed labels")
        return replace(dataset, labels=series.labels[dataset.end_index, label_column].astype(np.int64))
    if series.target is None:
        raise ValueError("series has no target column to label from")
    if task not in ("midprice", "power"):
        raise ValueError(f"unknown task {task!r}")
    look = horizon if task == "midprice" else POWER_FUTURE
    history = 1 if task == "midprice" else POWER_PAST
    seg_start = np.empty(series.length, dtype=np.int64)
    seg_end = np.empty(series.length, dtype=np.int64)
    for start, stop in _segments(series):
        seg_start[start:stop] = start
        seg_end[start:stop] = stop
    t = dataset.end_index
    keep = (t + look < seg_end[t]) & (t - history + 1 >= seg_start[t])
    kept = dataset.subset(keep)
    if task == "midprice":
        labels = [label_midprice(series.target, int(t), horizon, theta) for t in kept.end_index]
    else:
        labels = [label_power(series.target, int(t), POWER_PAST, look) for t in kept.end_index]
    return replace(kept, labels=np.asarray(labels, dtype=np.int64))


# -- splits ---------------------------------------------------------------


def anchored_folds(day_ids) -> SplitPlan:
    """Fold k trains on the first k days (chronologically) and tests on day k+1."""
    days = sorted(set(int(d) for d in np.asarray(day_ids).ravel()))
    if len(days) < 2:
        raise ValueError("anchored evaluation needs at least two distinct days")
    return SplitPlan([Fold(tuple(days[:k]), days[k]) for k in range(1, len(days))])


def fold_masks(dataset: WindowedDataset, fold: Fold) -> tuple[np.ndarray, np.ndarray]:
    train = np.isin(dataset.day_ids, fold.train_days)
    test = dataset.day_ids == fold.test_day
    return train, test


def chronological_split(dataset: WindowedDataset, train_fraction: float = 0.9) -> tuple[WindowedDataset, WindowedDataset]:
    order = np.argsort(dataset.end_index, kind="stable")
    cut = int(round(train_fraction * len(order)))
    train = np.zeros(len(order), dtype=bool)
    train[order[:cut]] = True
    return dataset.subset(train), dataset.subset(~train)


# -- distribution shift ---------------------------------------------------


def shift_windows(windows, means, multiplier: float = 3.0, exempt: Sequence[int] = ()) -> np.ndarray:
    """``x -> x + multiplier * mean`` per feature, leaving ``exempt`` features untouched."""
    offset = multiplier * np.asarray(means, dtype=np.float64).copy()
    offset[list(exempt)] = 0.0
    return np.asarray(windows, dtype=np.float64) + offset


# -- synthetic two-mode markets -------------------------------------------


@dataclass
class SyntheticSpec:
    """Several instruments at very different price levels with shared relative dynamics.

    Each mode is ``(price_level, noise_scale)``; ``noise_scale`` is the per-step
    relative volatility.  Log returns follow ``noise * (signal * m_t + e_t)``
    where the latent drift ``m_t`` is a unit-variance AR(1) with coefficient
    ``persistence``, shared by all modes (the instruments are tightly linked).
    Features are the mid price and ``levels`` ask/bid quotes either side.
    """

    modes: list = field(default_factory=lambda: [(1.0, 1e-4), (100.0, 1e-4)])
    day_length: int = 500
    train_days: int = 4
    test_days: int = 2
    seed: int = 0
    persistence: float = 0.9
    signal: float = 1.0
    levels: int = 2
    spread: float = 5e-4
    quote_noise: float = 0.1
    price_unit: float = 1e-4
    horizon: int = 10
    theta: float | None = None
    test_shift: float = 0.0

    def __post_init__(self):
        self.modes = [tuple(float(v) for v in m) for m in self.modes]


def synth_bimodal(spec: SyntheticSpec) -> tuple[RawSeries, RawSeries]:
    if len(spec.modes) < 2:
        raise ValueError("a multimodal series needs at least two modes")
    if spec.day_length <= 0 or spec.train_days <= 0 or spec.test_days < 0:
        raise ValueError("degenerate synthetic spec: zero length")
    rng = np.random.default_rng(spec.seed)
    n_days = spec.train_days + spec.test_days
    T = spec.day_length
    innov = np.sqrt(1.0 - spec.persistence**2)
    names = ["mid"] + [f"{side}{k}" for k in range(1, spec.levels + 1) for side in ("ask", "bid")]

    values, days, segs, mids = [], [], [], []
    drift = rng.normal()
    log_level = np.zeros(len(spec.modes))
    for day in range(n_days):
        latent = np.empty(T)
        for t in range(T):
            drift = spec.persistence * drift + innov * rng.normal()
            latent[t] = drift
        for m, (level, noise) in enumerate(spec.modes):
            eps = rng.normal(size=T)
            log_ret = noise * (spec.signal * latent + eps)
            path = log_level[m] + np.cumsum(log_ret)
            log_level[m] = path[-1]
            mid = level * np.exp(path) / spec.price_unit
            cols = [mid]
            for k in range(1, spec.levels + 1):
                jitter = spec.quote_noise * noise * rng.normal(size=(2, T))
                cols.append(mid * (1.0 + k * spec.spread + jitter[0]))
                cols.append(mid * (1.0 - k * spec.spread + jitter[1]))
            values.append(np.stack(cols, axis=1))
            mids.append(mid)
            days.append(np.full(T, day))
            segs.append(np.full(T, day * len(spec.modes) + m))

    values = np.concatenate(values)
    days = np.concatenate(days)
    segs = np.concatenate(segs)
    mids = np.concatenate(mids)
    train = days < spec.train_days

    def part(mask) -> RawSeries:
        return RawSeries(values=values[mask], day_ids=days[mask], feature_names=list(names), target=mids[mask], segment_ids=segs[mask])

    train_series, test_series = part(train), part(~train)
    if spec.test_shift:
        means = test_series.values.mean(axis=0)
        test_series.values = shift_windows(test_series.values, means, spec.test_shift)
        test_series.target = test_series.values[:, 0].copy()
    return train_series, test_series


def expected_class_priors(spec: SyntheticSpec) -> np.ndarray:
    """Analytic (up, stationary, down) label frequencies of a synthetic spec.

    To first order the relative change is ``sum_j w_j * ret_{t+j}`` with
    ``w_j = (H - j + 1) / H``, a zero-mean Gaussian whose variance follows from
    the AR(1) autocovariance ``persistence**|i-j|`` of the shared drift.
    """
    H = spec.horizon
    theta = default_theta(H) if spec.theta is None else spec.theta
    w = (H - np.arange(H)) / H
    lags = np.abs(np.subtract.outer(np.arange(H), np.arange(H)))
    unit_var = spec.signal**2 * w @ (spec.persistence**lags) @ w + w @ w
    priors = []
    for _, noise in spec.modes:
        sd = noise * np.sqrt(unit_var)
        stationary = math.erf(theta / (sd * math.sqrt(2.0)))
        priors.append([(1 - stationary) / 2, stationary, (1 - stationary) / 2])
    return np.mean(priors, axis=0)


def windowed_synthetic(spec: SyntheticSpec, L: int = 15) -> tuple[WindowedDataset, WindowedDataset]:
    """Labelled train/test windows for a synthetic spec.

    Labels always come from the unshifted prices, so a test shift changes the
    inputs but not the targets.
    """
    clean = replace(spec, test_shift=0.0)
    train_s, test_s = synth_bimodal(clean)
    train = label_windows(make_windows(train_s, L), train_s, "midprice", spec.horizon, spec.theta)
    test = label_windows(make_windows(test_s, L), test_s, "midprice", spec.horizon, spec.theta)
    if spec.test_shift:
        means = test_s.values.mean(axis=0)
        test = replace(test, windows=shift_windows(test.windows, means, spec.test_shift))
    return train, test


# -- dataset cache --------------------------------------------------------


def save_dataset(path, dataset: WindowedDataset) -> None:
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "dims": list(dataset.windows.shape),
        "labelled": dataset.labels is not None,
    }
    arrays = {
        "windows": np.asarray(dataset.windows, dtype=np.float64),
        "end_index": dataset.end_index.astype(np.int64),
        "day_ids": dataset.day_ids.astype(np.int64),
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
    }
    if dataset.labels is not None:
        arrays["labels"] = dataset.labels.astype(np.int64)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path) -> WindowedDataset:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise ValueError(f"{path}: not a version-{CACHE_VERSION} window cache")
        windows = data["windows"].copy()
        if list(windows.shape) != header["dims"]:
            raise ValueError(f"{path}: window dims disagree with header")
        return WindowedDataset(
            windows=windows,
            end_index=data["end_index"].copy(),
            day_ids=data["day_ids"].copy(),
            labels=data["labels"].copy() if header["labelled"] else None,
        )


def save_series_csv(path, series: RawSeries) -> None:
    """Write a series as a comma-delimited file: day, segment, features, target."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "segment"] + series.feature_names + ["target"])
        target = series.target if series.target is not None else np.zeros(series.length)
        for i in range(series.length):
            writer.writerow([int(series.day_ids[i]), int(series.segment_ids[i])] + [repr(float(v)) for v in series.values[i]] + [repr(float(target[i]))])
