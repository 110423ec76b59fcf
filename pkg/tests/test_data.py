import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adanorm.data import (
    DOWN,
    INCREASE,
    DECREASE,
    STATIONARY,
    UP,
    ColumnMap,
    IngestError,
    RawSeries,
    SyntheticSpec,
    anchored_folds,
    chronological_split,
    default_theta,
    expected_class_priors,
    fold_masks,
    label_midprice,
    label_power,
    label_windows,
    load_dataset,
    load_feature_csv,
    make_windows,
    save_dataset,
    save_series_csv,
    shift_windows,
    synth_bimodal,
    windowed_synthetic,
)
from adanorm.normalization import instance_normalize


def write(tmp_path, text, name="f.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def series(T, d=2, days=None):
    values = np.arange(T * d, dtype=float).reshape(T, d)
    return RawSeries(values=values, day_ids=np.zeros(T, dtype=int) if days is None else days, feature_names=[f"f{i}" for i in range(d)], target=values[:, 0] + 100)


class TestCsv:
    def test_plain_numeric(self, tmp_path):
        s, rep = load_feature_csv(write(tmp_path, "1,2\n3,4\n5,6\n"), ColumnMap())
        np.testing.assert_array_equal(s.values, [[1, 2], [3, 4], [5, 6]])
        assert rep.rows_read == 3 and rep.rows_dropped == 0

    def test_forward_fill(self, tmp_path):
        s, rep = load_feature_csv(write(tmp_path, "a,b\n1,2\n3,?\n5,\n"), ColumnMap(features=["a", "b"]))
        np.testing.assert_array_equal(s.values[:, 1], [2, 2, 2])
        assert rep.values_filled == 2

    def test_bad_row_names_line(self, tmp_path):
        rows = ["x,y"] + [f"{i},{i}" for i in range(10)]
        rows[7] = "6,abc"
        p = write(tmp_path, "\n".join(rows) + "\n")
        with pytest.raises(IngestError, match=r"f\.csv:8"):
            load_feature_csv(p, ColumnMap(features=["x", "y"]))

    def test_ragged_row(self, tmp_path):
        with pytest.raises(IngestError, match=":2"):
            load_feature_csv(write(tmp_path, "1,2\n3\n"), ColumnMap())

    def test_semicolon_and_days(self, tmp_path):
        text = "Date;v;p\n1/1;?;1\n1/1;2;2\n1/1;?;3\n2/1;?;4\n2/1;7;5\n"
        s, rep = load_feature_csv(write(tmp_path, text), ColumnMap(features=["v", "p"], target="p", day="Date"))
        np.testing.assert_array_equal(s.values, [[2, 2], [2, 3], [7, 5]])
        np.testing.assert_array_equal(s.day_ids, [0, 0, 1])
        np.testing.assert_array_equal(s.target, [2, 3, 5])
        assert rep.rows_dropped == 2 and rep.values_filled == 1

    def test_no_fill_across_days(self, tmp_path):
        s, rep = load_feature_csv(write(tmp_path, "0,1\n0,2\n1,?\n1,4\n"), ColumnMap(features=[1], day=0))
        np.testing.assert_array_equal(s.values[:, 0], [1, 2, 4])
        assert rep.rows_dropped == 1

    def test_precomputed_labels(self, tmp_path):
        s, _ = load_feature_csv(write(tmp_path, "m,l\n1,0\n2,2\n"), ColumnMap(features=["m"], labels=["l"]))
        np.testing.assert_array_equal(s.labels[:, 0], [0, 2])

    def test_zero_usable_rows(self, tmp_path):
        with pytest.raises(IngestError, match="zero usable"):
            load_feature_csv(write(tmp_path, "a\n?\n?\n"), ColumnMap(features=["a"]))

    def test_empty_file(self, tmp_path):
        with pytest.raises(IngestError):
            load_feature_csv(write(tmp_path, ""), ColumnMap())

    def test_unknown_column(self, tmp_path):
        with pytest.raises(IngestError, match="not found"):
            load_feature_csv(write(tmp_path, "a,b\n1,2\n"), ColumnMap(features=["c"]))

    def test_series_csv_round_trip(self, tmp_path):
        train, _ = synth_bimodal(SyntheticSpec(day_length=40, train_days=2, test_days=1))
        save_series_csv(tmp_path / "s.csv", train)
        cols = ColumnMap(features=train.feature_names, target="target", day="day", segment="segment")
        back, _ = load_feature_csv(tmp_path / "s.csv", cols)
        np.testing.assert_array_equal(back.values, train.values)
        np.testing.assert_array_equal(back.segment_ids, train.segment_ids)
        np.testing.assert_array_equal(back.target, train.target)


class TestWindows:
    def test_counts(self):
        assert len(make_windows(series(20), 15)) == 6
        assert len(make_windows(series(15), 15)) == 1

    def test_no_cross_day_window(self):
        days = np.repeat([0, 1], 15)
        ds = make_windows(series(30, days=days), 15)
        assert len(ds) == 2
        np.testing.assert_array_equal(ds.day_ids, [0, 1])

    def test_short_day_skipped_with_warning(self, caplog):
        days = np.array([0] * 5 + [1] * 16)
        with caplog.at_level(logging.WARNING):
            ds = make_windows(series(21, days=days), 15)
        assert len(ds) == 2
        assert "shorter than window" in caplog.text

    def test_window_covers_trailing_rows(self):
        s = series(10)
        ds = make_windows(s, 4)
        np.testing.assert_array_equal(ds.windows[3], s.values[3:7])
        assert ds.end_index[3] == 6

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=6), st.integers(1, 12))
    def test_count_formula(self, lengths, L):
        days = np.concatenate([np.full(n, i) for i, n in enumerate(lengths)] + [np.zeros(0, dtype=int)]).astype(int)
        if days.size == 0:
            return
        ds = make_windows(series(len(days), days=days), L)
        assert len(ds) == sum(max(0, n - L + 1) for n in lengths)
        for w, t in zip(ds.windows, ds.end_index):
            assert len(set(days[t - L + 1 : t + 1])) == 1


class TestLabels:
    def test_up(self):
        mid = np.array([100.0] + [100.05] * 10)
        assert label_midprice(mid, 0, 10) == UP

    def test_stationary(self):
        mid = np.array([100.0] + [99.9995] * 10)
        assert label_midprice(mid, 0, 10) == STATIONARY

    def test_down(self):
        assert label_midprice(np.array([100.0] + [99.0] * 10), 0, 10) == DOWN

    def test_boundary_is_directional(self):
        assert label_midprice([1.0, 1.5], 0, 1, theta=0.5) == UP
        assert label_midprice([1.0, 0.5], 0, 1, theta=0.5) == DOWN

    def test_default_theta(self):
        assert default_theta(10) == 1e-4
        assert default_theta(20) == 2e-4

    def test_past_end(self):
        with pytest.raises(IndexError):
            label_midprice(np.ones(10), 5, 10)

    def test_power(self):
        past = [2.0] * 20
        assert label_power(past + [2.5] * 10, 19) == INCREASE
        assert label_power(past + [2.0] * 10, 19) == DECREASE
        assert label_power([3.0] * 20 + [1.0] * 10, 19) == DECREASE

    def test_power_needs_history_and_future(self):
        with pytest.raises(IndexError):
            label_power(np.ones(40), 10)
        with pytest.raises(IndexError):
            label_power(np.ones(25), 19)

    def test_label_windows_stays_inside_day(self):
        days = np.repeat([0, 1], 30)
        s = series(60, days=days)
        ds = label_windows(make_windows(s, 15), s, "midprice", 10)
        assert len(ds) == 2 * (30 - 15 + 1 - 10)
        assert np.all(ds.end_index % 30 + 10 < 30)

    def test_power_windows(self):
        s = series(60)
        ds = label_windows(make_windows(s, 20), s, "power")
        assert len(ds) == 60 - 20 + 1 - 10
        assert np.all(ds.labels == INCREASE)

    def test_idempotent(self):
        train, _ = synth_bimodal(SyntheticSpec(day_length=120, train_days=2, test_days=0))
        w = make_windows(train, 15)
        a = label_windows(w, train, "midprice", 10).labels
        b = label_windows(w, train, "midprice", 10).labels
        assert np.array_equal(a, b)

    def test_precomputed_column(self):
        s = series(20)
        s.labels = np.arange(40).reshape(20, 2) % 3
        ds = label_windows(make_windows(s, 5), s, label_column=1)
        np.testing.assert_array_equal(ds.labels, s.labels[ds.end_index, 1])


class TestFolds:
    def test_ten_days(self):
        assert len(anchored_folds(range(10))) == 9

    def test_two_days(self):
        plan = anchored_folds([5, 5, 9])
        assert [(f.train_days, f.test_day) for f in plan] == [((5,), 9)]

    def test_sorted(self):
        plan = anchored_folds([3, 1, 2])
        assert [(f.train_days, f.test_day) for f in plan] == [((1,), 2), ((1, 2), 3)]

    def test_one_day(self):
        with pytest.raises(ValueError):
            anchored_folds([4, 4])

    @given(st.lists(st.integers(0, 8), min_size=2))
    def test_no_leakage(self, day_list):
        if len(set(day_list)) < 2:
            return
        s = series(len(day_list), days=np.sort(np.array(day_list)))
        ds = make_windows(s, 1)
        for fold in anchored_folds(ds.day_ids):
            train, test = fold_masks(ds, fold)
            assert test.any()
            assert ds.day_ids[train].max() < ds.day_ids[test].min()

    def test_chronological_split(self):
        ds = make_windows(series(100), 1)
        train, test = chronological_split(ds, 0.9)
        assert len(train) == 90 and len(test) == 10
        assert train.end_index.max() < test.end_index.min()


class TestSynthetic:
    def test_deterministic_bytes(self):
        a = synth_bimodal(SyntheticSpec(seed=4, day_length=100))
        b = synth_bimodal(SyntheticSpec(seed=4, day_length=100))
        for x, y in zip(a, b):
            assert x.values.tobytes() == y.values.tobytes()

    def test_seed_matters(self):
        a, _ = synth_bimodal(SyntheticSpec(seed=1, day_length=50))
        b, _ = synth_bimodal(SyntheticSpec(seed=2, day_length=50))
        assert not np.array_equal(a.values, b.values)

    def test_levels(self):
        train, _ = synth_bimodal(SyntheticSpec(day_length=200, train_days=1, test_days=0))
        mids = [train.values[train.segment_ids == m, 0].mean() for m in (0, 1)]
        assert mids[1] / mids[0] == pytest.approx(100, rel=0.05)

    def test_instance_zscores_match_across_modes(self):
        train, _ = synth_bimodal(SyntheticSpec(day_length=500, train_days=1, test_days=0, signal=3.0))
        ds = make_windows(train, 15)
        seg = train.segment_ids[ds.end_index]
        z = instance_normalize(ds.windows).data[..., 0]
        raw = ds.windows[..., 0]
        assert np.corrcoef(z[seg == 0].ravel(), z[seg == 1].ravel())[0, 1] > 0.9
        assert np.abs(z[seg == 0] - z[seg == 1]).mean() < 0.3
        assert np.abs(raw[seg == 0] - raw[seg == 1]).mean() > 1e4

    def test_shift_quadruples_means(self):
        _, clean = synth_bimodal(SyntheticSpec(day_length=100))
        _, moved = synth_bimodal(SyntheticSpec(day_length=100, test_shift=3.0))
        np.testing.assert_allclose(moved.values.mean(axis=0), 4 * clean.values.mean(axis=0), rtol=1e-12)

    def test_shifted_windows_keep_clean_labels(self):
        spec = SyntheticSpec(day_length=100)
        _, clean = windowed_synthetic(spec)
        _, moved = windowed_synthetic(SyntheticSpec(day_length=100, test_shift=3.0))
        np.testing.assert_array_equal(clean.labels, moved.labels)
        assert not np.allclose(clean.windows, moved.windows)

    def test_shift_windows_exempt(self):
        w = np.ones((2, 3, 2))
        out = shift_windows(w, [1.0, 10.0], 3.0, exempt=[1])
        np.testing.assert_array_equal(out[..., 0], 4.0)
        np.testing.assert_array_equal(out[..., 1], 1.0)

    def test_degenerate_spec(self):
        with pytest.raises(ValueError):
            synth_bimodal(SyntheticSpec(day_length=0))
        with pytest.raises(ValueError):
            synth_bimodal(SyntheticSpec(modes=[(1.0, 1e-4)]))

    @pytest.mark.parametrize(
        "spec",
        [
            SyntheticSpec(train_days=53, test_days=0, seed=1),
            SyntheticSpec(modes=[(1, 3e-4), (100, 5e-5)], train_days=53, test_days=0, seed=2, persistence=0.5, signal=2.0),
        ],
    )
    def test_class_priors_match_analytic(self, spec):
        train, _ = windowed_synthetic(spec)
        assert len(train) >= 50_000
        freq = np.bincount(train.labels, minlength=3) / len(train)
        np.testing.assert_allclose(freq, expected_class_priors(spec), atol=0.05)


class TestCache:
    def test_round_trip(self, tmp_path):
        train, _ = windowed_synthetic(SyntheticSpec(day_length=80, train_days=2, test_days=1))
        save_dataset(tmp_path / "c.npz", train)
        back = load_dataset(tmp_path / "c.npz")
        for name in ("windows", "labels", "day_ids", "end_index"):
            assert getattr(back, name).tobytes() == getattr(train, name).tobytes()

    def test_unlabelled(self, tmp_path):
        ds = make_windows(series(10), 3)
        save_dataset(tmp_path / "c.npz", ds)
        assert load_dataset(tmp_path / "c.npz").labels is None

    def test_wrong_format(self, tmp_path):
        np.savez(tmp_path / "x.npz", header=np.frombuffer(b'{"format": "nope", "version": 1}', dtype=np.uint8))
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x.npz")
