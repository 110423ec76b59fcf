import numpy as np
import pytest

from adanorm import tensor as T
from adanorm.cli import main
from adanorm.config import ConfigError, load_config, parse_overrides
from adanorm.models import build_model, load_checkpoint
from adanorm.pipeline import _fold_rng, model_config

SMALL = [
    "dataset.source=synthetic",
    "dataset.max_folds=2",
    "synthetic.day_length=120",
    "synthetic.train_days=2",
    "synthetic.test_days=1",
    "model.hidden=16",
    "training.epochs=2",
]


def small_args(out, *extra):
    args = ["--output", str(out)]
    for kv in SMALL + list(extra):
        args += ["--set", kv]
    return args


def metrics(path):
    rows = {}
    for line in (path / "metrics.txt").read_text().splitlines():
        head, *rest = line.split()
        rows[head] = dict(kv.split("=") for kv in rest)
    return rows


class TestConfig:
    def test_defaults_need_a_path(self):
        with pytest.raises(ConfigError, match="dataset.path"):
            load_config(env={})

    def test_precedence(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\npreset = fi2010-cnn\n[dataset]\nsource = synthetic\n[training]\nseed = 5\neta_b = 0.5\n")
        cfg = load_config(ini, env={})
        assert cfg.get("model", "kind") == "cnn"  # preset
        assert cfg.get_float("training", "eta_a") == 1e-2  # preset
        assert cfg.get_float("training", "eta_b") == 0.5  # file beats preset
        assert cfg.get_int("training", "seed") == 5
        assert load_config(ini, env={"ADANORM_SEED": "9"}).get_int("training", "seed") == 9
        cfg = load_config(ini, ["training.seed=11"], env={"ADANORM_SEED": "9"})
        assert cfg.get_int("training", "seed") == 11
        assert load_config(ini, preset="fi2010-rnn", env={}).get("model", "kind") == "gru"

    def test_power_preset(self):
        cfg = load_config(None, ["dataset.source=synthetic"], preset="power", env={})
        assert cfg.get("dataset", "split") == "fraction"
        assert cfg.get_int("dataset", "window") == 20
        assert cfg.get("dataset", "task") == "power"

    @pytest.mark.parametrize(
        "override, key",
        [
            ("model.kind=lstm", "model.kind"),
            ("training.epochs=-1", "training.epochs"),
            ("training.batch_size=abc", "training.batch_size"),
            ("normalizer.kind=layer", "normalizer.kind"),
            ("normalizer.mode=4", "normalizer.mode"),
            ("model.dropout=1.5", "model.dropout"),
            ("dataset.split=kfold", "dataset.split"),
            ("training.eta_c=-1", "training.eta_c"),
            ("model.colour=red", "model.colour"),
            ("synthetic.levels=1", "synthetic.levels"),
        ],
    )
    def test_errors_name_the_key(self, override, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            load_config(None, ["dataset.source=synthetic", override], env={})

    def test_override_syntax(self):
        assert parse_overrides(["a.b=c=d"]) == {"a": {"b": "c=d"}}
        with pytest.raises(ConfigError):
            parse_overrides(["novalue"])

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="run.preset"):
            load_config(None, ["dataset.source=synthetic"], preset="imagenet", env={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini", env={})

    def test_paths_resolved_against_config_dir(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2\n")
        ini = tmp_path / "run.ini"
        ini.write_text("[dataset]\npath = d.csv\ntarget = 0\n[output]\ndir = out\n")
        cfg = load_config(ini, env={})
        assert cfg.get("dataset", "path") == str(tmp_path / "d.csv")
        assert cfg.get("output", "dir") == str(tmp_path / "out")


class TestCliErrors:
    def test_missing_dataset_path_exit_2(self, capsys):
        assert main(["train"]) == 2
        assert "dataset.path" in capsys.readouterr().err

    def test_no_windows_is_a_config_error(self, tmp_path, capsys):
        assert main(["train"] + small_args(tmp_path / "o", "synthetic.day_length=20")) == 2
        assert "dataset.window" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_1(self, tmp_path, capsys):
        args = small_args(tmp_path / "o", "normalizer.kind=none", "training.eta=1e300", "model.dropout=0")
        assert main(["train"] + args) == 1
        assert "epoch" in capsys.readouterr().err


class TestTrainEvaluate:
    def test_outputs_and_bitwise_evaluate(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train"] + small_args(out)) == 0
        for name in ("config.ini", "train.log", "metrics.txt", "metrics_table.txt", "fold1/checkpoint.npz", "fold2/checkpoint.npz", "fold1/train.log"):
            assert (out / name).exists(), name
        rows = metrics(out)
        assert {"split=fold1", "split=fold2", "aggregate"} <= set(rows)
        assert {"macro_f1", "kappa"} <= set(rows["split=fold1"])
        log_lines = (out / "train.log").read_text().splitlines()
        assert len(log_lines) == 4 and log_lines[0].startswith("split=fold1 epoch=1 loss=")
        capsys.readouterr()
        assert main(["evaluate", "--config", str(out / "config.ini"), "--checkpoint", str(out / "fold2" / "checkpoint.npz")]) == 0
        printed = capsys.readouterr().out.splitlines()[0]
        summary = next(l for l in (out / "metrics.txt").read_text().splitlines() if l.startswith("split=fold2"))
        assert printed == summary

    def test_shift_zero_gives_identical_reports(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train"] + small_args(out, "dataset.max_folds=1")) == 0
        capsys.readouterr()
        assert main(["evaluate", "--config", str(out / "config.ini"), "--checkpoint", str(out / "fold1" / "checkpoint.npz"), "--shift", "0"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split(" ", 1)[1] == lines[1].split(" ", 2)[2]
        assert lines[2].endswith("accuracy_delta=+0.000000")

    def test_shape_mismatch_exit_2(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train"] + small_args(out, "dataset.max_folds=1")) == 0
        code = main(["evaluate", "--config", str(out / "config.ini"), "--set", "model.hidden=8", "--checkpoint", str(out / "fold1" / "checkpoint.npz")])
        assert code == 2
        assert "head.W1" in capsys.readouterr().err

    def test_shift_hurts_zscore_more_than_dain(self, tmp_path, capsys):
        base = ["--preset", "fi2010-mlp", "--seed", "0"]
        for kv in ("dataset.source=synthetic", "dataset.split=holdout", "synthetic.levels=100,100", "synthetic.price_unit=1e-2"):
            base += ["--set", kv]
        deltas = {}
        for kind in ("zscore", "dain"):
            out = tmp_path / kind
            assert main(["train"] + base + ["--set", f"normalizer.kind={kind}", "--output", str(out)]) == 0
            capsys.readouterr()
            ckpt = out / "holdout" / "checkpoint.npz"
            assert main(["evaluate", "--config", str(out / "config.ini"), "--checkpoint", str(ckpt), "--shift", "3"]) == 0
            deltas[kind] = float(capsys.readouterr().out.splitlines()[-1].split("accuracy_delta=")[1])
        assert abs(deltas["dain"]) < abs(deltas["zscore"])

    def test_zero_epochs_keep_initialization(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train"] + small_args(out, "training.epochs=0", "dataset.max_folds=1", "training.seed=3")) == 0
        cfg = load_config(out / "config.ini", env={})
        tensors, header = load_checkpoint(out / "fold1" / "checkpoint.npz")
        init = build_model(model_config(cfg, header["features"]), _fold_rng(3, 1))
        for name, p in init.named_parameters().items():
            assert tensors[f"model/{name}"].tobytes() == p.data.tobytes()
        assert "kappa" in metrics(out)["split=fold1"]

    def test_full_determinism_and_jobs(self, tmp_path):
        runs = []
        for i, jobs in enumerate((1, 1, 2)):
            out = tmp_path / f"r{i}"
            assert main(["train", "--jobs", str(jobs)] + small_args(out)) == 0
            runs.append(out)
        a, b, c = ((r / "metrics.txt").read_bytes() for r in runs)
        assert a == b == c
        strip = lambda p: [l.rsplit(" time=", 1)[0] for l in (p / "train.log").read_text().splitlines()]
        assert strip(runs[0]) == strip(runs[1]) == strip(runs[2])
        for fold in ("fold1", "fold2"):
            t0, _ = load_checkpoint(runs[0] / fold / "checkpoint.npz")
            t2, _ = load_checkpoint(runs[2] / fold / "checkpoint.npz")
            assert all(t0[k].tobytes() == t2[k].tobytes() for k in t0)

    def test_config_echo_reruns_identically(self, tmp_path):
        out = tmp_path / "first"
        assert main(["train"] + small_args(out, "training.seed=4")) == 0
        again = tmp_path / "second"
        assert main(["train", "--config", str(out / "config.ini"), "--output", str(again)]) == 0
        assert (out / "metrics.txt").read_bytes() == (again / "metrics.txt").read_bytes()

    def test_seed_changes_results(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--seed", "1"] + small_args(a)) == 0
        assert main(["train", "--seed", "2"] + small_args(b)) == 0
        ta, _ = load_checkpoint(a / "fold1" / "checkpoint.npz")
        tb, _ = load_checkpoint(b / "fold1" / "checkpoint.npz")
        assert not np.array_equal(ta["model/head.W1"], tb["model/head.W1"])

    def test_fraction_split_power_task(self, tmp_path):
        out = tmp_path / "p"
        args = small_args(out, "dataset.task=power", "dataset.split=fraction", "dataset.window=20", "synthetic.day_length=200")
        assert main(["train"] + args) == 0
        assert "split=fraction" in (out / "metrics.txt").read_text()

    def test_csv_source(self, tmp_path):
        synth_dir = tmp_path / "csv"
        assert main(["synth", "--out", str(synth_dir)] + [a for kv in SMALL for a in ("--set", kv)]) == 0
        ini = tmp_path / "csv.ini"
        ini.write_text(
            "[dataset]\nsource = csv\npath = csv/train.csv\nfeatures = mid,ask1,bid1,ask2,bid2\n"
            "target = target\nday = day\nsegment = segment\n[model]\nhidden = 8\n[training]\nepochs = 1\n[output]\ndir = out\n"
        )
        assert main(["train", "--config", str(ini)]) == 0
        assert "split=fold1" in (tmp_path / "out" / "metrics.txt").read_text()


class TestGradcheckCli:
    def test_default_sweep(self, capsys):
        assert main(["gradcheck"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 10 and all(l.endswith("status=PASS") for l in lines)

    def test_seed_reproducible(self, capsys):
        main(["gradcheck", "--model", "gru", "--mode", "full", "--seed", "4"])
        first = capsys.readouterr().out
        main(["gradcheck", "--model", "gru", "--mode", "full", "--seed", "4"])
        assert capsys.readouterr().out == first

    def test_corrupted_backward_fails(self, monkeypatch, capsys):
        real = T._make

        def broken(data, parents, backward_fn, op):
            if op == "sigmoid":
                return real(data, parents, lambda g: [None if v is None else 1.01 * v for v in backward_fn(g)], op)
            return real(data, parents, backward_fn, op)

        monkeypatch.setattr(T, "_make", broken)
        assert main(["gradcheck", "--model", "mlp", "--mode", "full"]) == 1
        assert "status=FAIL" in capsys.readouterr().out


def test_synth_writes_csv(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "synthetic.day_length=30"]) == 0
    header = (tmp_path / "train.csv").read_text().splitlines()[0]
    assert header == "day,segment,mid,ask1,bid1,ask2,bid2,target"
    assert (tmp_path / "test.csv").exists()
