"""Command line entry point: ``adanorm {train,evaluate,gradcheck,synth}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a configuration
error (the message names the offending ``section.key``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import PRESET_CONFIGS, ConfigError, load_config
from .data import synth_bimodal, save_series_csv
from .gradcheck import gradcheck_dain
from .models import MODEL_KINDS
from .normalization import DainMode
from .tensor import NonFiniteError
from .training import TrainingDivergence

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("adanorm")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI experiment file")
    p.add_argument("--preset", choices=sorted(PRESET_CONFIGS), help="hyperparameter preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set training.seed=N")
    p.add_argument("--epochs", type=int, help="shorthand for --set training.epochs=N")
    p.add_argument("--output", help="shorthand for --set output.dir=PATH")


def _overrides(args) -> list[str]:
    extra = list(args.overrides)
    for flag, key in (("seed", "training.seed"), ("epochs", "training.epochs"), ("output", "output.dir")):
        value = getattr(args, flag, None)
        if value is not None:
            extra.append(f"{key}={value}")
    return extra


def _load(args):
    return load_config(args.config, _overrides(args), args.preset)


def cmd_train(args) -> int:
    from .pipeline import run_train, summary_lines

    cfg = _load(args)
    results = run_train(cfg, jobs=args.jobs)
    for line in summary_lines(results):
        print(line)
    print(f"outputs written to {cfg.path('output', 'dir')}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import run_evaluate

    cfg = _load(args)
    exempt = [int(v) for v in args.exempt.split(",") if v.strip()] if args.exempt else []
    res = run_evaluate(cfg, args.checkpoint, args.shift, exempt)
    print(f"split={res.split} {res.clean.kv()}")
    if res.shifted is not None:
        print(f"split={res.split} shift={args.shift:g} {res.shifted.kv()}")
        print(f"split={res.split} accuracy_delta={res.shifted.accuracy - res.clean.accuracy:+.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    models = [args.model] if args.model else list(MODEL_KINDS)
    modes = [args.mode] if args.mode else [m.value for m in DainMode]
    failed = 0
    for model in models:
        for mode in modes:
            report = gradcheck_dain(model, mode, seed=args.seed)
            print(report.line())
            failed += not report.passed
    report = gradcheck_dain("mlp", "full", seed=args.seed, input_only=True)
    print(report.line())
    failed += not report.passed
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load(args)
    from .pipeline import synthetic_spec

    train, test = synth_bimodal(synthetic_spec(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_series_csv(out / "train.csv", train)
    save_series_csv(out / "test.csv", test)
    print(f"wrote {train.length} train rows and {test.length} test rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adanorm", description="Adaptive input normalization for time-series classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train over every split and write metrics and checkpoints")
    _config_args(p)
    p.add_argument("--jobs", type=int, default=1, help="train folds in parallel worker processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on its test split")
    _config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--shift", type=float, help="also score inputs moved by this many training means")
    p.add_argument("--exempt", help="comma-separated feature indices left unshifted")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the DAIN gradients")
    p.add_argument("--model", choices=sorted(MODEL_KINDS))
    p.add_argument("--mode", choices=[m.value for m in DainMode])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic two-level market as CSV")
    _config_args(p)
    p.add_argument("--out", default="synthetic", help="output directory")
    p.set_defaults(func=cmd_synth, source_synthetic=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "source_synthetic", False):
        args.overrides = ["dataset.source=synthetic"] + args.overrides
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, NonFiniteError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
