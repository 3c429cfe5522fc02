"""Command line interface.

Subcommands:

* ``synth``     generate the synthetic benchmark CSVs
* ``train``     run the multi-trial training experiment on a data directory
* ``eval``      score a finished run and write its report
* ``predict``   daily probabilities + budbreak day from one checkpoint
* ``gradcheck`` finite-difference self-check of every model variant

Exit codes: 0 success, 2 usage or configuration error, 3 data or file
problem, 4 runtime failure (divergence, failed self-check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from budbreak import __version__, diagnostics, evaluation, models, synthgen, training
from budbreak.data import build_season, load_dataset, parse_weather_csv
from budbreak.errors import (
    BudbreakError,
    CheckpointError,
    ConfigError,
    DataError,
    TrainingDiverged,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="budbreak",
        description="Recurrent budbreak prediction: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"budbreak {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory for the CSVs")
    p.add_argument("--seed", type=int, default=7, help="master seed (default 7)")
    p.add_argument("--season-counts", type=_int_list, default=synthgen.DEFAULT_SEASON_COUNTS,
                   help="seasons per cultivar, comma separated (default 4,4,8,16,24,30)")
    p.add_argument("--end-year", type=int, default=2022)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("train", help="train all variants over seeded trials")
    p.add_argument("--data", required=True, help="directory with weather.csv + phenology.csv")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--config", help="JSON file with experiment settings; flags override it")
    p.add_argument("--variants", help="comma-separated subset of "
                                      f"{','.join(models.VARIANTS)} (default all)")
    p.add_argument("--trials", type=int)
    p.add_argument("--test-per-trial", type=int)
    p.add_argument("--fc-dims", type=_int_list)
    p.add_argument("--gru-hidden", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--combine", choices=models.COMBINE_POINTS)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--balanced", action="store_true", default=None,
                   help="oversample low-season cultivars in every epoch")
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--data", required=True, help="directory with weather.csv + phenology.csv")
    p.add_argument("--out", help="report directory (default RUN/report)")
    p.add_argument("--threshold", type=float, default=evaluation.DEFAULT_THRESHOLD)
    p.add_argument("--hist-width", type=int, default=5)
    p.add_argument("--curves", action="store_true", help="export per-season probability curves")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("predict", help="predict one season from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--weather", required=True, help="weather CSV containing the season")
    p.add_argument("--year", type=int, required=True)
    p.add_argument("--cultivar", help="cultivar name (required for pooled checkpoints)")
    p.add_argument("--threshold", type=float, default=evaluation.DEFAULT_THRESHOLD)
    p.add_argument("--out", help="write the probability curve CSV here")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of all variants")
    p.add_argument("--variant", choices=[*models.VARIANTS, "all"], default="all")
    p.add_argument("--combine", choices=models.COMBINE_POINTS, default="pre_gru")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--verbose", action="store_true")
    return parser


def _load_data_dir(data_dir: str):
    data = Path(data_dir)
    weather = data / synthgen.WEATHER_FILE
    phenology = data / synthgen.PHENOLOGY_FILE
    if not weather.exists() or not phenology.exists():
        raise DataError(f"{data}: expected {synthgen.WEATHER_FILE} and {synthgen.PHENOLOGY_FILE}")
    return load_dataset(weather, phenology)


def cmd_synth(args) -> int:
    bench = synthgen.gen_benchmark(args.seed, season_counts=args.season_counts,
                                   end_year=args.end_year)
    paths = synthgen.write_benchmark(bench, args.out)
    n = sum(len(d.seasons) for d in bench.datasets)
    print(f"wrote {len(bench.datasets)} cultivars, {n} seasons to {args.out}")
    if args.verbose:
        for ds in bench.datasets:
            days = [s.budbreak_doy for s in ds.seasons]
            print(f"  {ds.name}: {len(ds.seasons)} seasons, budbreak doy {min(days)}..{max(days)}")
    return EXIT_OK


_EXPERIMENT_FLAGS = ("trials", "test_per_trial", "fc_dims", "gru_hidden", "embed_dim",
                     "combine", "learning_rate", "batch_size", "epochs", "seed")


def _experiment_config(args) -> training.ExperimentConfig:
    settings: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(loaded) - {*_EXPERIMENT_FLAGS, "variants", "balanced_batches"}
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        settings.update(loaded)
    for name in _EXPERIMENT_FLAGS:
        value = getattr(args, name)
        if value is not None:
            settings[name] = value
    if args.variants is not None:
        settings["variants"] = tuple(args.variants.split(","))
    if args.balanced is not None:
        settings["balanced_batches"] = args.balanced
    try:
        return training.ExperimentConfig(**settings)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    datasets = _load_data_dir(args.data)
    config = _experiment_config(args)
    progress = None
    if args.verbose:
        def progress(row):
            who = row["cultivar"] or "pooled"
            print(f"  trial {row['trial']} {row['variant']:<12} {who:<10}"
                  f" final_loss={row['final_loss']:.4f} ({row['train_seconds']:.1f}s)")
    manifest = training.run_experiment(datasets, config, args.out, jobs=args.jobs,
                                       progress_fn=progress)
    print(f"trained {len(manifest['models'])} models; manifest at "
          f"{Path(args.out) / training.MANIFEST_FILE}")
    return EXIT_OK


def cmd_eval(args) -> int:
    datasets = _load_data_dir(args.data)
    report = evaluation.evaluate_experiment(
        args.run, datasets, out_dir=args.out, threshold=args.threshold,
        histogram_width=args.hist_width, export_curves=args.curves)
    summary = report["paths"]["summary"]
    print(summary.read_text(encoding="utf-8"), end="")
    print(f"report written to {summary.parent}")
    return EXIT_OK


def cmd_predict(args) -> int:
    spec, params, norm, meta = models.load_checkpoint(args.checkpoint)
    if norm is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no normalization stats")
    cultivar = args.cultivar
    if meta.get("cultivar") is not None:
        cultivar = cultivar or meta["cultivar"]
        if cultivar != meta["cultivar"]:
            raise ConfigError(
                f"checkpoint was trained on {meta['cultivar']!r} only, not {cultivar!r}")
        model_index = 0
    else:
        names = meta.get("cultivar_names", [])
        if cultivar is None:
            raise ConfigError(f"--cultivar is required for pooled checkpoints; one of {names}")
        if cultivar not in names:
            raise DataError(f"cultivar {cultivar!r} unknown to this checkpoint; one of {names}")
        model_index = names.index(cultivar)

    records, feature_names = parse_weather_csv(args.weather, schema=norm.feature_names)
    match = [(name, year, days) for name, year, days in records
             if name == cultivar and year == args.year]
    if not match:
        raise DataError(f"{args.weather}: no rows for cultivar {cultivar!r} year {args.year}")
    season = build_season(model_index, args.year, match[0][2], None, feature_names)
    from budbreak.data import apply_normalization
    season = apply_normalization(norm, season)

    probs = models.predict_season_probs(spec, params, season.features, model_index)
    day = evaluation.predict_budbreak_day(probs, args.threshold)
    shown = day if day is not None else "none"
    print(f"cultivar={cultivar} year={args.year} predicted_budbreak_doy={shown}")
    if args.out:
        evaluation.write_prob_curve(args.out, probs)
        print(f"probability curve written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = models.VARIANTS if args.variant == "all" else (args.variant,)
    reports = diagnostics.gradcheck_all(variants, combine=args.combine,
                                        h=args.step, tolerance=args.tolerance)
    ok = True
    for variant, report in reports.items():
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {variant:<13} max_rel_err={report.max_rel_err:.3e}")
        if args.verbose or not report.passed:
            print(report)
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "predict": cmd_predict,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, BudbreakError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
