"""Command-line entry point.

Commands: ``synth``, ``train``, ``crossval``, ``sweep``, ``report``. Settings
come from built-in defaults, then a JSON ``--config`` file, then flags. Every
command writes its resolved ``config.json`` next to its outputs, and all
paths are relative to ``--workdir``.

Exit codes:

===  =====================================================
0    success
2    invalid configuration or arguments
3    data ingestion or integrity failure
4    training failure (divergence, ordering)
5    report failure (missing artifacts, recomputation mismatch)
6    filesystem failure (unwritable output, unreadable file)
===  =====================================================
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Mapping, Sequence

import pandas as pd

from .data import (
    ConfigurationError,
    DataIntegrityError,
    IngestionError,
    SynthConfig,
    export_csv,
    load_directory,
    make_split_plans,
    record_years,
    synthesize_catchments,
)
from .evaluation import (
    cdf_table,
    comparison_table,
    dump_json,
    evaluate_predictions,
    read_predictions,
    write_predictions,
)
from .models import (
    ARCHITECTURES,
    DEFAULT_HYPERPARAMETERS,
    Hyperparameters,
    ModelSpec,
    model_manifest,
    save_checkpoints,
    write_manifest,
)
from .objectives import InvalidDataError, UndefinedScoreError
from .training import (
    OrderingError,
    TrainingConfig,
    TrainingError,
    cross_validate,
    grid_sweep,
    run_fold,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_REPORT, EXIT_IO = 0, 2, 3, 4, 5, 6

log = logging.getLogger("hydra_lstm")


class ReportError(RuntimeError):
    pass


DEFAULTS = {
    "synth": {"out": "data", "catchments": 6, "years": 10, "seed": 0, "synthetic": {}},
    "train": {
        "data": "data",
        "out": "runs/train",
        "architecture": "hydra",
        "seed": 0,
        "test_year": None,
        "hyperparameters": {},
        "training": {},
        "extra_variables": ["discharge_m3_s"],
    },
    "crossval": {
        "data": "data",
        "out": "runs/crossval",
        "architecture": "hydra",
        "seed": 0,
        "folds": 11,
        "hyperparameters": {},
        "training": {},
        "extra_variables": ["discharge_m3_s"],
    },
    "sweep": {
        "data": "data",
        "out": "runs/sweep",
        "architecture": "hydra",
        "seed": 0,
        "validation_years": None,
        "grid": None,
        "training": {},
    },
    "report": {"runs": [], "out": "report"},
}


def resolve_config(command: str, file_doc: Mapping | None, flags: Mapping) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    config = json.loads(json.dumps(DEFAULTS[command]))
    for source in (file_doc or {}, {k: v for k, v in flags.items() if v is not None}):
        unknown = sorted(set(source) - set(config))
        if unknown:
            raise ConfigurationError(f"{command}: unknown settings {unknown}")
        for key, value in source.items():
            if isinstance(config[key], dict) and isinstance(value, Mapping):
                config[key] = {**config[key], **value}
            else:
                config[key] = value
    return config


def _hyperparameters(config: Mapping) -> Hyperparameters:
    arch = config["architecture"]
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    base = DEFAULT_HYPERPARAMETERS[arch].__dict__
    try:
        return Hyperparameters(**{**base, **config["hyperparameters"]})
    except TypeError as exc:
        raise ConfigurationError(f"hyperparameters: {exc}") from exc


def _spec(config: Mapping) -> ModelSpec:
    return ModelSpec(
        config["architecture"],
        _hyperparameters(config),
        int(config["seed"]),
        tuple(config["extra_variables"]),
    )


def _training(config: Mapping) -> TrainingConfig:
    try:
        return TrainingConfig.from_dict(config["training"])
    except TypeError as exc:
        raise ConfigurationError(f"training: {exc}") from exc


def _out_dir(workdir: Path, config: Mapping) -> Path:
    out = workdir / config["out"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_synth(config: Mapping, workdir: Path, jobs: int = 1) -> Path:
    synth = SynthConfig.from_dict(config["synthetic"])
    datasets = synthesize_catchments(int(config["catchments"]), int(config["years"]), int(config["seed"]), synth)
    out = _out_dir(workdir, config)
    export_csv(datasets, out)
    resolved = dict(config, synthetic=synth.to_dict())
    dump_json(resolved, out / "config.json")
    return out


def _save_trained(trained, directory: Path, extra: Mapping | None = None) -> None:
    checkpoints = directory / "checkpoints"
    save_checkpoints(trained.model, checkpoints)
    trained.record.checkpoint = "checkpoints"
    manifest = model_manifest(trained.model, trained.spec, extra)
    manifest["normalization"] = trained.stats.to_dict()
    manifest["training"] = trained.config.to_dict()
    write_manifest(checkpoints / "manifest.json", manifest)
    dump_json(trained.record.to_dict(), directory / "record.json")
    dump_json(trained.record.timings(), directory / "timings.json")


def _reports_doc(reports) -> dict:
    return {label: r.to_dict() for label, r in sorted(reports.items())}


def cmd_train(config: Mapping, workdir: Path, jobs: int = 1) -> Path:
    spec, tc = _spec(config), _training(config)
    datasets = load_directory(workdir / config["data"])
    test = [int(config["test_year"])] if config["test_year"] is not None else None
    plan = make_split_plans(record_years(datasets), 1, test_years=test)[0]
    fold = run_fold(spec, datasets, plan, spec.seed, tc, jobs=jobs)
    out = _out_dir(workdir, config)
    dump_json(dict(config, resolved_spec=spec.to_dict(), resolved_training=tc.to_dict()), out / "config.json")
    _save_trained(fold.trained, out, {"split": plan.to_dict()})
    write_predictions(fold.predictions, out / "predictions.csv")
    dump_json({"aggregate": _reports_doc(fold.reports), "split": plan.to_dict()}, out / "report.json")
    return out


def cmd_crossval(config: Mapping, workdir: Path, jobs: int = 1) -> Path:
    spec, tc = _spec(config), _training(config)
    datasets = load_directory(workdir / config["data"])
    result = cross_validate(spec, datasets, int(config["folds"]), spec.seed, tc, jobs=jobs)
    out = _out_dir(workdir, config)
    dump_json(dict(config, resolved_spec=spec.to_dict(), resolved_training=tc.to_dict()), out / "config.json")
    folds_doc = []
    for fold in result.folds:
        fdir = out / "folds" / f"fold_{fold.split.fold_id:02d}"
        fdir.mkdir(parents=True, exist_ok=True)
        _save_trained(fold.trained, fdir, {"split": fold.split.to_dict()})
        dump_json(
            {"aggregate": _reports_doc(fold.reports), "split": fold.split.to_dict()},
            fdir / "report.json",
        )
        folds_doc.append(fold.split.to_dict())
    write_predictions(result.predictions, out / "predictions.csv")
    dump_json({"aggregate": _reports_doc(result.reports), "folds": folds_doc}, out / "report.json")
    return out


def cmd_sweep(config: Mapping, workdir: Path, jobs: int = 1) -> Path:
    tc = _training(config)
    datasets = load_directory(workdir / config["data"])
    years = record_years(datasets)
    val = config["validation_years"] or years[-2:]
    ranked = grid_sweep(config["architecture"], datasets, val, config["grid"], int(config["seed"]), tc)
    out = _out_dir(workdir, config)
    dump_json(dict(config, validation_years=list(val), resolved_training=tc.to_dict()), out / "config.json")
    winner = next((r for r in ranked if r["error"] is None), None)
    dump_json({"ranked": ranked, "winner": winner}, out / "sweep.json")
    if winner is None:
        raise TrainingError("every grid cell failed")
    return out


def _close(a, b, tol: float = 1e-10) -> bool:
    if a is None or b is None:
        return a is b
    if isinstance(a, float) or isinstance(b, float):
        return math.isclose(float(a), float(b), rel_tol=tol, abs_tol=tol)
    return a == b


def check_agreement(recomputed: Mapping, stored: Mapping, where: str) -> None:
    """Raise unless every stored aggregate and record matches the recomputation."""
    for label, doc in stored.items():
        if label not in recomputed:
            raise ReportError(f"{where}: model {label!r} has no rows in predictions.csv")
        mine = recomputed[label].to_dict()
        for key, value in doc["aggregate"].items():
            if not _close(mine["aggregate"].get(key), value):
                raise ReportError(f"{where}: {label} {key} = {value} but recomputes to {mine['aggregate'].get(key)}")
        if len(mine["records"]) != len(doc["records"]):
            raise ReportError(f"{where}: {label} record count differs")
        for a, b in zip(mine["records"], doc["records"]):
            for key, value in b.items():
                if not _close(a.get(key), value):
                    raise ReportError(f"{where}: {label} {b['catchment_id']}/{b['year']} {key} mismatch")


def cmd_report(config: Mapping, workdir: Path, jobs: int = 1) -> Path:
    runs = [workdir / r for r in config["runs"]]
    if not runs:
        raise ConfigurationError("report: no run directories given")
    missing = [str(r / name) for r in runs for name in ("predictions.csv", "report.json") if not (r / name).exists()]
    if missing:
        raise ReportError(f"missing run artifacts: {missing}")
    frames, seen = [], {}
    for name, run in zip(config["runs"], runs):
        frame = read_predictions(run / "predictions.csv")
        stored = json.loads((run / "report.json").read_text(encoding="utf-8"))["aggregate"]
        check_agreement(evaluate_predictions(frame), stored, str(run))
        for label in sorted(frame["label"].unique()):
            if label in seen:
                raise ReportError(f"model {label!r} appears in both {seen[label]} and {name}")
            seen[label] = str(name)
        frames.append(frame)
    frame = pd.concat(frames, ignore_index=True)
    reports = evaluate_predictions(frame)
    out = _out_dir(workdir, config)
    dump_json(dict(config), out / "config.json")
    comparison = comparison_table(reports)
    comparison.to_csv(out / "comparison.csv", index=False, float_format="%.17g", lineterminator="\n")
    cdf = cdf_table(reports)
    cdf.to_csv(out / "cdf.csv", index=False, float_format="%.17g", lineterminator="\n")
    hydro = out / "hydrographs"
    hydro.mkdir(exist_ok=True)
    cols = ["date", "observed", "q10", "q50", "q90", "clim_q10", "clim_q50", "clim_q90"]
    for (label, cid), part in frame.groupby(["label", "catchment_id"], sort=True):
        part.sort_values("date")[cols].to_csv(
            hydro / f"{label}_{cid}.csv", index=False, float_format="%.17g", lineterminator="\n"
        )
    # the written tables must agree with the raw rows they summarize
    reread = pd.read_csv(out / "comparison.csv")
    for row in reread.itertuples():
        if not _close(float(row.cqes), reports[row.model].aggregate["cqes"]):
            raise ReportError(f"comparison row for {row.model} does not match recomputation")
    dump_json({"aggregate": _reports_doc(reports), "sources": seen}, out / "report.json")
    return out


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hydra-lstm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--workdir", default=".", help="base directory for every relative path")
    parser.add_argument("--config", help="JSON file with settings for the command")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for folds or heads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic catchment CSVs")
    p.add_argument("--out")
    p.add_argument("--catchments", type=int)
    p.add_argument("--years", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--synthetic", type=_json_arg, help="generator settings as JSON")

    for name, text in (("train", "train on one split"), ("crossval", "leave-one-year-out evaluation")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--architecture", choices=ARCHITECTURES)
        p.add_argument("--seed", type=int)
        p.add_argument("--hyperparameters", type=_json_arg, help="overrides as JSON")
        p.add_argument("--training", type=_json_arg, help="training settings as JSON")
        p.add_argument("--extra-variables", dest="extra_variables", nargs="+")
        if name == "train":
            p.add_argument("--test-year", dest="test_year", type=int)
        else:
            p.add_argument("--folds", type=int)

    p = sub.add_parser("sweep", help="hyperparameter grid search")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--architecture", choices=ARCHITECTURES)
    p.add_argument("--seed", type=int)
    p.add_argument("--validation-years", dest="validation_years", type=int, nargs="+")
    p.add_argument("--grid", type=_json_arg, help="grid as JSON; default is the full search grid")
    p.add_argument("--training", type=_json_arg)

    p = sub.add_parser("report", help="comparison, CDF and hydrograph tables")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s"
    )
    flags = {k: v for k, v in vars(args).items() if k not in ("workdir", "config", "jobs", "verbose", "command")}
    try:
        file_doc = None
        if args.config:
            path = Path(args.workdir) / args.config
            try:
                file_doc = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
        config = resolve_config(args.command, file_doc, flags)
        out = COMMANDS[args.command](config, Path(args.workdir), args.jobs)
        log.info("wrote %s", out)
        return EXIT_OK
    except ConfigurationError as exc:
        code, msg = EXIT_CONFIG, exc
    except (IngestionError, DataIntegrityError, InvalidDataError) as exc:
        code, msg = EXIT_DATA, exc
    except (TrainingError, OrderingError) as exc:
        code, msg = EXIT_TRAINING, exc
    except (ReportError, UndefinedScoreError) as exc:
        code, msg = EXIT_REPORT, exc
    except OSError as exc:
        code, msg = EXIT_IO, exc
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
