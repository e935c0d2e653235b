"""Command-line orchestration: generate | preprocess | train | evaluate |
baseline | explain | report.

Configuration comes from an optional JSON file plus flags (flags win).
Artifacts land under ``<out>/run-<id>/`` where the id hashes the resolved
configuration, so re-running the same configuration reuses the directory
and reproduces its tables byte for byte. Exit codes: 0 success, 1 runtime
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import baseline as lr
from . import metrics as M
from . import shapley
from . import synth
from .layers import load_model, save_model
from .pipeline import (DEFAULT_WINDOW_GRID, WindowConfig, build_windowed_dataset,
                       filter_rare_codes, load_cohort, save_cohort, split_patients,
                       write_manifest, fit_scaler)
from .training import (TrainConfig, TrainedModelSet, WindowResult, score_split,
                       train_window_sequence)


class ConfigError(ValueError):
    pass


_GENERATOR_KEYS = {f.name for f in dataclasses.fields(synth.GeneratorConfig)} - {"signal"}
_SIGNAL_KEYS = {f.name for f in dataclasses.fields(synth.SignalSpec)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"windows", "seed",
                                                                   "no_multitask", "no_transfer"}
_EXPLAIN_KEYS = {"budget", "background_size", "max_instances", "tasks"}
_TOP_KEYS = {"seed", "out", "cohort", "windows", "ablate", "threshold",
             "generator", "signal", "train", "explain"}

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "cohort": None,
    "windows": [[w.obs_months, w.pred_months] for w in DEFAULT_WINDOW_GRID],
    "ablate": [],
    "threshold": 0.5,
    "generator": {},
    "signal": {},
    "train": {},
    "explain": {"budget": 256, "background_size": 50, "max_instances": 20},
}


def _check_keys(mapping: dict, allowed: set, context: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown configuration key {context}{key!r}")


def _check_type(name: str, value, types) -> None:
    if not isinstance(value, types):
        raise ConfigError(f"configuration key {name!r} has wrong type "
                          f"({type(value).__name__})")


def load_config(path: str | None, overrides: dict) -> dict:
    """Resolved configuration: defaults, then file values, then flags."""
    config = json.loads(json.dumps(DEFAULTS))
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        _check_keys(loaded, _TOP_KEYS, "")
        for section, keys in (("generator", _GENERATOR_KEYS), ("signal", _SIGNAL_KEYS),
                              ("train", _TRAIN_KEYS), ("explain", _EXPLAIN_KEYS)):
            if section in loaded:
                _check_type(section, loaded[section], dict)
                _check_keys(loaded[section], keys, f"{section}.")
                config[section].update(loaded.pop(section))
        config.update(loaded)
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    _check_type("seed", config["seed"], int)
    _check_type("threshold", config["threshold"], (int, float))
    _check_type("windows", config["windows"], list)
    if isinstance(config["ablate"], str):
        config["ablate"] = [config["ablate"]]
    for a in config["ablate"]:
        if a not in ("no-multitask", "no-transfer"):
            raise ConfigError(f"unknown ablation {a!r} (use no-multitask or no-transfer)")
    return config


def parse_windows(spec) -> tuple[WindowConfig, ...]:
    if isinstance(spec, str):
        pairs = []
        for chunk in spec.split(","):
            sep = "/" if "/" in chunk else ":"
            obs, pred = chunk.split(sep)
            pairs.append((float(obs), float(pred)))
    else:
        pairs = [(float(o), float(p)) for o, p in spec]
    if not pairs:
        raise ConfigError("window grid is empty")
    return tuple(WindowConfig(o, p) for o, p in pairs)


def run_id(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir(config: dict) -> Path:
    d = Path(config["out"]) / f"run-{run_id(config)}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_resolved(config: dict, out: Path) -> None:
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


def _log(out: Path, message: str) -> None:
    line = f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}"
    print(line)
    with open(out / "run.log", "a") as fh:
        fh.write(line + "\n")


def _train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        windows=parse_windows(config["windows"]),
        seed=config["seed"],
        no_multitask="no-multitask" in config["ablate"],
        no_transfer="no-transfer" in config["ablate"],
        **{k: tuple(v) if isinstance(v, list) else v for k, v in config["train"].items()},
    )


def _generator_config(config: dict) -> synth.GeneratorConfig:
    signal = synth.SignalSpec(**config["signal"])
    return synth.GeneratorConfig(seed=config["seed"], signal=signal,
                                 **config["generator"])


def _cohort_path(config: dict, out: Path) -> Path:
    if config["cohort"]:
        path = Path(config["cohort"])
    else:
        path = out / "cohort.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"cohort file not found: {path} (run generate first "
                                f"or pass --cohort)")
    return path


def _checkpoint_name(wc: WindowConfig, task: str | None) -> str:
    stem = f"ckpt_{wc.tag()}"
    return f"{stem}.{task}.npz" if task else f"{stem}.npz"


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(config: dict, out: Path) -> int:
    gen = _generator_config(config)
    records, truths = synth.generate_cohort(gen)
    save_cohort(records, out / "cohort.jsonl")
    synth.save_ground_truth(truths, out / "ground_truth.jsonl")
    summary = synth.cohort_summary(records)
    (out / "cohort_summary.txt").write_text(synth.render_summary(summary))
    with open(out / "cohort_summary.json", "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
    _log(out, f"generate: {len(records)} patients -> {out / 'cohort.jsonl'}")
    return 0


def cmd_preprocess(config: dict, out: Path) -> int:
    records = load_cohort(_cohort_path(config, out))
    vocab = filter_rare_codes(records)
    membership = split_patients([r.patient_id for r in records], config["seed"])
    windows = parse_windows(config["windows"])
    scalers = {wc.tag(): fit_scaler(
        [r for r in records if membership[r.patient_id] == "train"], wc)
        for wc in windows}
    write_manifest(out / "manifest.json", membership, vocab, scalers)
    prevalence = {}
    for wc in windows:
        ds = build_windowed_dataset(records, wc, membership, vocab)
        prevalence[wc.tag()] = ds.prevalence()
    with open(out / "prevalence.json", "w") as fh:
        json.dump(prevalence, fh, indent=2, sort_keys=True)
    _log(out, f"preprocess: manifest + prevalence for {len(windows)} windows")
    return 0


def cmd_train(config: dict, out: Path) -> int:
    records = load_cohort(_cohort_path(config, out))
    tc = _train_config(config)
    trained = train_window_sequence(records, tc)
    history = {}
    checksums = {}
    for result in trained.results:
        tag = result.window.tag()
        if result.skipped:
            _log(out, f"train: window {tag} skipped (no training samples)")
            history[tag] = None
            continue
        if tc.no_multitask:
            for task in ("attrition", "outcome"):
                save_model(result.models[task], out / _checkpoint_name(result.window, task))
        else:
            save_model(result.models["attrition"], out / _checkpoint_name(result.window, None))
        history[tag] = {
            task: {phase: [e.to_dict() for e in epochs]
                   for phase, epochs in result.history[task].items()}
            for task in result.history
        }
        checksums[tag] = result.checksums
        _log(out, f"train: window {tag} done")
    with open(out / "history.json", "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
    with open(out / "checksums.json", "w") as fh:
        json.dump(checksums, fh, indent=2, sort_keys=True)
    return 0


def _load_trained(config: dict, out: Path, records) -> tuple[TrainedModelSet, list]:
    tc = _train_config(config)
    vocab = filter_rare_codes(records)
    membership = split_patients([r.patient_id for r in records], config["seed"])
    results, datasets = [], []
    for wc in tc.windows:
        plain = out / _checkpoint_name(wc, None)
        models = {}
        if plain.exists():
            m = load_model(plain)
            models = {"attrition": m, "outcome": m}
        else:
            for task in ("attrition", "outcome"):
                path = out / _checkpoint_name(wc, task)
                if path.exists():
                    models[task] = load_model(path)
        if not models:
            results.append(WindowResult(wc, {}, {}, {}, {}, skipped=True))
            datasets.append(None)
            continue
        results.append(WindowResult(wc, models, {}, {}, {}))
        datasets.append(build_windowed_dataset(records, wc, membership, vocab))
    trained = TrainedModelSet(results, tc, vocab, membership)
    return trained, datasets


def cmd_evaluate(config: dict, out: Path) -> int:
    records = load_cohort(_cohort_path(config, out))
    trained, datasets = _load_trained(config, out, records)
    if all(r.skipped for r in trained.results):
        raise FileNotFoundError(f"no checkpoints found under {out} (run train first)")
    reports = {"attrition": [], "outcome": []}
    for result, dataset in zip(trained.results, datasets):
        if result.skipped:
            continue
        for task in ("attrition", "outcome"):
            scores, labels = score_split(result.models[task], dataset.splits["test"], task)
            s = M.ScoredSet(scores, labels, task=task, window=result.window.tag())
            reports[task].append(M.evaluate_scores(
                s, result.window.obs_months, result.window.pred_months,
                threshold=config["threshold"]))
    for task, rows in reports.items():
        if rows:
            (out / f"metrics_{task}.csv").write_text(M.results_table(rows))
    with open(out / "metrics.json", "w") as fh:
        fh.write(M.reports_to_json(reports["attrition"] + reports["outcome"]))
    _log(out, f"evaluate: wrote metrics tables for {len(reports['attrition'])} windows")
    return 0


def cmd_baseline(config: dict, out: Path) -> int:
    records = load_cohort(_cohort_path(config, out))
    vocab = filter_rare_codes(records)
    membership = split_patients([r.patient_id for r in records], config["seed"])
    reports = {"attrition": [], "outcome": []}
    for wc in parse_windows(config["windows"]):
        ds = build_windowed_dataset(records, wc, membership, vocab)
        train, test = ds.splits["train"], ds.splits["test"]
        X_train, X_test = lr.flatten_split(train), lr.flatten_split(test)
        tasks = {
            "attrition": (train.y_attrition, np.ones(len(train), bool),
                          test.y_attrition, np.ones(len(test), bool)),
            "outcome": (train.y_outcome, train.outcome_mask,
                        test.y_outcome, test.outcome_mask),
        }
        for task, (ytr, mtr, yte, mte) in tasks.items():
            if len(np.unique(ytr[mtr])) < 2 or not mte.any():
                continue
            model = lr.train_logistic(X_train[mtr], ytr[mtr])
            scores = lr.predict_logistic(model, X_test[mte])
            s = M.ScoredSet(scores, yte[mte], task=f"lr_{task}", window=wc.tag())
            row = M.evaluate_scores(s, wc.obs_months, wc.pred_months,
                                    threshold=config["threshold"])
            if not model.converged:
                row.flags.append("lr_not_converged")
            reports[task].append(row)
    for task, rows in reports.items():
        if rows:
            (out / f"lr_metrics_{task}.csv").write_text(M.results_table(rows))
    with open(out / "lr_metrics.json", "w") as fh:
        fh.write(M.reports_to_json(reports["attrition"] + reports["outcome"]))
    _log(out, "baseline: wrote logistic-regression tables")
    return 0


def cmd_explain(config: dict, out: Path) -> int:
    records = load_cohort(_cohort_path(config, out))
    trained, datasets = _load_trained(config, out, records)
    live = [(r, d) for r, d in zip(trained.results, datasets) if not r.skipped]
    if not live:
        raise FileNotFoundError(f"no checkpoints found under {out} (run train first)")
    ex = config["explain"]
    trained.results = [r for r, _ in live]
    report = shapley.attribution_report(
        trained, [d for _, d in live], budget=int(ex["budget"]),
        background_size=int(ex["background_size"]),
        max_instances=int(ex["max_instances"]), seed=config["seed"])
    for task in ("attrition", "outcome"):
        if report.for_task(task):
            (out / f"shap_{task}.csv").write_text(
                shapley.render_attribution_table(report, task))
    (out / "shap.json").write_text(report.to_json())
    _log(out, "explain: wrote attribution tables")
    return 0


def cmd_report(config: dict, out: Path) -> int:
    sections = []
    for name, title in (("metrics_attrition.csv", "Attrition prediction"),
                        ("metrics_outcome.csv", "Weight-outcome prediction"),
                        ("lr_metrics_attrition.csv", "Logistic-regression baseline (attrition)"),
                        ("lr_metrics_outcome.csv", "Logistic-regression baseline (outcome)"),
                        ("shap_attrition.csv", "Top-5 attribution (attrition)"),
                        ("shap_outcome.csv", "Top-5 attribution (outcome)")):
        path = out / name
        if path.exists():
            sections.append(f"== {title} ==\n{path.read_text()}")
    if not sections:
        raise FileNotFoundError("nothing to report: run evaluate/baseline/explain first")
    (out / "report.txt").write_text("\n".join(sections))
    _log(out, f"report: {out / 'report.txt'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "explain": cmd_explain,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrinet",
        description="Attrition / weight-outcome prediction pipeline")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="random seed (overrides config)")
    parser.add_argument("--out", help="output root directory")
    parser.add_argument("--cohort", help="cohort JSONL path")
    parser.add_argument("--windows", help="window grid, e.g. 1/1.5,2/3")
    parser.add_argument("--ablate", action="append", default=None,
                        choices=["no-multitask", "no-transfer"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, {
            "seed": args.seed, "out": args.out, "cohort": args.cohort,
            "windows": args.windows, "ablate": args.ablate,
        })
        if isinstance(config["windows"], str):
            config["windows"] = [[w.obs_months, w.pred_months]
                                 for w in parse_windows(config["windows"])]
        parse_windows(config["windows"])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = run_dir(config)
    _write_resolved(config, out)
    try:
        return COMMANDS[args.command](config, out)
    except (ConfigError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
