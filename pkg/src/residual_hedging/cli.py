"""Command-line front end: simulate, build-samples, run, report, validate-config.

Every command that takes a config reads one YAML file (see ``config.py``).
A single master seed derives the seeds of every stage, so a config file plus
the package build reproduces all outputs byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or input,
3 ``run`` finished but at least one (feature model, objective) pair failed.
Failures print a one-line JSON summary to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd

from . import __version__
from . import data, evaluation, learner, market, neural
from .config import ExperimentConfig, derive_seed, effective_config, load_config
from .errors import ConfigError, HedgingError, SpecMismatchError

log = logging.getLogger("residual_hedging")

OBJECTIVE_ORDER = (learner.DIRECT, learner.RESIDUAL)


def build_info() -> dict:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        describe = out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        describe = "unknown"
    return {"package_version": __version__, "git_describe": describe or "unknown"}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if hasattr(x, "item"):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    (out / "effective_config.yaml").write_text(effective_config(cfg))
    return out


# -- stages -------------------------------------------------------------------

def load_source(cfg: ExperimentConfig) -> market.MarketPanel:
    """Simulate the configured panel, or ingest it from a canonical quote CSV."""
    src = cfg.source
    seed = derive_seed(cfg.seed, "simulate")
    lattice = src.lattice.lattice()
    if src.kind == "gbm":
        return market.simulate_gbm_panel(src.gbm.params(), src.days, lattice, seed=seed)
    if src.kind == "heston":
        return market.simulate_heston_panel(src.heston.params(), src.days, lattice, seed=seed,
                                            substeps=src.substeps)
    result = data.ingest_csv(src.path, rate=src.rate)
    quotes = result.quotes
    meta = {"model": "csv", "path": str(src.path), "rate": src.rate, "dropped": result.dropped}
    return market.MarketPanel(quotes, data.snapshots_from_quotes(quotes), meta)


def write_panel(panel: market.MarketPanel, path: Path, cfg: ExperimentConfig) -> Path:
    data.write_quotes_csv(panel, path)
    sidecar = dict(panel.metadata)
    sidecar.update({"master_seed": cfg.seed, "n_quotes": len(panel.quotes), "n_days": len(panel.snapshots),
                    "build": build_info()})
    _write_json(path.with_name(path.name + ".meta.json"), sidecar)
    return path


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    if cfg.source.kind == "csv":
        raise ConfigError("simulate needs source.kind 'gbm' or 'heston'")
    panel = load_source(cfg)
    out = _prepare_output(cfg)
    path = write_panel(panel, out / "quotes.csv", cfg)
    return {"quotes": str(path), "n_quotes": len(panel.quotes), "n_days": len(panel.snapshots),
            "dropped_quotes": panel.metadata.get("dropped_quotes", 0)}


def cmd_build_samples(cfg: ExperimentConfig) -> dict:
    panel = load_source(cfg)
    out = _prepare_output(cfg) / "samples"
    out.mkdir(exist_ok=True)
    written = {}
    for name in cfg.features:
        samples, skipped = data.samples_from_panel(panel, cfg.horizon_days, name, cfg.filters.policy(), cfg.kinds)
        path = data.write_samples_csv(samples, out / f"{name}_h{cfg.horizon_days}.csv")
        written[name] = {"path": str(path), "n_samples": len(samples), "skipped": skipped}
    return written


def ordered_pairs(features, objectives) -> list:
    """(feature, objective) pairs in report order: Fea2, Fea2-BS, Fea3, Fea3-BS, ..."""
    feats = [f for f in data.FEATURE_SETS if f in features]
    objs = [o for o in OBJECTIVE_ORDER if o in objectives]
    return [(f, o) for f in feats for o in objs]


def _label_key(label: str) -> tuple:
    residual = label.endswith("-BS")
    feature = label[:-3] if residual else label
    names = list(data.FEATURE_SETS)
    return (names.index(feature) if feature in names else len(names), feature, residual)


def _run_pair(job: dict) -> dict:
    """Train and evaluate one (feature model, objective) pair; never raises."""
    label = learner.Objective(job["objective"]).label(job["feature"])
    pair_dir = Path(job["pair_dir"])
    try:
        split = job["split"]
        plan = learner.TrainPlan(objective=learner.Objective(job["objective"]), **job["plan"])
        net_cfg = neural.NetConfig(input_dim=len(split.train.columns), **job["net"])
        model = learner.train(split.train, split.val, net_cfg, plan)
        model.metadata.update(job["pipeline"])
        pair_dir.mkdir(parents=True, exist_ok=True)
        learner.save_model(model, pair_dir / "model.bin")
        learner.write_training_log(model, pair_dir / "training_log.csv")
        report = evaluation.bucketed_report(model, split.test)
        evaluation.write_report_csv([report], pair_dir / "report.csv")
        evaluation.write_report_text([report], pair_dir / "report.txt")
        return {"label": label, "feature": job["feature"], "objective": job["objective"], "status": "ok",
                "report": report, "best_epoch": model.best_epoch, "epochs_run": len(model.history),
                "best_val_mse": model.best_val_mse}
    except Exception as exc:  # isolate the failure; the run records it and continues
        return {"label": label, "feature": job["feature"], "objective": job["objective"], "status": "failed",
                "error_type": type(exc).__name__, "message": str(exc),
                "traceback": traceback.format_exc(limit=5)}


def cmd_run(cfg: ExperimentConfig) -> dict:
    """Full experiment: data, samples, split, then train and evaluate every pair."""
    out = _prepare_output(cfg)
    panel = load_source(cfg)
    if cfg.source.kind != "csv":
        (out / "data").mkdir(exist_ok=True)
        write_panel(panel, out / "data" / "quotes.csv", cfg)
    (out / "samples").mkdir(exist_ok=True)
    last_date = int(panel.snapshots["date_index"].max())
    plan = cfg.split_plan(last_date)
    pipeline = {"horizon_days": cfg.horizon_days, "option_kinds": list(cfg.kinds),
                "filters": cfg.filters.model_dump(mode="json"), "source": cfg.source.kind,
                "rate": panel.metadata.get("rate", 0.0), "train_end_date": plan.train_end_date,
                "train_start_date": plan.train_start_date, "master_seed": cfg.seed}

    jobs, split_info, setup_failures = [], {}, []
    for feature in [f for f in data.FEATURE_SETS if f in cfg.features]:
        try:
            samples, skipped = data.samples_from_panel(panel, cfg.horizon_days, feature,
                                                       cfg.filters.policy(), cfg.kinds)
            split = data.make_split(samples, plan)
        except HedgingError as exc:
            for f, o in ordered_pairs([feature], cfg.objectives):
                setup_failures.append({"label": learner.Objective(o).label(f), "feature": f, "objective": o,
                                       "status": "failed", "error_type": type(exc).__name__,
                                       "message": str(exc)})
            continue
        data.write_samples_csv(split.test, out / "samples" / f"{feature}_test.csv")
        split_info[feature] = {"n_samples": len(samples), "skipped": skipped, "n_train": len(split.train),
                               "n_val": len(split.val), "n_test": len(split.test)}
        for objective in [o for o in OBJECTIVE_ORDER if o in cfg.objectives]:
            label = learner.Objective(objective).label(feature)
            jobs.append({
                "feature": feature, "objective": objective, "split": split,
                "pair_dir": str(out / "pairs" / label),
                # both objectives share init and shuffle seeds: a like-for-like comparison
                "net": {**cfg.net.model_dump(), "seed": derive_seed(cfg.seed, f"init/{feature}")},
                "plan": {**cfg.train.model_dump(), "shuffle_seed": derive_seed(cfg.seed, f"shuffle/{feature}")},
                "pipeline": {**pipeline, "feature_model": feature},
            })

    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_pair, jobs))
    else:
        results = [_run_pair(job) for job in jobs]
    results += setup_failures
    order = {lab: i for i, lab in enumerate(learner.Objective(o).label(f)
                                            for f, o in ordered_pairs(cfg.features, cfg.objectives))}
    results.sort(key=lambda r: order[r["label"]])

    reports = [r["report"] for r in results if r["status"] == "ok"]
    if reports:
        evaluation.write_report_text(reports, out / "summary.txt")
        evaluation.write_report_csv(reports, out / "summary.csv")
    summary = {
        "status": "ok" if all(r["status"] == "ok" for r in results) else "partial_failure",
        "pairs": [{k: v for k, v in r.items() if k not in ("report", "traceback")}
                  | ({"overall_gain": r["report"].overall_gain} if r["status"] == "ok" else {})
                  for r in results],
        "splits": split_info,
        "train_end_date": plan.train_end_date,
        "master_seed": cfg.seed,
        "build": build_info(),
    }
    _write_json(out / "run_summary.json", summary)
    return {"summary": summary, "reports": reports, "output_dir": str(out)}


def _report_samples(model: learner.TrainedModel, test_csv: Path, after_date):
    """Test samples for ``model`` from a sample CSV or a canonical quote CSV."""
    header = pd.read_csv(test_csv, nrows=0).columns
    if "dv" in header:
        samples = data.read_samples_csv(test_csv)
    else:
        meta = model.metadata
        sidecar = test_csv.with_name(test_csv.name + ".meta.json")
        rate = json.loads(sidecar.read_text()).get("rate", 0.0) if sidecar.is_file() else meta.get("rate", 0.0)
        quotes = data.ingest_csv(test_csv, rate=rate).quotes
        panel = market.MarketPanel(quotes, data.snapshots_from_quotes(quotes))
        filters = meta.get("filters", {})
        policy = data.FilterPolicy(filters.get("min_ttm_days", 14),
                                   tuple(filters.get("call_delta_range", (0.05, 0.95))),
                                   tuple(filters.get("put_delta_range", (-0.95, -0.05))))
        samples, _ = data.samples_from_panel(panel, int(meta.get("horizon_days", 1)),
                                             model.feature_spec.model_name, policy,
                                             tuple(meta.get("option_kinds", ("call",))))
    if after_date is not None:
        samples = samples.subset(samples.date_index > after_date)
    if len(samples.columns) != len(model.feature_spec.columns):
        raise SpecMismatchError(
            f"{test_csv} has {len(samples.columns)} feature columns, model {model.label} expects "
            f"{len(model.feature_spec.columns)}")
    return samples


def cmd_report(artifacts, test_csv, output_dir, after_date=None) -> dict:
    """Re-score saved models on a test file without retraining."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_csv = Path(test_csv)
    reports = []
    for path in artifacts:
        model = learner.load_model(path)
        samples = _report_samples(model, test_csv, after_date)
        report = evaluation.bucketed_report(model, samples)
        pair_dir = out / report.model_name
        pair_dir.mkdir(exist_ok=True)
        evaluation.write_report_csv([report], pair_dir / "report.csv")
        evaluation.write_report_text([report], pair_dir / "report.txt")
        reports.append(report)
    reports.sort(key=lambda r: _label_key(r.model_name))
    evaluation.write_report_text(reports, out / "summary.txt")
    evaluation.write_report_csv(reports, out / "summary.csv")
    return {"reports": reports, "output_dir": str(out)}


# -- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="residual-hedging", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "simulate a quote panel and write it as CSV"),
                        ("build-samples", "write hedge-sample CSVs for each configured feature model"),
                        ("run", "train and evaluate every (feature model, objective) pair"),
                        ("validate-config", "check a config and print it with defaults resolved")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", nargs="?", help="YAML config (defaults apply when omitted)")
        if name != "validate-config":
            s.add_argument("-o", "--output-dir", help="override output_dir from the config")
        if name == "run":
            s.add_argument("-j", "--workers", type=int, help="override the worker count")
    r = sub.add_parser("report", help="re-score saved models on a test CSV")
    r.add_argument("artifacts", nargs="+", help="model.bin files written by run")
    r.add_argument("--test", required=True, help="sample CSV or canonical quote CSV")
    r.add_argument("-o", "--output-dir", required=True)
    r.add_argument("--after-date", type=int, help="only score samples dated after this trading day")
    return p


def _fail(command, exc, code) -> int:
    print(json.dumps({"status": "error", "command": command, "error_type": type(exc).__name__,
                      "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    try:
        if cmd == "report":
            res = cmd_report(args.artifacts, args.test, args.output_dir, args.after_date)
            print(json.dumps({"status": "ok", "output_dir": res["output_dir"],
                              "overall_gain": {r.model_name: r.overall_gain for r in res["reports"]}}))
            return 0
        overrides = {}
        if getattr(args, "output_dir", None):
            overrides["output_dir"] = args.output_dir
        if getattr(args, "workers", None):
            overrides["workers"] = args.workers
        cfg = load_config(args.config, overrides)
        if cmd == "validate-config":
            sys.stdout.write(effective_config(cfg))
            return 0
        if cmd == "simulate":
            print(json.dumps({"status": "ok", **cmd_simulate(cfg)}))
            return 0
        if cmd == "build-samples":
            print(json.dumps({"status": "ok", "samples": cmd_build_samples(cfg)}))
            return 0
        res = cmd_run(cfg)
        summary = res["summary"]
        print(json.dumps({"status": summary["status"], "output_dir": res["output_dir"],
                          "pairs": summary["pairs"]}, default=_jsonable))
        if summary["status"] != "ok":
            failed = [p["label"] for p in summary["pairs"] if p["status"] != "ok"]
            print(json.dumps({"status": "error", "command": cmd, "error_type": "PairFailure",
                              "message": f"failed pairs: {failed}"}), file=sys.stderr)
            return 3
        return 0
    except (ConfigError, SpecMismatchError, FileNotFoundError) as exc:
        return _fail(cmd, exc, 2)
    except (HedgingError, OSError, ValueError) as exc:
        return _fail(cmd, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
