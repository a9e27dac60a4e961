"""Command-line front end: simulate, fit, texture, features, stats, train,
evaluate and report.

Exit codes: 0 success, 1 partial failure (some subjects failed), 2 usage or
configuration error. Every command writes ``manifest_<command>.json`` into
its output directory, also when it fails.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .features import (PlanError, SubjectFits, assemble_table, fit_plan, fit_subjects,
                       split_feature_kinds, subject_features)
from .fitting import FitConfig, load_parameter_map, save_parameter_map
from .ml import (TASKS, LinearModel, ModelError, TrainConfig, default_config, evaluate,
                 predict_linear, predict_logistic, run_experiment, task_target)
from .models import MODELS
from .phantom import CohortConfig, PhantomConfigError, generate_cohort
from .stats import StatsError, rank_features, shapiro_wilk, write_ranking_csv
from .texture import TextureConfig, raw_b0
from .volume_io import (ORGANS, DatasetError, list_subjects, read_dataset, read_feature_table,
                        write_feature_table)

log = logging.getLogger("fetalfit")

OK, PARTIAL, USAGE = 0, 1, 2
TASK_UNITS = {"ga": ("GA at delivery", "weeks"), "interval": ("scan to delivery", "weeks"),
              "weight": ("baby weight", "g")}


class ConfigError(ValueError):
    pass


class RunManifest:
    """Record of one command invocation; written even when the command fails."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.started = time.perf_counter()
        params = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                  if k not in ("func",)}
        self.params = params
        self.config_hash = hashlib.sha256(json.dumps(params, sort_keys=True, default=str)
                                          .encode()).hexdigest()
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.seed = getattr(args, "seed", None)
        self.status = "running"
        self.exit_code = None
        self.error = None

    def add_output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def write(self, out_dir) -> Path | None:
        if out_dir is None:
            return None
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"manifest_{self.command}.json"
        doc = {"command": self.command, "tool_version": __version__,
               "config_hash": self.config_hash, "parameters": self.params, "seed": self.seed,
               "inputs": self.inputs, "outputs": self.outputs, "status": self.status,
               "exit_code": self.exit_code, "error": self.error,
               "wall_time_s": round(time.perf_counter() - self.started, 3)}
        path.write_text(json.dumps(doc, indent=1, default=str))
        return path


# ---------------------------------------------------------------------------
# config helpers

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _section(doc: dict, name: str, cls) -> dict:
    sec = doc.get(name, {})
    allowed = {f.name for f in fields(cls)}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return dict(sec)


def _models(arg: str) -> list[str]:
    return list(MODELS) if arg == "all" else [arg]


def _organs(arg: str) -> list[str]:
    return list(ORGANS) if arg == "all" else [arg]


def _fit_config_for(doc: dict):
    base = _section(doc, "fit", FitConfig)
    base.pop("model", None)
    bounds = base.pop("bounds", None) or {}

    def make(model):
        names = MODELS[model].param_names
        own = {k: tuple(v) for k, v in bounds.items() if k in names}
        return FitConfig(model, bounds=own, **base)
    return make


def _texture_config(doc: dict) -> TextureConfig:
    sec = _section(doc, "texture", TextureConfig)
    if "offsets" in sec:
        sec["offsets"] = tuple(tuple(o) for o in sec["offsets"])
    if sec.get("value_range") is not None:
        sec["value_range"] = tuple(sec["value_range"])
    return TextureConfig(**sec)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, manifest: RunManifest) -> int:
    doc = _load_config(args.config)
    sec = doc.get("phantom", {})
    if args.n_control is not None:
        sec["n_control"] = args.n_control
    if args.n_fgr is not None:
        sec["n_fgr"] = args.n_fgr
    if args.snr is not None:
        sec["snr"] = args.snr
    sec["seed"] = args.seed
    try:
        config = CohortConfig.from_json(sec)
    except TypeError as exc:
        raise ConfigError(f"invalid phantom config: {exc}") from None
    for path in generate_cohort(config, args.out):
        manifest.add_output(path)
    manifest.add_output(Path(args.out) / "cohort.json")
    log.info("wrote %d subjects to %s", config.n_control + config.n_fgr, args.out)
    return OK


def _read_subjects(dataset, manifest):
    """Load every subject; failures are logged and reported, not raised."""
    good, failed = [], []
    for path in list_subjects(dataset):
        manifest.inputs.append(str(path))
        try:
            good.append((path, read_dataset(path)))
        except (DatasetError, ValueError, OSError) as exc:
            log.error("%s: %s", path.name, exc)
            failed.append(path.name)
    return good, failed


def _group_by_protocol(subjects):
    groups: dict[tuple, list] = {}
    for path, (protocol, volume, masks, record) in subjects:
        groups.setdefault(tuple(protocol.pairs), []).append((path, protocol, volume, masks, record))
    return groups.values()


def cmd_fit(args, manifest: RunManifest) -> int:
    doc = _load_config(args.config)
    config_for = _fit_config_for(doc)
    plan = fit_plan(_models(args.model), _organs(args.organ), args.decide_any_organ)
    if not plan:
        raise ConfigError("nothing to fit: DECIDE is placenta-only unless --decide-any-organ")
    subjects, failed = _read_subjects(args.dataset, manifest)
    out = Path(args.out)
    for group in _group_by_protocol(subjects):
        protocol = group[0][1]
        fits = fit_subjects(protocol, [(v, m, r) for _, _, v, m, r in group], plan, config_for,
                            threads=args.threads)
        for sf in fits:
            sdir = out / sf.record.id
            for pmap in sf.maps.values():
                manifest.add_output(save_parameter_map(pmap, sdir))
            roi = {f"{organ}/{model}": {"params": dict(res.params._asdict()), "sse": res.sse,
                                        "iterations": res.iterations, "converged": res.converged}
                   for (organ, model), res in sf.roi.items()}
            roi_path = sdir / "roi_fits.json"
            roi_path.write_text(json.dumps(roi, indent=1))
            manifest.add_output(roi_path)
    if failed:
        log.error("%d subject(s) failed: %s", len(failed), ", ".join(failed))
        return PARTIAL
    return OK


def _load_subject_fits(dataset, maps_dir, manifest):
    """SubjectFits rebuilt from a dataset plus saved parameter maps."""
    subjects, failed = _read_subjects(dataset, manifest)
    out = []
    maps_dir = Path(maps_dir)
    for path, (protocol, volume, masks, record) in subjects:
        sdir = maps_dir / record.id
        if not sdir.is_dir():
            log.error("%s: no parameter maps under %s", record.id, sdir)
            failed.append(record.id)
            continue
        sf = SubjectFits(record, {m.organ: m for m in masks}, b0=raw_b0(volume, protocol))
        for meta in sorted(sdir.glob("param_*.json")):
            organ, model = meta.stem[len("param_"):].split("_", 1)
            if organ in sf.masks:
                sf.maps[(organ, model)] = load_parameter_map(sdir, organ, model)
        out.append(sf)
    return out, failed


def cmd_features(args, manifest: RunManifest) -> int:
    doc = _load_config(args.config)
    kind = "summaries" if args.no_texture else args.features
    tex_config = _texture_config(doc)
    fits, failed = _load_subject_fits(args.dataset, args.maps or args.out, manifest)
    if not fits:
        raise DatasetError("no subject could be loaded")
    params = tuple(args.texture_params.split(",")) if args.texture_params else None
    dicts = [subject_features(sf, kind, texture_params=params or ("f", "Dstar"),
                              texture_config=tex_config) for sf in fits]
    table = assemble_table([sf.record for sf in fits], dicts)
    path = write_feature_table(table, Path(args.out) / "features.csv")
    manifest.add_output(path)
    log.info("feature table: %d subjects x %d features", len(table.labels), len(table.feature_names))
    return PARTIAL if failed else OK


def _kind_columns(table, kind: str) -> list[str]:
    summ, tex = split_feature_kinds(table.feature_names)
    return {"summaries": summ, "haralick": tex, "combined": table.feature_names}[kind]


def _write_csv(path, header, rows, manifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return manifest.add_output(path)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _stats_outputs(table, out: Path, manifest, top: int = 9, correction=None):
    from . import plotting

    ranked, significant = rank_features(table, pooled=False, correction=correction)
    manifest.add_output(write_ranking_csv(ranked, out / "ranking.csv"))
    manifest.add_output(write_ranking_csv(significant, out / "significant.csv"))
    cohorts = table.cohorts
    norm_rows = []
    for name in table.feature_names:
        col = table.column(name)
        row = [name]
        for c in ("control", "fgr"):
            v = col[(cohorts == c) & np.isfinite(col)]
            try:
                res = shapiro_wilk(v)
                row += [_fmt(res.statistic), _fmt(res.p_value)]
            except StatsError:
                row += ["", ""]
        norm_rows.append(row)
    _write_csv(out / "normality.csv", ["feature", "W control", "p control", "W fgr", "p fgr"],
               norm_rows, manifest)
    shown = [r.feature for r in ranked[:top] if math.isfinite(r.p)]
    if shown:
        values = {}
        for name in shown:
            col = table.column(name)
            values[name] = (col[cohorts == "control"], col[cohorts == "fgr"])
        manifest.add_output(plotting.cohort_boxplots(values, out / "top_features.svg"))
    return ranked, significant


def cmd_stats(args, manifest: RunManifest) -> int:
    manifest.inputs.append(str(args.table))
    table = read_feature_table(args.table)
    table = table.select(_kind_columns(table, args.features))
    _, significant = _stats_outputs(table, Path(args.out), manifest,
                                    correction="bh" if args.bh else None)
    log.info("%d of %d features significant at p < 0.05", len(significant),
             len(table.feature_names))
    return OK


def _train_config(args, doc) -> TrainConfig:
    base = default_config(args.task, args.features)
    sec = _section(doc, "train", TrainConfig)
    sec.setdefault("seed", args.seed)
    if getattr(args, "strength", None) is not None:
        sec["strength"] = args.strength
    params = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    params.update(sec)
    return TrainConfig(**params)


def _experiment_outputs(result, task: str, out: Path, manifest, prefix: str = ""):
    from . import plotting

    tag = f"{prefix}{task}"
    manifest.add_output(result.model.save(out / f"model_{tag}.json"))
    rep = out / f"report_{tag}.json"
    rep.write_text(json.dumps(result.summary(), indent=1, default=float))
    manifest.add_output(rep)
    _write_csv(out / f"predictions_{tag}.csv", ["id", "true", "predicted"],
               [[i, _fmt(t), _fmt(p)] for i, t, p in
                zip(result.test_ids, result.test_truth, result.test_predictions)], manifest)
    _write_csv(out / f"cv_{tag}.csv", ["fold", "score"],
               [[k, _fmt(s)] for k, s in enumerate(result.cv.scores)], manifest)
    _write_csv(out / f"rfecv_{tag}.csv", ["n_features", "mean_cv_score"],
               [[c, _fmt(s)] for c, s in zip(result.rfecv.counts, result.rfecv.cv_scores)], manifest)
    ylabel = "mean cv accuracy" if task == "classify" else "mean cv -rmse"
    manifest.add_output(plotting.rfecv_curve(result.rfecv.counts, result.rfecv.cv_scores,
                                             result.rfecv.n_selected, out / f"rfecv_{tag}.svg",
                                             ylabel))
    if task == "classify":
        manifest.add_output(plotting.confusion_bars(result.test.confusion,
                                                    out / f"confusion_{tag}.svg"))
    else:
        label, units = TASK_UNITS[task]
        manifest.add_output(plotting.predicted_vs_true(result.test_truth, result.test_predictions,
                                                       out / f"predicted_vs_true_{tag}.svg",
                                                       label, units))


def cmd_train(args, manifest: RunManifest) -> int:
    doc = _load_config(args.config)
    manifest.inputs.append(str(args.table))
    table = read_feature_table(args.table)
    config = _train_config(args, doc)
    result = run_experiment(table, args.task, config, _kind_columns(table, args.features))
    _experiment_outputs(result, args.task, Path(args.out), manifest)
    t = result.test
    if args.task == "classify":
        log.info("test accuracy %.3f sensitivity %s specificity %s; cv %.3f +- %.3f",
                 t.accuracy, t.sensitivity, t.specificity, result.cv.mean, result.cv.std)
    else:
        log.info("test rmse %.3f; cv rmse %.3f +- %.3f", t.rmse, result.cv.mean, result.cv.std)
    return OK


def cmd_evaluate(args, manifest: RunManifest) -> int:
    manifest.inputs += [str(args.model_path), str(args.table)]
    model = LinearModel.load(args.model_path)
    table = read_feature_table(args.table)
    missing = [n for n in model.feature_names if n not in table.feature_names]
    if missing:
        raise DatasetError(f"table lacks model features: {missing[:5]}")
    X = table.select(model.feature_names).rows
    # absent entries fall back to the training centre (a zero standardized value)
    X = np.where(np.isfinite(X), X, model.center)
    task = args.task
    if model.task == "classification":
        task = "classify"
    elif task == "classify":
        raise ConfigError("a regression model needs --task ga, interval or weight")
    y = task_target(table, task)
    report = evaluate(model, X, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "evaluation.json"
    path.write_text(json.dumps(report.to_json(), indent=1))
    manifest.add_output(path)
    if model.task == "classification":
        prob, cls = predict_logistic(model, X)
        rows = [[r.id, int(t), _fmt(p), int(c)] for r, t, p, c in zip(table.labels, y, prob, cls)]
        _write_csv(out / "predictions.csv", ["id", "true", "p_control", "predicted"], rows, manifest)
    else:
        pred = predict_linear(model, X)
        rows = [[r.id, _fmt(t), _fmt(p)] for r, t, p in zip(table.labels, y, pred)]
        _write_csv(out / "predictions.csv", ["id", "true", "predicted"], rows, manifest)
    return OK


def cmd_report(args, manifest: RunManifest) -> int:
    """Ranking plus every classification and regression experiment with figures."""
    doc = _load_config(args.config)
    manifest.inputs.append(str(args.table))
    table = read_feature_table(args.table)
    out = Path(args.out)
    _stats_outputs(table, out, manifest)
    summ, tex = split_feature_kinds(table.feature_names)
    rows = []
    for features, cols in (("summaries", summ), ("haralick", tex)):
        if not cols:
            continue
        for task in TASKS:
            ns = argparse.Namespace(task=task, features=features, seed=args.seed, strength=None)
            config = _train_config(ns, doc)
            try:
                result = run_experiment(table, task, config, cols)
            except (ModelError, StatsError) as exc:
                log.warning("%s/%s skipped: %s", features, task, exc)
                continue
            _experiment_outputs(result, task, out, manifest, prefix=f"{features}_")
            t = result.test
            rows.append([features, task, len(result.selected), _fmt(result.cv.mean),
                         _fmt(result.cv.std), _fmt(t.accuracy), _fmt(t.sensitivity),
                         _fmt(t.specificity), _fmt(t.rmse)])
    _write_csv(out / "summary.csv", ["features", "task", "n_selected", "cv_mean", "cv_std",
                                     "test_accuracy", "test_sensitivity", "test_specificity",
                                     "test_rmse"], rows, manifest)
    return OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fetalfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=Path, help="JSON config with optional sections "
                       "phantom, fit, texture, train")
        return p

    p = common(sub.add_parser("simulate", help="generate a phantom cohort"))
    p.add_argument("--n-control", type=int)
    p.add_argument("--n-fgr", type=int)
    p.add_argument("--snr", type=float)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("fit", help="ROI and voxelwise model fits"))
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--model", choices=list(MODELS) + ["all"], default="all")
    p.add_argument("--organ", choices=list(ORGANS) + ["all"], default="all")
    p.add_argument("--decide-any-organ", action="store_true",
                   help="also fit DECIDE outside the placenta")
    p.add_argument("--threads", type=int, help="worker threads (default FETALFIT_THREADS)")
    p.set_defaults(func=cmd_fit)

    for name, helptext in (("features", "build the feature table"),
                           ("texture", "Haralick features only (alias of features)")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--dataset", type=Path, required=True)
        p.add_argument("--maps", type=Path, help="directory written by fit (default --out)")
        p.add_argument("--features", choices=("summaries", "haralick", "combined"),
                       default="haralick" if name == "texture" else "combined")
        p.add_argument("--no-texture", action="store_true")
        p.add_argument("--texture-params", help="comma-separated map parameters for texture")
        p.set_defaults(func=cmd_features)

    p = common(sub.add_parser("stats", help="rank features by control vs FGR t-test"))
    p.add_argument("--table", type=Path, required=True)
    p.add_argument("--features", choices=("summaries", "haralick", "combined"), default="combined")
    p.add_argument("--bh", action="store_true", help="Benjamini-Hochberg adjusted significance")
    p.set_defaults(func=cmd_stats)

    p = common(sub.add_parser("train", help="train and test a classifier or regressor"))
    p.add_argument("--table", type=Path, required=True)
    p.add_argument("--task", choices=list(TASKS), default="classify")
    p.add_argument("--features", choices=("summaries", "haralick", "combined"), default="summaries")
    p.add_argument("--strength", type=float, help="C (classify) or alpha (regression)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="apply a saved model to a feature table"))
    p.add_argument("--table", type=Path, required=True)
    p.add_argument("--model-path", type=Path, required=True)
    p.add_argument("--task", choices=list(TASKS), default="classify")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("report", help="stats plus all experiments, with SVG figures"))
    p.add_argument("--table", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    manifest = RunManifest(command, args)
    code = USAGE
    try:
        code = args.func(args, manifest)
    except (ConfigError, PhantomConfigError, PlanError) as exc:
        log.error("configuration error: %s", exc)
        manifest.error = str(exc)
        code = USAGE
    except (DatasetError, ModelError, StatsError, OSError, ValueError) as exc:
        log.error("%s failed: %s", command, exc)
        manifest.error = str(exc)
        code = PARTIAL
    finally:
        manifest.exit_code = code
        manifest.status = "ok" if code == OK else ("partial" if code == PARTIAL else "error")
        manifest.write(getattr(args, "out", None))
    return code


if __name__ == "__main__":
    sys.exit(main())
