"""Command-line entry point: ``tokentraj <command> [options]``.

Every command writes plain CSV/JSON artifacts under ``--out`` together with a
``manifest_<command>.json`` recording the config snapshot, seeds, input and
output hashes. Outputs are byte-identical for identical inputs and seeds.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, EmptyPanelError, NumericError, UndefinedMetricError
from .explainer import (
    DEFAULT_ETA,
    DEFAULT_SAMPLES,
    EXACT_MAX_UNITS,
    TARGETS,
    build_baseline_tokens,
    timeshap_tokens,
    timeshap_windows,
    token_variables_of,
)
from .metrics import (
    THRESHOLD_NAMES,
    added_explanation,
    bbc_cv,
    dxy_metric,
    slope_metric,
    smoothed_calibration_curve,
    threshold_labels,
    timepoint_slice,
)
from .pipeline import (
    Cohort,
    baseline_output,
    build_examples,
    load_cohort,
    prediction_rows,
    read_predictions,
    static_feature_names,
    static_features,
    write_predictions,
    _num,
)
from .seqmodel import TrajectoryModel, forward_trajectory
from .synth import SynthConfig, write_cohort
from .tokenizer import Vocabulary, fit_vocabulary, tokenize_stay
from .trainer import (
    Partition,
    PartitionScheme,
    TrainConfig,
    derive_seed,
    fit_static_baseline,
    load_config,
    make_partitions,
    train_fold,
)
from .transitions import CutoffTable, compute_cutoffs, detect_transitions

log = logging.getLogger("tokentraj")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    tool_version: str = __version__

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _rel(path, base) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(base).resolve())).as_posix()


def _file_entries(paths: dict, base) -> dict:
    return {k: {"path": _rel(p, base), "sha256": sha256_file(p)} for k, p in sorted(paths.items()) if p}


def _write_manifest(args, command, config, seeds, inputs, outputs):
    out = Path(args.out)
    RunManifest(command, config, seeds, _file_entries(inputs, out), _file_entries(outputs, out)).write(
        out / f"manifest_{command}.json")


# ---------------------------------------------------------------------------
# shared helpers


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None and cfg.seed != args.seed:
        cfg = TrainConfig(**{**asdict(cfg), "seed": args.seed})
    return cfg


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _inputs(args) -> dict:
    return {"dict": args.dict, "obs": args.obs, "outcomes": args.outcomes, "stays": args.stays,
            "config": args.config}


def _load(args, cfg) -> Cohort:
    _require(args, "dict", "obs", "outcomes")
    for name in ("dict", "obs", "outcomes", "stays"):
        p = getattr(args, name)
        if p is not None and not Path(p).exists():
            raise DataError(f"missing input file {p}")
    return load_cohort(args.dict, args.obs, args.outcomes, args.stays, cfg.window_hours)


def _jobs(args, cfg):
    repeats = [args.repeat] if args.repeat is not None else range(cfg.repeats)
    folds = [args.fold] if args.fold is not None else range(cfg.folds)
    for r in repeats:
        if not 0 <= r < cfg.repeats:
            raise UsageError(f"--repeat must be in [0, {cfg.repeats})")
    for f in folds:
        if not 0 <= f < cfg.folds:
            raise UsageError(f"--fold must be in [0, {cfg.folds})")
    return [(r, f) for r in repeats for f in folds]


def _scheme(cohort: Cohort, cfg: TrainConfig):
    return make_partitions(cohort.labels, cfg.repeats, cfg.folds, cfg.seed)


def _load_scheme(out, cohort: Cohort) -> PartitionScheme:
    """Partitions written by ``fit-vocab``; later commands never re-derive them."""
    path = Path(out) / "partitions.csv"
    if not path.exists():
        raise DataError(f"missing partitions file {path} (run fit-vocab)")
    roles: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["repeat", "fold", "patient_id", "role"]:
            raise DataError(f"{path}: unexpected header")
        for r, f, pid, role in reader:
            if pid not in cohort.labels:
                raise DataError(f"{path}: patient {pid!r} not in the cohort")
            roles.setdefault((int(r), int(f)), {"train": [], "val": [], "test": []})[role].append(pid)
    parts = [Partition(r, f, tuple(v["train"]), tuple(v["val"]), tuple(v["test"])) for (r, f), v in sorted(roles.items())]
    return PartitionScheme(max(p.repeat for p in parts) + 1, max(p.fold for p in parts) + 1, -1, parts)


def _get_part(scheme, r, f):
    try:
        return scheme.get(r, f)
    except KeyError:
        raise DataError(f"repeat {r} fold {f} not in partitions.csv") from None


def _vocab_path(out, r, f) -> Path:
    return Path(out) / "vocab" / f"r{r:02d}_f{f}.json"


def _model_path(out, r, f) -> Path:
    return Path(out) / "models" / f"r{r:02d}_f{f}.json"


def _load_vocab(out, r, f) -> Vocabulary:
    p = _vocab_path(out, r, f)
    if not p.exists():
        raise DataError(f"missing vocabulary file {p} (run fit-vocab)")
    return Vocabulary.load(p)


def _load_model(out, r, f) -> TrajectoryModel:
    p = _model_path(out, r, f)
    if not p.exists():
        raise DataError(f"missing model file {p} (run train)")
    return TrajectoryModel.load(p)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(x) if isinstance(x, (float, np.floating)) else x for x in row])


def _digest_ids(ids) -> str:
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    _require(args, "seed", "out")
    cfg = SynthConfig(seed=args.seed, **({"n": args.n} if args.n else {}))
    paths = write_cohort(cfg, args.out)
    _write_manifest(args, "synth", {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
                    {"seed": args.seed}, {}, paths)


def cmd_fit_vocab(args) -> None:
    _require(args, "seed", "out")
    cfg = _config(args)
    cohort = _load(args, cfg)
    scheme = _scheme(cohort, cfg)
    out = Path(args.out)
    (out / "vocab").mkdir(parents=True, exist_ok=True)
    part_path = out / "partitions.csv"
    _write_csv(part_path, ["repeat", "fold", "patient_id", "role"], scheme.to_rows())
    outputs = {"partitions": part_path}
    for r, f in _jobs(args, cfg):
        part = scheme.get(r, f)
        vocab = fit_vocabulary([cohort.windowed[p] for p in part.train], cohort.dictionary, cfg.bin_count)
        p = _vocab_path(out, r, f)
        vocab.save(p)
        outputs[f"vocab_r{r}_f{f}"] = p
        log.info("vocab r%d f%d: %d tokens", r, f, len(vocab))
    _write_manifest(args, "fit-vocab", asdict(cfg), {"seed": cfg.seed}, _inputs(args), outputs)


_JOB_STATE: dict = {}


def _train_job(job):
    r, f = job
    cohort, cfg, scheme, out = (_JOB_STATE[k] for k in ("cohort", "cfg", "scheme", "out"))
    part = _get_part(scheme, r, f)
    vocab = _load_vocab(out, r, f)
    seed = derive_seed(cfg.seed, r, f)
    stamp = {"vocab": vocab.digest(), "train": _digest_ids(part.train), "val": _digest_ids(part.val),
             "config": cfg.to_text(), "seed": seed, "tool_version": __version__}
    model_path = _model_path(out, r, f)
    stamp_path = model_path.with_suffix(".inputs.json")
    log_path = model_path.with_suffix(".log.csv")
    if model_path.exists() and log_path.exists() and stamp_path.exists():
        if json.loads(stamp_path.read_text(encoding="utf-8")) == stamp:
            log.info("r%d f%d: up to date, skipping", r, f)
            return r, f
    train = build_examples(cohort, vocab, part.train)
    val = build_examples(cohort, vocab, part.val)
    meta = {"vocab_hash": vocab.digest(), "seed": seed, "repeat": r, "fold": f, "config": asdict(cfg)}
    result = train_fold(train, val, cfg, len(vocab), seed=seed, meta=meta)
    result.model.save(model_path)
    _write_csv(log_path, ["repeat", "fold", "epoch", "train_loss", "val_dxy", "stopped"],
               ([r, f, e.epoch, float(e.train_loss), float(e.val_dxy), int(e.stopped)] for e in result.log))
    stamp_path.write_text(json.dumps(stamp, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return r, f


def cmd_train(args) -> None:
    _require(args, "seed", "out")
    cfg = _config(args)
    cohort = _load(args, cfg)
    out = Path(args.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    jobs = _jobs(args, cfg)
    for r, f in jobs:
        if not _vocab_path(out, r, f).exists():
            raise DataError(f"missing vocabulary file {_vocab_path(out, r, f)} (run fit-vocab)")
    _JOB_STATE.update(cohort=cohort, cfg=cfg, scheme=_load_scheme(out, cohort), out=out)
    if args.jobs > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(args.jobs, mp_context=mp.get_context("fork")) as ex:
            list(ex.map(_train_job, jobs))
    else:
        for job in jobs:
            _train_job(job)
    # aggregate every per-job log present, in (repeat, fold) order
    rows = []
    for p in sorted((out / "models").glob("r*_f*.log.csv")):
        with open(p, newline="", encoding="utf-8") as fh:
            rows.extend(list(csv.reader(fh))[1:])
    rows.sort(key=lambda x: (int(x[0]), int(x[1]), int(x[2])))
    log_path = out / "training_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repeat", "fold", "epoch", "train_loss", "val_dxy", "stopped"])
        w.writerows(rows)
    outputs = {"training_log": log_path}
    for r, f in jobs:
        outputs[f"model_r{r}_f{f}"] = _model_path(out, r, f)
    inputs = _inputs(args)
    inputs["partitions"] = out / "partitions.csv"
    inputs.update({f"vocab_r{r}_f{f}": _vocab_path(out, r, f) for r, f in jobs})
    _write_manifest(args, "train", asdict(cfg), {"seed": cfg.seed, **{f"r{r}_f{f}": derive_seed(cfg.seed, r, f)
                                                                      for r, f in jobs}}, inputs, outputs)


def _trained_jobs(args, cfg):
    out = Path(args.out)
    if args.repeat is not None or args.fold is not None:
        return _jobs(args, cfg)
    found = []
    for p in sorted((out / "models").glob("r*_f*.json")):
        if p.name.endswith(".inputs.json"):
            continue
        r, f = p.stem.split("_")
        found.append((int(r[1:]), int(f[1:])))
    if not found:
        raise DataError(f"no model files under {out / 'models'} (run train)")
    return sorted(found)


def cmd_predict(args) -> None:
    _require(args, "out")
    cfg = _config(args)
    cohort = _load(args, cfg)
    out = Path(args.out)
    scheme = _load_scheme(out, cohort)
    rows = []
    inputs = _inputs(args)
    inputs["partitions"] = out / "partitions.csv"
    for r, f in _trained_jobs(args, cfg):
        vocab = _load_vocab(out, r, f)
        model = _load_model(out, r, f)
        if model.meta.get("vocab_hash") not in (None, vocab.digest()):
            raise DataError(f"model r{r} f{f} was trained with a different vocabulary")
        inputs[f"model_r{r}_f{f}"] = _model_path(out, r, f)
        for ex in build_examples(cohort, vocab, _get_part(scheme, r, f).test):
            rows.extend(prediction_rows(r, f, ex.patient_id, ex.label, forward_trajectory(ex.token_sets, model),
                                        cfg.window_hours))
    rows.sort(key=lambda x: (x[0], x[2], x[3]))
    path = out / "predictions.csv"
    write_predictions(rows, path)
    _write_manifest(args, "predict", asdict(cfg), {"seed": cfg.seed}, inputs, {"predictions": path})


def cmd_baseline(args) -> None:
    _require(args, "seed", "out")
    cfg = _config(args)
    cohort = _load(args, cfg)
    out = Path(args.out)
    scheme = _load_scheme(out, cohort)
    variables = args.variables.split(",") if args.variables else None
    rows = []
    for r, f in _jobs(args, cfg):
        part = _get_part(scheme, r, f)
        fit_ids = part.train + part.val
        stays = [cohort.windowed[p] for p in fit_ids]
        cols = static_feature_names(cohort.dictionary, stays, variables)
        if not cols:
            raise DataError("no static variables for the baseline model")
        X = np.array([static_features(s, cols) for s in stays])
        names = [v if lv is None else f"{v}={lv}" for v, lv in cols]
        model = fit_static_baseline(X, [cohort.labels[p] for p in fit_ids], feature_names=names)
        for pid in part.test:
            rows.extend(prediction_rows(r, f, pid, cohort.labels[pid],
                                        baseline_output(model, cohort.windowed[pid], cols), cfg.window_hours))
    rows.sort(key=lambda x: (x[0], x[2], x[3]))
    path = out / "baseline_predictions.csv"
    write_predictions(rows, path)
    inputs = _inputs(args)
    inputs["partitions"] = out / "partitions.csv"
    _write_manifest(args, "baseline", asdict(cfg), {"seed": cfg.seed}, inputs, {"baseline_predictions": path})


def _timepoints(args, window_hours):
    step = window_hours
    n = int(math.floor(args.max_hours / step + 1e-9))
    if args.alignment == "admission":
        return [k * step for k in range(n + 1)]
    return [-k * step for k in range(n, -1, -1)]


def _panels(preds, t, alignment, window_hours, field):
    panels = {}
    for r, trajs in sorted(preds.items()):
        labels = {pid: tr.label for pid, tr in trajs.items()}
        try:
            panels[r] = timepoint_slice(trajs, labels, t, alignment, window_hours, field)
        except EmptyPanelError:
            continue
    return panels


def _mae_metric(k):
    def metric(values, labels):
        curve = smoothed_calibration_curve(values[:, k], threshold_labels(labels, k + 1))
        if math.isnan(curve.mae):
            raise UndefinedMetricError("empty calibration range")
        return curve.mae

    return metric


def cmd_evaluate(args) -> None:
    _require(args, "seed", "out")
    cfg = _config(args)
    out = Path(args.out)
    pred_path = out / "predictions.csv"
    preds = read_predictions(pred_path)
    base_path = out / "baseline_predictions.csv"
    base = read_predictions(base_path) if base_path.exists() else None
    wh = cfg.window_hours
    nb = args.n_boot
    rows = []
    n_defined = 0
    for i, t in enumerate(_timepoints(args, wh)):
        panels_e = _panels(preds, t, args.alignment, wh, "expected")
        if not panels_e:
            continue
        panels_q = _panels(preds, t, args.alignment, wh, "q")
        n_pat = len(set().union(*(set(p.patient_ids.tolist()) for p in panels_e.values())))
        seed = derive_seed(cfg.seed, i)
        metrics = [("dxy", lambda: bbc_cv(panels_e, dxy_metric, nb, seed)),
                   ("mean_slope", lambda: bbc_cv(panels_q, slope_metric, nb, seed))]
        if base is not None:
            panels_b = _panels(base, t, args.alignment, wh, "expected")
            metrics.append(("delta_dxy", lambda: added_explanation(panels_e, panels_b, dxy_metric, nb, seed)))
        if abs(t - args.t_hours) < 1e-9:
            for k, name in enumerate(THRESHOLD_NAMES):
                metrics.append((f"cal_mae_{name}", lambda k=k: bbc_cv(panels_q, _mae_metric(k), nb, seed)))
        for name, fn in metrics:
            try:
                ci = fn()
                rows.append([args.alignment, float(t), name, ci.point, ci.lo, ci.hi, n_pat])
                n_defined += 1
            except UndefinedMetricError as exc:
                log.warning("t=%s %s undefined: %s", t, name, exc)
                rows.append([args.alignment, float(t), name, math.nan, math.nan, math.nan, n_pat])
    if n_defined == 0:
        raise UndefinedMetricError("no metric defined at any timepoint")
    metrics_path = out / "metrics.csv"
    _write_csv(metrics_path, ["alignment", "t_hours", "metric", "point", "lo", "hi", "n_patients"], rows)

    # calibration curves at the requested timepoint, averaged over repeats
    curve_rows = []
    panels_q = _panels(preds, args.t_hours, args.alignment, wh, "q")
    if panels_q:
        for k, name in enumerate(THRESHOLD_NAMES):
            curves = [smoothed_calibration_curve(p.values[:, k], threshold_labels(p.labels, k + 1))
                      for _, p in sorted(panels_q.items())]
            grid = curves[0].grid
            mean_curve = np.mean([c.curve for c in curves], axis=0)
            n_local = np.min([c.n_local for c in curves], axis=0)
            for g, c, nl in zip(grid, mean_curve, n_local):
                curve_rows.append([name, float(g), float(c), int(nl)])
    curve_path = out / "calibration_curve.csv"
    _write_csv(curve_path, ["threshold", "grid_p", "curve", "n_local"], curve_rows)
    inputs = {"predictions": pred_path, "baseline_predictions": base_path if base is not None else None,
              "config": args.config}
    _write_manifest(args, "evaluate", {**asdict(cfg), "alignment": args.alignment, "n_boot": nb,
                                       "max_hours": args.max_hours, "t_hours": args.t_hours},
                    {"seed": cfg.seed}, inputs, {"metrics": metrics_path, "calibration_curve": curve_path})


def cmd_transitions(args) -> None:
    _require(args, "out")
    cfg = _config(args)
    out = Path(args.out)
    pred_path = out / "predictions.csv"
    preds = read_predictions(pred_path)
    repeat = args.repeat if args.repeat is not None else min(preds)
    if repeat not in preds:
        raise DataError(f"repeat {repeat} not in {pred_path}")
    trajs = {pid: tr.q for pid, tr in sorted(preds[repeat].items())}
    region = (args.region_start, args.region_end)
    table = CutoffTable.reference() if args.reference_cutoffs else compute_cutoffs(trajs, cfg.window_hours, region)
    for name, side in table.absent():
        log.warning("no %s differences for %s", side, name)
    cut_path = out / "cutoffs.csv"
    _write_csv(cut_path, ["threshold", "negative_cutoff", "positive_cutoff"], table.rows())
    events = []
    for pid, q in trajs.items():
        events.extend(detect_transitions(pid, q, table, cfg.window_hours, region))
    events.sort(key=lambda e: (e.patient_id, e.window, THRESHOLD_NAMES.index(e.threshold)))
    ev_path = out / "events.csv"
    _write_csv(ev_path, ["patient_id", "threshold", "t_hours", "delta_pct", "direction"],
               ([e.patient_id, e.threshold, float(e.t_hours), e.delta_pct, e.direction] for e in events))
    _write_manifest(args, "transitions", {**asdict(cfg), "repeat": repeat, "region": list(region),
                                          "reference_cutoffs": bool(args.reference_cutoffs)},
                    {"seed": cfg.seed}, {"predictions": pred_path, "config": args.config},
                    {"cutoffs": cut_path, "events": ev_path})


def cmd_explain(args) -> None:
    _require(args, "seed", "out", "patient", "t_hours")
    cfg = _config(args)
    cohort = _load(args, cfg)
    if args.patient not in cohort.windowed:
        raise DataError(f"unknown patient {args.patient!r}")
    out = Path(args.out)
    scheme = _load_scheme(out, cohort)
    if args.repeat is not None and args.fold is not None:
        r, f = args.repeat, args.fold
    else:
        candidates = [(p.repeat, p.fold) for p in scheme.partitions if args.patient in p.test
                      and (args.repeat is None or p.repeat == args.repeat)]
        trained = [job for job in candidates if _model_path(out, *job).exists()]
        if not trained:
            raise DataError(f"no trained model holds out patient {args.patient!r} (run train)")
        r, f = trained[0]
    vocab = _load_vocab(out, r, f)
    model = _load_model(out, r, f)
    k_float = args.t_hours / cfg.window_hours
    t_star = int(round(k_float))
    if abs(t_star - k_float) > 1e-9 or t_star < 0:
        raise UsageError(f"--t-hours must be a nonnegative multiple of {cfg.window_hours}")
    token_sets = tokenize_stay(cohort.windowed[args.patient], vocab)
    if t_star >= len(token_sets):
        raise DataError(f"patient {args.patient!r} has {len(token_sets)} windows; t*={t_star} is outside the stay")
    part = _get_part(scheme, r, f)
    baseline = build_baseline_tokens(tokenize_stay(cohort.windowed[p], vocab)[: cfg.window_limit]
                                     for p in part.train)
    if baseline.size == 0:
        raise DataError("no token reaches 50% prevalence in the training windows; the baseline token set is empty")
    seed = derive_seed(cfg.seed, r, f, t_star)
    win = timeshap_windows(model, token_sets, t_star, args.target, baseline, mode=args.mode,
                           eta=args.eta, m=args.samples, seed=seed)
    n_tok = len(set().union(*(set(token_sets[w].tolist()) for w in range(win.pruned_index, t_star + 1))))
    n_tok += int(win.pruned_index > 0)
    tok_mode = args.mode if n_tok <= EXACT_MAX_UNITS else "sampled"
    if tok_mode != args.mode:
        log.info("token level has %d units; using sampled mode", n_tok)
    tok = timeshap_tokens(model, token_sets, t_star, args.target, baseline, token_variables_of(vocab),
                          pruned_index=win.pruned_index, mode=tok_mode, m=args.samples, seed=seed + 1,
                          token_names=vocab.tokens)
    path = out / "attributions.csv"
    rows = [("window",) + r for r in win.rows(args.patient)] + [("token",) + r for r in tok.rows(args.patient)]
    _write_csv(path, ["level", "patient_id", "t_star", "target", "unit_kind", "unit", "phi", "mode", "se"], rows)
    inputs = _inputs(args)
    inputs.update(model=_model_path(out, r, f), vocab=_vocab_path(out, r, f), partitions=out / "partitions.csv")
    _write_manifest(args, "explain", {**asdict(cfg), "patient": args.patient, "t_hours": args.t_hours,
                                      "target": args.target, "mode": args.mode, "eta": args.eta,
                                      "samples": args.samples, "repeat": r, "fold": f,
                                      "f_x": win.f_x, "f_baseline": win.f_baseline},
                    {"seed": cfg.seed, "shapley": seed}, inputs, {"attributions": path})


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokentraj", description="Token-embedded ordinal trajectory models.")
    parser.add_argument("--version", action="version", version=f"tokentraj {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data=True, seed=True):
        if data:
            p.add_argument("--dict", help="variable dictionary CSV")
            p.add_argument("--obs", help="observations CSV or JSONL")
            p.add_argument("--outcomes", help="outcome labels CSV")
            p.add_argument("--stays", help="optional stay lengths CSV")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="master seed" + (" (required)" if seed else ""))
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--repeat", type=int)
        p.add_argument("--fold", type=int)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of patients")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-vocab", help="fit per-fold vocabularies")
    common(p)
    p.set_defaults(func=cmd_fit_vocab)

    p = sub.add_parser("train", help="train repeat/fold models")
    common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write trajectories of held-out patients")
    common(p, seed=False)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="static multinomial baseline predictions")
    common(p)
    p.add_argument("--variables", help="comma-separated static variables (default all)")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="bootstrap metric panels")
    common(p, data=False)
    p.add_argument("--alignment", choices=("admission", "discharge"), default="admission")
    p.add_argument("--max-hours", type=float, default=168.0)
    p.add_argument("--t-hours", type=float, default=None, help="calibration curve timepoint")
    p.add_argument("--n-boot", type=int, default=1000)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transitions", help="transition cutoffs and events")
    common(p, data=False, seed=False)
    p.add_argument("--region-start", type=float, default=10.0)
    p.add_argument("--region-end", type=float, default=168.0)
    p.add_argument("--reference-cutoffs", action="store_true", help="use the built-in reference table")
    p.set_defaults(func=cmd_transitions)

    p = sub.add_parser("explain", help="sequence Shapley attributions")
    common(p)
    p.add_argument("--patient")
    p.add_argument("--t-hours", type=float)
    p.add_argument("--target", choices=TARGETS, default="expected")
    p.add_argument("--mode", choices=("exact", "sampled"), default="exact")
    p.add_argument("--eta", type=float, default=DEFAULT_ETA)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.set_defaults(func=cmd_explain)
    return parser


def _setup_logging():
    level = os.environ.get("TOKENTRAJ_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def run(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.command == "evaluate" and args.t_hours is None:
            args.t_hours = 24.0 if args.alignment == "admission" else 0.0
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        if args.command != "synth":
            Path(args.out).mkdir(parents=True, exist_ok=True)
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())
