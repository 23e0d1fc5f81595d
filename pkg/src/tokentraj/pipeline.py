"""Glue between file inputs, per-fold artifacts and prediction tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .metrics import THRESHOLD_NAMES
from .schema import (
    TimeWindowedStay,
    VariableDictionary,
    load_dictionary,
    load_observations,
    load_outcomes,
    load_stay_lengths,
    window_stays,
)
from .seqmodel import TrajectoryModel, TrajectoryOutput, forward_trajectory
from .tokenizer import Vocabulary, tokenize_stay, to_float
from .trainer import BaselineModel, Example

PRED_HEADER = (["repeat", "fold", "patient_id", "window", "t_hours", "gose"]
               + [f"q_{t}" for t in THRESHOLD_NAMES] + [f"p{i}" for i in range(7)] + ["expected"])


@dataclass
class Cohort:
    dictionary: VariableDictionary
    windowed: dict[str, TimeWindowedStay]
    labels: dict[str, int]


def load_cohort(dict_path, obs_path, outcomes_path, stays_path=None, window_hours: float = 2.0) -> Cohort:
    dictionary = load_dictionary(dict_path)
    lengths = load_stay_lengths(stays_path) if stays_path else None
    stays = load_observations(obs_path, dictionary, lengths)
    labels = {o.patient_id: o.gose_index for o in load_outcomes(outcomes_path)}
    unlabeled = [s.patient_id for s in stays if s.patient_id not in labels]
    if unlabeled:
        raise DataError(f"{len(unlabeled)} patients without outcome label, e.g. {unlabeled[0]!r}")
    stays = [s for s in stays if s.patient_id in labels]
    windowed = {w.patient_id: w for w in window_stays(stays, window_hours, None, dictionary)}
    missing = [p for p in labels if p not in windowed]
    if missing:
        raise DataError(f"{len(missing)} labelled patients without observations, e.g. {missing[0]!r}")
    return Cohort(dictionary, windowed, labels)


def build_examples(cohort: Cohort, vocab: Vocabulary, ids: Iterable[str]) -> list[Example]:
    return [Example(pid, tokenize_stay(cohort.windowed[pid], vocab), cohort.labels[pid]) for pid in ids]


def prediction_rows(repeat: int, fold: int, patient_id: str, label: int, out: TrajectoryOutput,
                    window_hours: float):
    for t in range(len(out)):
        yield ([repeat, fold, patient_id, t, _num(t * window_hours), label]
               + [_num(x) for x in out.q[t]] + [_num(x) for x in out.p[t]] + [_num(out.expected[t])])


def _num(x) -> str:
    """Shortest round-trip text for a float; integral values without ``.0``."""
    x = float(x)
    if not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def write_predictions(rows: Iterable[list], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PRED_HEADER)
        writer.writerows(rows)


@dataclass
class StoredTrajectory:
    q: np.ndarray
    p: np.ndarray
    expected: np.ndarray
    label: int
    fold: int


def read_predictions(path) -> dict[int, dict[str, StoredTrajectory]]:
    """``{repeat: {patient_id: trajectory}}`` from a predictions CSV."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing predictions file {path}")
    acc: dict[int, dict[str, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PRED_HEADER:
            raise DataError(f"{path}: unexpected header")
        for row in reader:
            r, f, pid, w = int(row[0]), int(row[1]), row[2], int(row[3])
            acc.setdefault(r, {}).setdefault(pid, []).append((w, f, int(row[5]), [float(x) for x in row[6:]]))
    out: dict[int, dict[str, StoredTrajectory]] = {}
    for r, pats in acc.items():
        out[r] = {}
        for pid, rows in pats.items():
            rows.sort(key=lambda x: x[0])
            vals = np.array([x[3] for x in rows])
            out[r][pid] = StoredTrajectory(vals[:, :6], vals[:, 6:13], vals[:, 13], rows[0][2], rows[0][1])
    return out


def predict_patients(model: TrajectoryModel, examples: Sequence[Example]) -> dict[str, TrajectoryOutput]:
    return {ex.patient_id: forward_trajectory(ex.token_sets, model) for ex in examples}


# ---------------------------------------------------------------------------
# static baseline features


def static_feature_names(dictionary: VariableDictionary, train_stays: Sequence[TimeWindowedStay],
                         variables: Sequence[str] | None = None) -> list[tuple[str, str | None]]:
    """Feature columns: ``(var, None)`` for numeric, ``(var, level)`` one-hot otherwise."""
    specs = [s for s in dictionary if s.static and (variables is None or s.name in variables)]
    if variables is not None:
        known = {s.name for s in specs}
        bad = [v for v in variables if v not in known]
        if bad:
            raise DataError(f"baseline variables not static in dictionary: {bad}")
    levels: dict[str, set[str]] = {s.name: set() for s in specs if s.kind != "numeric"}
    for stay in train_stays:
        if not stay.windows:
            continue
        for var, value in stay.windows[0].values:
            if var in levels:
                levels[var].add(str(value).strip())
    cols: list[tuple[str, str | None]] = []
    for s in specs:
        if s.kind == "numeric":
            cols.append((s.name, None))
        else:
            cols.extend((s.name, lv) for lv in sorted(levels[s.name]))
    return cols


def static_features(stay: TimeWindowedStay, columns) -> np.ndarray:
    values: dict[str, object] = {}
    if stay.windows:
        for var, value in stay.windows[0].values:
            values.setdefault(var, value)
    row = np.empty(len(columns))
    for j, (var, level) in enumerate(columns):
        raw = values.get(var)
        if level is None:
            row[j] = math.nan if raw is None else to_float(raw)
        else:
            row[j] = 1.0 if raw is not None and str(raw).strip() == level else 0.0
    return row


def baseline_output(model: BaselineModel, stay: TimeWindowedStay, columns) -> TrajectoryOutput:
    from .seqmodel import cumulative_from_class
    from .metrics import expected_index

    p = model.predict_proba(static_features(stay, columns)[None, :])[0]
    P = np.repeat(p[None, :], len(stay), axis=0)
    return TrajectoryOutput(q=cumulative_from_class(P), p=P, expected=expected_index(P))
