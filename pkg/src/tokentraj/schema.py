"""Variable dictionaries, long-format observations, outcome labels and
time windowing of ICU stays.

File formats
------------
dictionary CSV
    ``name,kind,static,category,intervention,physician_impression``
observations CSV or JSONL
    ``patient_id,variable,value,t_hours``; ``t_hours`` empty for static rows
outcomes CSV
    ``patient_id,gose`` with labels ``1, 2_3, 4, 5, 6, 7, 8``
stays CSV (optional)
    ``patient_id,stay_length_hours``
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    DataError,
    DuplicateNameError,
    DuplicatePatientError,
    MalformedTimestampError,
    ParseError,
    StaticTimestampError,
    UnknownLabelError,
    UnknownVariableError,
)

KINDS = ("numeric", "categorical", "text")
DICTIONARY_HEADER = ("name", "kind", "static", "category", "intervention", "physician_impression")
OBSERVATION_FIELDS = ("patient_id", "variable", "value", "t_hours")

#: File spelling of the seven ordered outcome categories, index 0..6.
GOSE_LABELS = ("1", "2_3", "4", "5", "6", "7", "8")
GOSE_INDEX = {label: i for i, label in enumerate(GOSE_LABELS)}


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    static: bool
    category: str = ""
    intervention: bool = False
    physician_impression: bool = False


@dataclass(frozen=True)
class VariableDictionary:
    entries: tuple[VariableSpec, ...]

    def __post_init__(self):
        seen = set()
        for spec in self.entries:
            if spec.name in seen:
                raise DuplicateNameError(f"duplicate variable name {spec.name!r}")
            if spec.kind not in KINDS:
                raise DataError(f"variable {spec.name!r}: unknown kind {spec.kind!r}")
            seen.add(spec.name)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, name):
        return any(spec.name == name for spec in self.entries)

    @property
    def names(self) -> list[str]:
        return [spec.name for spec in self.entries]

    def get(self, name: str) -> VariableSpec:
        for spec in self.entries:
            if spec.name == name:
                return spec
        raise UnknownVariableError(f"undeclared variable {name!r}")

    def by_name(self) -> dict[str, VariableSpec]:
        return {spec.name: spec for spec in self.entries}


@dataclass(frozen=True)
class Observation:
    variable: str
    value: object
    t_hours: float | None = None


@dataclass(frozen=True)
class StayRecord:
    patient_id: str
    observations: tuple[Observation, ...]
    stay_length_hours: float


@dataclass(frozen=True)
class OutcomeLabel:
    patient_id: str
    gose_index: int


@dataclass(frozen=True)
class WindowObservations:
    """Raw ``(variable, value)`` pairs observed in one window, statics included."""

    index: int
    values: tuple[tuple[str, object], ...]


@dataclass(frozen=True)
class TimeWindowedStay:
    patient_id: str
    window_hours: float
    windows: tuple[WindowObservations, ...]
    stay_length_hours: float

    def __len__(self):
        return len(self.windows)


def _parse_bool(text, path, line, field):
    value = text.strip().lower()
    if value == "true":
        return True
    if value == "false":
        return False
    raise ParseError(f"field {field!r}: expected true|false, got {text!r}", path, line)


def load_dictionary(path) -> VariableDictionary:
    """Read and validate a dictionary CSV."""
    path = Path(path)
    entries = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty dictionary file", path, 1) from None
        header = [h.strip() for h in header]
        if tuple(header) != DICTIONARY_HEADER:
            raise ParseError(f"bad header {header}, expected {list(DICTIONARY_HEADER)}", path, 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(DICTIONARY_HEADER):
                raise ParseError(f"expected {len(DICTIONARY_HEADER)} fields, got {len(row)}", path, line)
            name, kind, static, category, intervention, impression = (c.strip() for c in row)
            if not name:
                raise ParseError("empty variable name", path, line)
            if kind not in KINDS:
                raise ParseError(f"kind must be one of {KINDS}, got {kind!r}", path, line)
            if name in seen:
                raise DuplicateNameError(
                    f"{path}:{line}: duplicate variable name {name!r} (first on line {seen[name]})"
                )
            seen[name] = line
            entries.append(
                VariableSpec(
                    name=name,
                    kind=kind,
                    static=_parse_bool(static, path, line, "static"),
                    category=category,
                    intervention=_parse_bool(intervention, path, line, "intervention"),
                    physician_impression=_parse_bool(impression, path, line, "physician_impression"),
                )
            )
    return VariableDictionary(tuple(entries))


def write_dictionary(dictionary: VariableDictionary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DICTIONARY_HEADER)
        for s in dictionary:
            writer.writerow([
                s.name, s.kind, str(s.static).lower(), s.category,
                str(s.intervention).lower(), str(s.physician_impression).lower(),
            ])


def _iter_observation_rows(path: Path):
    """Yield ``(line, patient_id, variable, value, t_raw)`` from CSV or JSONL."""
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        with open(path, encoding="utf-8") as fh:
            for line, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    rec = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON: {exc.msg}", path, line) from None
                missing = [f for f in ("patient_id", "variable", "value") if f not in rec]
                if missing:
                    raise ParseError(f"missing fields {missing}", path, line)
                yield line, str(rec["patient_id"]), str(rec["variable"]), rec["value"], rec.get("t_hours")
        return
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty observations file", path, 1) from None
        if tuple(header) != OBSERVATION_FIELDS:
            raise ParseError(f"bad header {header}, expected {list(OBSERVATION_FIELDS)}", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", path, reader.line_num)
            yield reader.line_num, row[0].strip(), row[1].strip(), row[2], row[3]


def _parse_time(raw, path, line) -> float | None:
    if raw is None:
        return None
    if isinstance(raw, str):
        if not raw.strip():
            return None
        try:
            t = float(raw)
        except ValueError:
            raise MalformedTimestampError(f"{path}:{line}: unparseable t_hours {raw!r}") from None
    elif isinstance(raw, (int, float)) and not isinstance(raw, bool):
        t = float(raw)
    else:
        raise MalformedTimestampError(f"{path}:{line}: unparseable t_hours {raw!r}")
    if not math.isfinite(t) or t < 0:
        raise MalformedTimestampError(f"{path}:{line}: t_hours must be a nonnegative finite number, got {raw!r}")
    return t


def load_stay_lengths(path) -> dict[str, float]:
    path = Path(path)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["patient_id", "stay_length_hours"]:
            raise ParseError("bad header, expected ['patient_id', 'stay_length_hours']", path, 1)
        for row in reader:
            pid = row["patient_id"].strip()
            try:
                length = float(row["stay_length_hours"])
            except ValueError:
                raise ParseError(f"bad stay length {row['stay_length_hours']!r}", path, reader.line_num) from None
            if not math.isfinite(length) or length <= 0:
                raise ParseError(f"stay length must be positive, got {length}", path, reader.line_num)
            if pid in out:
                raise DuplicatePatientError(f"{path}:{reader.line_num}: duplicate patient {pid!r}")
            out[pid] = length
    return out


def load_observations(path, dictionary: VariableDictionary, stay_lengths: dict[str, float] | None = None,
                      ) -> list[StayRecord]:
    """Group long-format observations into one :class:`StayRecord` per patient.

    Without ``stay_lengths`` a stay is taken to end at its last dynamic
    timestamp (one window for stays with static rows only).
    """
    path = Path(path)
    specs = dictionary.by_name()
    grouped: dict[str, list[Observation]] = {}
    static_seen: set[tuple[str, str]] = set()
    for line, pid, var, value, t_raw in _iter_observation_rows(path):
        spec = specs.get(var)
        if spec is None:
            raise UnknownVariableError(f"{path}:{line}: undeclared variable {var!r}")
        t = _parse_time(t_raw, path, line)
        if spec.static:
            if t is not None:
                raise StaticTimestampError(f"{path}:{line}: static variable {var!r} carries a timestamp")
            if (pid, var) in static_seen:
                raise DataError(f"{path}:{line}: second value for static variable {var!r} of patient {pid!r}")
            static_seen.add((pid, var))
        elif t is None:
            raise MalformedTimestampError(f"{path}:{line}: dynamic variable {var!r} has no t_hours")
        if stay_lengths is not None and t is not None and pid in stay_lengths and t > stay_lengths[pid]:
            raise MalformedTimestampError(
                f"{path}:{line}: t_hours {t} beyond stay length {stay_lengths[pid]} of patient {pid!r}"
            )
        grouped.setdefault(pid, []).append(Observation(var, value, t))

    pids = list(grouped)
    if stay_lengths is not None:
        pids += [p for p in stay_lengths if p not in grouped]
    stays = []
    for pid in pids:
        obs = tuple(grouped.get(pid, ()))
        if stay_lengths is not None and pid in stay_lengths:
            length = stay_lengths[pid]
        else:
            times = [o.t_hours for o in obs if o.t_hours is not None]
            length = max(times) if times and max(times) > 0 else 0.0
        stays.append(StayRecord(pid, obs, length))
    return stays


def write_observations(stays: Iterable[StayRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBSERVATION_FIELDS)
        for stay in stays:
            for o in stay.observations:
                writer.writerow([stay.patient_id, o.variable, o.value, "" if o.t_hours is None else o.t_hours])


def write_stay_lengths(stays: Iterable[StayRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "stay_length_hours"])
        for stay in stays:
            writer.writerow([stay.patient_id, stay.stay_length_hours])


def load_outcomes(path) -> list[OutcomeLabel]:
    path = Path(path)
    labels = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty outcomes file", path, 1) from None
        if header != ["patient_id", "gose"]:
            raise ParseError(f"bad header {header}, expected ['patient_id', 'gose']", path, 1)
        for row in reader:
            if not row:
                continue
            line = reader.line_num
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", path, line)
            pid, raw = row[0].strip(), row[1].strip()
            if raw not in GOSE_INDEX:
                hint = " (scores 2 and 3 are merged; write '2_3')" if raw in ("2", "3") else ""
                raise UnknownLabelError(f"{path}:{line}: unknown GOSE label {raw!r}{hint}")
            if pid in seen:
                raise DuplicatePatientError(f"{path}:{line}: duplicate patient {pid!r}")
            seen.add(pid)
            labels.append(OutcomeLabel(pid, GOSE_INDEX[raw]))
    return labels


def write_outcomes(labels: Iterable[OutcomeLabel], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "gose"])
        for lab in labels:
            writer.writerow([lab.patient_id, GOSE_LABELS[lab.gose_index]])


def window_count(stay_length_hours: float, window_hours: float) -> int:
    return max(1, math.ceil(stay_length_hours / window_hours))


def window_stay(stay: StayRecord, window_hours: float = 2.0, window_limit: int | None = None,
                dictionary: VariableDictionary | None = None) -> TimeWindowedStay:
    """Partition a stay into contiguous half-open windows ``[k*w, (k+1)*w)``.

    Static values are replicated into every window. A dynamic observation at
    exactly ``stay_length_hours`` falls into the last window. When a
    dictionary is given, observations are split static/dynamic by it;
    otherwise by the presence of a timestamp.
    """
    if not window_hours > 0:
        raise ValueError("window_hours must be positive")
    n = window_count(stay.stay_length_hours, window_hours)
    if window_limit is not None:
        if window_limit < 1:
            raise ValueError("window_limit must be >= 1")
        n = min(n, window_limit)
    specs = dictionary.by_name() if dictionary is not None else None
    statics = []
    buckets: list[list[tuple[str, object]]] = [[] for _ in range(n)]
    full_n = window_count(stay.stay_length_hours, window_hours)
    for o in stay.observations:
        is_static = specs[o.variable].static if specs is not None else o.t_hours is None
        if is_static:
            statics.append((o.variable, o.value))
            continue
        k = min(int(math.floor(o.t_hours / window_hours)), full_n - 1)
        if k < n:
            buckets[k].append((o.variable, o.value))
    statics = tuple(statics)
    windows = tuple(WindowObservations(k, statics + tuple(b)) for k, b in enumerate(buckets))
    return TimeWindowedStay(stay.patient_id, float(window_hours), windows, stay.stay_length_hours)


def window_stays(stays: Sequence[StayRecord], window_hours: float = 2.0, window_limit: int | None = None,
                 dictionary: VariableDictionary | None = None) -> list[TimeWindowedStay]:
    return [window_stay(s, window_hours, window_limit, dictionary) for s in stays]
