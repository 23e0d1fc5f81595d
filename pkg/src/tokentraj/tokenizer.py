"""Vocabulary learning and per-window tokenization.

Token strings have the form ``VAR=PAYLOAD`` where the payload is a
two-digit quantile bin (``BIN07``), a categorical level, a normalized text
string or ``__MISSING__``. Ids 0 and 1 are reserved for padding and
unknown tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._numeric import quantile_sorted
from .errors import ParseError
from .schema import TimeWindowedStay, VariableDictionary, WindowObservations

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<PAD>", "<UNK>"
MISSING = "__MISSING__"
VOCAB_FORMAT = "tokentraj-vocab-v1"

_NON_ALNUM = re.compile(r"[^a-z0-9]")


def normalize_text(raw) -> str:
    """Lowercase and drop every character outside ``[a-z0-9]``."""
    return _NON_ALNUM.sub("", str(raw).lower())


def missing_token(variable: str) -> str:
    return f"{variable}={MISSING}"


def bin_token(variable: str, b: int) -> str:
    return f"{variable}=BIN{b:02d}"


def token_variable(token: str) -> str:
    return token.split("=", 1)[0]


def to_float(value) -> float:
    """Parse a raw numeric value; unparseable or non-finite input gives NaN."""
    if isinstance(value, bool):
        return math.nan
    try:
        x = float(value)
    except (TypeError, ValueError):
        return math.nan
    return x if math.isfinite(x) else math.nan


def bin_numeric(value: float, edges) -> int | None:
    """Return the 1-based bin of ``value``, or ``None`` when it is not finite.

    The bin is one plus the number of edges strictly below the value, so a
    value equal to an edge goes to the lower bin.
    """
    if value is None or not math.isfinite(value):
        return None
    return 1 + bisect_left(edges, value)


def quantile_edges(values: Sequence[float], bin_count: int) -> list[float]:
    xs = sorted(values)
    return [quantile_sorted(xs, k / bin_count) for k in range(1, bin_count)]


@dataclass
class Vocabulary:
    tokens: list[str]
    bin_count: int
    variables: list[tuple[str, str]]
    edges: dict[str, list[float]]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token strings")
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("ids 0 and 1 must be PAD and UNK")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def missing_id(self, variable: str) -> int:
        return self.index[missing_token(variable)]

    @property
    def kinds(self) -> dict[str, str]:
        return dict(self.variables)

    def to_dict(self) -> dict:
        return {
            "format": VOCAB_FORMAT,
            "bin_count": self.bin_count,
            "variables": [[n, k] for n, k in self.variables],
            "edges": {v: [format(e, ".17g") for e in es] for v, es in self.edges.items()},
            "tokens": self.tokens,
        }

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        if d.get("format") != VOCAB_FORMAT:
            raise ParseError(f"not a {VOCAB_FORMAT} file (format={d.get('format')!r})")
        return cls(
            tokens=list(d["tokens"]),
            bin_count=int(d["bin_count"]),
            variables=[(n, k) for n, k in d["variables"]],
            edges={v: [float(e) for e in es] for v, es in d["edges"].items()},
        )

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
        return cls.from_dict(d)


def fit_vocabulary(training_stays: Sequence[TimeWindowedStay], dictionary: VariableDictionary,
                   bin_count: int = 20) -> Vocabulary:
    """Learn bin edges and the token universe from training stays.

    Numeric values are pooled over every training window (static values
    therefore count once per window they are carried into).
    """
    if bin_count < 2:
        raise ValueError("bin_count must be >= 2")
    if not training_stays:
        raise ValueError("no training stays")
    kinds = {s.name: s.kind for s in dictionary}
    numeric_values: dict[str, list[float]] = {s.name: [] for s in dictionary if s.kind == "numeric"}
    seen: dict[str, set[str]] = {s.name: set() for s in dictionary}
    for stay in training_stays:
        for window in stay.windows:
            for var, value in window.values:
                kind = kinds[var]
                if kind == "numeric":
                    x = to_float(value)
                    if not math.isnan(x):
                        numeric_values[var].append(x)
                elif kind == "categorical":
                    level = str(value).strip()
                    if level:
                        seen[var].add(f"{var}={level}")
                else:
                    text = normalize_text(value)
                    if text:
                        seen[var].add(f"{var}={text}")

    tokens = [PAD_TOKEN, UNK_TOKEN]
    edges = {}
    for spec in dictionary:
        if spec.kind == "numeric":
            vals = numeric_values[spec.name]
            edges[spec.name] = quantile_edges(vals, bin_count) if vals else []
            tokens.extend(bin_token(spec.name, b) for b in range(1, bin_count + 1))
        else:
            tokens.extend(sorted(seen[spec.name]))
        tokens.append(missing_token(spec.name))
    return Vocabulary(tokens, bin_count, [(s.name, s.kind) for s in dictionary], edges)


def value_token(variable: str, kind: str, value, edges) -> str | None:
    """Token string for one raw value, or ``None`` if it counts as missing."""
    if kind == "numeric":
        if not edges:
            return None
        b = bin_numeric(to_float(value), edges)
        return None if b is None else bin_token(variable, b)
    if kind == "categorical":
        level = str(value).strip()
        return f"{variable}={level}" if level else None
    text = normalize_text(value)
    return f"{variable}={text}" if text else None


def tokenize_window(window: WindowObservations, vocab: Vocabulary) -> np.ndarray:
    """Sorted, deduplicated token ids for one window.

    Every declared variable yields its value tokens, or its missing token
    when none of its values is usable. Values never seen in training map
    to UNK.
    """
    kinds = vocab.kinds
    by_var: dict[str, set[int]] = {}
    for var, value in window.values:
        tok = value_token(var, kinds[var], value, vocab.edges.get(var))
        if tok is not None:
            by_var.setdefault(var, set()).add(vocab.id(tok))
    ids = set()
    for var, _ in vocab.variables:
        got = by_var.get(var)
        if got:
            ids |= got
        else:
            ids.add(vocab.missing_id(var))
    return np.array(sorted(ids), dtype=np.int64)


def tokenize_stay(stay: TimeWindowedStay, vocab: Vocabulary) -> list[np.ndarray]:
    return [tokenize_window(w, vocab) for w in stay.windows]
