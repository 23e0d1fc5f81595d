"""High-magnitude transitions in threshold-probability trajectories.

A transition at window ``t`` is the change ``100 * (q_k(t) - q_k(t-1))``
in percentage points. Window ``t`` is placed at ``t * window_hours`` hours
after admission, and only transitions with both windows inside the
analysis region count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._numeric import quantile_sorted
from .errors import EmptyPanelError
from .metrics import THRESHOLD_NAMES

DEFAULT_REGION = (10.0, 168.0)
NEGATIVE_PCT = 0.01
POSITIVE_PCT = 0.99

#: Reference cut-offs (percentage points) per threshold.
REFERENCE_CUTOFFS = {
    "gt1": (-6.258903, 4.017577),
    "gt3": (-6.168803, 4.727354),
    "gt4": (-5.831151, 4.435974),
    "gt5": (-5.253576, 3.712104),
    "gt6": (-4.371744, 2.740238),
    "gt7": (-3.044348, 1.758345),
}


def percentile(values: Iterable[float], f: float) -> float:
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("percentile of an empty list")
    if not 0 <= f <= 1:
        raise ValueError("f must lie in [0, 1]")
    return quantile_sorted(xs, f)


@dataclass
class CutoffTable:
    negative: dict[str, float]
    positive: dict[str, float]

    def absent(self) -> list[tuple[str, str]]:
        out = []
        for name in THRESHOLD_NAMES:
            if math.isnan(self.negative.get(name, math.nan)):
                out.append((name, "negative"))
            if math.isnan(self.positive.get(name, math.nan)):
                out.append((name, "positive"))
        return out

    @classmethod
    def reference(cls) -> "CutoffTable":
        return cls({k: v[0] for k, v in REFERENCE_CUTOFFS.items()},
                   {k: v[1] for k, v in REFERENCE_CUTOFFS.items()})

    def rows(self):
        for name in THRESHOLD_NAMES:
            yield name, self.negative[name], self.positive[name]


@dataclass(frozen=True)
class TransitionEvent:
    patient_id: str
    threshold: str
    window: int
    t_hours: float
    delta_pct: float
    direction: str


def _in_region(t_hours, region):
    lo, hi = region
    return lo <= t_hours <= hi


def window_diffs(q, window_hours: float = 2.0, region=DEFAULT_REGION):
    """Yield ``(window, t_hours, delta_pct_row)`` for consecutive windows in the region."""
    q = np.asarray(q, dtype=np.float64)
    for t in range(1, q.shape[0]):
        if _in_region((t - 1) * window_hours, region) and _in_region(t * window_hours, region):
            yield t, t * window_hours, 100.0 * (q[t] - q[t - 1])


def compute_cutoffs(trajectories: Mapping[str, np.ndarray] | Sequence[np.ndarray], window_hours: float = 2.0,
                    region=DEFAULT_REGION, negative_pct: float = NEGATIVE_PCT,
                    positive_pct: float = POSITIVE_PCT) -> CutoffTable:
    """Population cut-offs from pooled consecutive-window differences.

    Zero differences go to neither pool. A threshold/direction with an empty
    pool gets ``nan`` (see :meth:`CutoffTable.absent`).
    """
    qs = list(trajectories.values()) if hasattr(trajectories, "values") else list(trajectories)
    if not qs:
        raise EmptyPanelError("no trajectories")
    neg = {k: [] for k in THRESHOLD_NAMES}
    pos = {k: [] for k in THRESHOLD_NAMES}
    for q in qs:
        for _, _, delta in window_diffs(q, window_hours, region):
            for j, name in enumerate(THRESHOLD_NAMES):
                d = float(delta[j])
                if d < 0:
                    neg[name].append(d)
                elif d > 0:
                    pos[name].append(d)
    return CutoffTable(
        {k: percentile(v, negative_pct) if v else math.nan for k, v in neg.items()},
        {k: percentile(v, positive_pct) if v else math.nan for k, v in pos.items()},
    )


def detect_transitions(patient_id: str, q, cutoffs: CutoffTable, window_hours: float = 2.0,
                       region=DEFAULT_REGION) -> list[TransitionEvent]:
    """Events whose difference reaches the cut-off for its sign, ordered by (window, threshold)."""
    events = []
    for t, t_hours, delta in window_diffs(q, window_hours, region):
        for j, name in enumerate(THRESHOLD_NAMES):
            d = float(delta[j])
            lo = cutoffs.negative.get(name, math.nan)
            hi = cutoffs.positive.get(name, math.nan)
            if d < 0 and not math.isnan(lo) and d <= lo:
                events.append(TransitionEvent(patient_id, name, t, t_hours, d, "negative"))
            elif d > 0 and not math.isnan(hi) and d >= hi:
                events.append(TransitionEvent(patient_id, name, t, t_hours, d, "positive"))
    return events
