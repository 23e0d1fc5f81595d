"""Outcome scores, discrimination, calibration and bootstrap intervals.

Threshold ``k`` (1..6) is the event ``GOSE index >= k``; thresholds are
named ``gt1, gt3, gt4, gt5, gt6, gt7`` after the GOSE scores they exceed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ._numeric import logit, quantile_sorted, sigmoid
from .errors import EmptyPanelError, PanelMismatchError, UndefinedMetricError

THRESHOLD_NAMES = ("gt1", "gt3", "gt4", "gt5", "gt6", "gt7")
CLAMP_TOL = 1e-12
PROB_CLAMP = 1e-6
DEFAULT_GRID = np.round(np.arange(1, 100) * 0.01, 2)


def threshold_to_class_probs(q, return_flag: bool = False):
    """Class probabilities from threshold probabilities by differencing.

    ``p_0 = 1 - q_1``, ``p_i = q_i - q_{i+1}``, ``p_6 = q_6``. Negative
    entries are clamped to zero and the row renormalized; the flag marks
    rows where a difference fell below ``-1e-12``.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.empty(q.shape[:-1] + (7,))
    p[..., 0] = 1.0 - q[..., 0]
    p[..., 1:6] = q[..., :-1] - q[..., 1:]
    p[..., 6] = q[..., 5]
    neg = p < 0
    flag = (p < -CLAMP_TOL).any(axis=-1)
    if neg.any():
        rows = neg.any(axis=-1)
        fixed = np.maximum(p[rows], 0.0)
        p[rows] = fixed / fixed.sum(axis=-1, keepdims=True)
    return (p, flag) if return_flag else p


def expected_index(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ np.arange(7, dtype=np.float64)


def threshold_labels(labels, k: int) -> np.ndarray:
    """Binary outcome for threshold ``k`` in 1..6 (``index >= k``)."""
    return (np.asarray(labels) >= k).astype(np.float64)


# ---------------------------------------------------------------------------
# discrimination


def somers_dxy(scores, labels) -> float:
    """Somers' Dxy of ``scores`` against ordinal ``labels``.

    A comparable pair has different labels; it is concordant when the
    higher label has the higher score, and a score tie counts one half.
    Computed by sorted searches per label level in ``O(K n log n)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d of equal length")
    if not np.isfinite(s).all():
        raise ValueError("non-finite scores")
    n = s.size
    classes, counts = np.unique(y, return_counts=True)
    n_comp = (n * n - float((counts.astype(np.float64) ** 2).sum())) / 2.0
    if n_comp <= 0:
        raise UndefinedMetricError("Somers' Dxy undefined: no comparable pairs")
    n_conc = 0.0
    for c in classes[1:]:
        lower = np.sort(s[y < c])
        upper = s[y == c]
        left = np.searchsorted(lower, upper, side="left")
        right = np.searchsorted(lower, upper, side="right")
        n_conc += float(left.sum()) + 0.5 * float((right - left).sum())
    half = n_comp / 2.0
    return (n_conc - half) / half


# ---------------------------------------------------------------------------
# calibration


def calibration_slope(probabilities, labels, max_iter: int = 100, tol: float = 1e-10):
    """Logistic recalibration ``logit P(y=1) = alpha + beta * logit(p)`` by IRLS.

    Returns ``(alpha, beta)``.
    """
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in shape")
    if y.size == 0 or y.min() == y.max():
        raise UndefinedMetricError("calibration slope undefined: labels contain a single class")
    if np.ptp(p) == 0:
        raise UndefinedMetricError("calibration slope undefined: constant predictions")
    X = np.column_stack([np.ones_like(p), logit(p)])
    theta = np.zeros(2)
    for _ in range(max_iter):
        eta = X @ theta
        mu = sigmoid(eta)
        w = mu * (1.0 - mu)
        grad = X.T @ (y - mu)
        hess = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise UndefinedMetricError("calibration slope undefined: singular information matrix") from None
        theta = theta + step
        if np.max(np.abs(step)) < tol:
            break
    if not np.isfinite(theta).all():
        raise UndefinedMetricError("calibration slope diverged")
    return float(theta[0]), float(theta[1])


@dataclass
class MeanSlope:
    mean: float
    slopes: list[float]
    intercepts: list[float]
    excluded: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.excluded)


def mean_calibration_slope(q, labels) -> MeanSlope:
    """Average calibration slope over the six thresholds of a panel.

    ``q`` is ``n x 6`` threshold probabilities. Thresholds whose slope is
    undefined are left out and listed in ``excluded``.
    """
    q = np.asarray(q, dtype=np.float64)
    slopes, intercepts, excluded = [], [], []
    for k in range(1, 7):
        try:
            a, b = calibration_slope(q[:, k - 1], threshold_labels(labels, k))
        except UndefinedMetricError:
            excluded.append(THRESHOLD_NAMES[k - 1])
            slopes.append(math.nan)
            intercepts.append(math.nan)
            continue
        slopes.append(b)
        intercepts.append(a)
    valid = [b for b in slopes if not math.isnan(b)]
    if not valid:
        raise UndefinedMetricError("calibration slope undefined at every threshold")
    return MeanSlope(float(np.mean(valid)), slopes, intercepts, excluded)


@dataclass
class CalibrationCurve:
    grid: np.ndarray
    curve: np.ndarray
    n_local: np.ndarray
    mae: float
    low_n: bool


@dataclass
class CalibrationReport:
    intercepts: list[float]
    slopes: list[float]
    mean_slope: float
    curve_mae: list[float]


def smoothed_calibration_curve(probabilities, labels, grid=DEFAULT_GRID, span: float = 0.75,
                               min_n: int = 50) -> CalibrationCurve:
    """Local-linear (tricube, nearest-neighbour span) smooth of label on probability.

    The mean absolute deviation from the diagonal is taken over grid points
    inside the observed probability range.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    n = p.size
    if n == 0:
        raise EmptyPanelError("no points for calibration curve")
    k = min(n, max(2, int(math.ceil(span * n))))
    curve = np.empty(grid.size)
    n_local = np.empty(grid.size, dtype=np.int64)
    for j, g in enumerate(grid):
        dist = np.abs(p - g)
        if k < n:
            # points tied with the k-th nearest are all kept
            idx = np.flatnonzero(dist <= np.partition(dist, k - 1)[k - 1])
        else:
            idx = np.arange(n)
        d = dist[idx]
        dmax = d.max()
        if dmax > 0:
            w = (1.0 - (d / dmax) ** 3) ** 3
        else:
            w = np.ones_like(d)
        if not (w > 0).any():
            w = np.ones_like(d)
        n_local[j] = int((w > 0).sum())
        xs, ys = p[idx], y[idx]
        sw = w.sum()
        xm = (w @ xs) / sw
        ym = (w @ ys) / sw
        sxx = w @ ((xs - xm) ** 2)
        if sxx > 1e-14 * sw:
            beta = (w @ ((xs - xm) * (ys - ym))) / sxx
            val = ym + beta * (g - xm)
        else:
            val = ym
        curve[j] = min(1.0, max(0.0, val))
    inside = (grid >= p.min()) & (grid <= p.max())
    mae = float(np.mean(np.abs(curve[inside] - grid[inside]))) if inside.any() else math.nan
    return CalibrationCurve(grid, curve, n_local, mae, n < min_n)


# ---------------------------------------------------------------------------
# panels and bootstrap


@dataclass
class Panel:
    """Per-patient values at one timepoint (first axis = patient)."""

    patient_ids: np.ndarray
    values: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.patient_ids)

    def take(self, rows) -> "Panel":
        return Panel(self.patient_ids[rows], self.values[rows], self.labels[rows])


@dataclass
class BootstrapCI:
    point: float
    lo: float
    hi: float
    n_boot: int
    seed: int
    samples: np.ndarray = field(repr=False, default=None)


def _union_positions(panels: Mapping[int, Panel]):
    ids = sorted(set().union(*(set(p.patient_ids.tolist()) for p in panels.values())))
    lookup = {pid: i for i, pid in enumerate(ids)}
    positions = {}
    for r, panel in panels.items():
        pos = np.full(len(ids), -1, dtype=np.int64)
        for row, pid in enumerate(panel.patient_ids.tolist()):
            pos[lookup[pid]] = row
        positions[r] = pos
    return ids, positions


def _repeat_mean(panels, positions, draw, metric):
    vals = []
    for r in sorted(panels):
        rows = positions[r][draw]
        rows = rows[rows >= 0]
        if rows.size == 0:
            continue
        sub = panels[r].take(rows)
        vals.append(metric(sub.values, sub.labels))
    if not vals:
        raise UndefinedMetricError("no patients in resample")
    return float(np.mean(vals))


def _percentile_ci(samples, level):
    alpha = (1.0 - level) / 2.0
    xs = np.sort(samples)
    return quantile_sorted(xs, alpha), quantile_sorted(xs, 1.0 - alpha)


def _draw_valid(rng, n_units, fn, max_redraw=10):
    for _ in range(max_redraw):
        draw = rng.integers(0, n_units, size=n_units)
        try:
            return fn(draw)
        except UndefinedMetricError:
            continue
    raise UndefinedMetricError(f"metric undefined on {max_redraw} consecutive resamples")


def bbc_cv(predictions: Mapping[int, Panel], metric: Callable, n_boot: int = 1000, seed: int = 0,
           level: float = 0.95) -> BootstrapCI:
    """Patient-level bootstrap over pooled out-of-fold predictions.

    ``predictions`` maps each cross-validation repeat to the panel of test
    predictions it produced. Each resample draws patients with replacement
    from the union of patients; the metric is computed per repeat on the
    sampled rows and averaged across repeats.
    """
    if not predictions:
        raise EmptyPanelError("no predictions")
    ids, positions = _union_positions(predictions)
    full = {r: p for r, p in predictions.items()}
    point = float(np.mean([metric(p.values, p.labels) for _, p in sorted(full.items())]))
    rng = np.random.default_rng(seed)
    samples = np.empty(n_boot)
    for b in range(n_boot):
        samples[b] = _draw_valid(rng, len(ids), lambda draw: _repeat_mean(full, positions, draw, metric))
    lo, hi = _percentile_ci(samples, level)
    return BootstrapCI(point, lo, hi, n_boot, seed, samples)


def added_explanation(full: Mapping[int, Panel], baseline: Mapping[int, Panel], metric: Callable | None = None,
                      n_boot: int = 1000, seed: int = 0, level: float = 0.95, paired: bool = True) -> BootstrapCI:
    """Difference ``metric(full) - metric(baseline)`` with a bootstrap interval.

    With ``paired`` both models are evaluated on the same resampled
    patients. Both inputs must cover the same patients per repeat.
    """
    metric = metric or dxy_metric
    if set(full) != set(baseline):
        raise PanelMismatchError("repeats differ between full and baseline predictions")
    for r in full:
        if set(full[r].patient_ids.tolist()) != set(baseline[r].patient_ids.tolist()):
            raise PanelMismatchError(f"patient panels differ in repeat {r}")
    ids, pos_f = _union_positions(full)
    _, pos_b = _union_positions(baseline)
    point = float(np.mean([metric(full[r].values, full[r].labels) - metric(baseline[r].values, baseline[r].labels)
                           for r in sorted(full)]))
    rng = np.random.default_rng(seed)
    samples = np.empty(n_boot)
    n = len(ids)
    for b in range(n_boot):
        if paired:
            samples[b] = _draw_valid(
                rng, n, lambda d: _repeat_mean(full, pos_f, d, metric) - _repeat_mean(baseline, pos_b, d, metric))
        else:
            a = _draw_valid(rng, n, lambda d: _repeat_mean(full, pos_f, d, metric))
            c = _draw_valid(rng, n, lambda d: _repeat_mean(baseline, pos_b, d, metric))
            samples[b] = a - c
    lo, hi = _percentile_ci(samples, level)
    return BootstrapCI(point, lo, hi, n_boot, seed, samples)


def dxy_metric(values, labels) -> float:
    """Dxy of expected index (1-d values) or of class-probability rows."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = expected_index(values)
    return somers_dxy(values, labels)


def slope_metric(values, labels) -> float:
    """Mean calibration slope of ``n x 6`` threshold probabilities."""
    return mean_calibration_slope(values, labels).mean


def timepoint_slice(trajectories: Mapping[str, object], labels: Mapping[str, int], t_hours: float,
                    alignment: str = "admission", window_hours: float = 2.0, field_name: str = "expected") -> Panel:
    """Panel of patients present at ``t_hours`` under the given alignment.

    ``admission``: window index ``t / window_hours`` (t >= 0); patients
    whose stay has that window are included. ``discharge``: ``t <= 0`` and
    index ``last + t / window_hours``, so ``t = 0`` is each patient's final
    window. ``trajectories`` maps patient id to an object with ``q``, ``p``
    and ``expected`` arrays (window-major); ``field_name`` picks which one.
    """
    k_float = t_hours / window_hours
    k = int(round(k_float))
    if abs(k - k_float) > 1e-9:
        raise ValueError(f"t_hours={t_hours} is not on the {window_hours}h window grid")
    if alignment in ("admission", "from_admission"):
        if k < 0:
            raise ValueError("admission-aligned timepoints must be >= 0")
    elif alignment in ("discharge", "to_discharge"):
        if k > 0:
            raise ValueError("discharge-aligned timepoints must be <= 0")
    else:
        raise ValueError(f"unknown alignment {alignment!r}")
    pids, rows, labs = [], [], []
    for pid in sorted(trajectories):
        traj = trajectories[pid]
        arr = getattr(traj, field_name)
        n = len(arr)
        idx = k if alignment in ("admission", "from_admission") else n - 1 + k
        if 0 <= idx < n:
            pids.append(pid)
            rows.append(arr[idx])
            labs.append(labels[pid])
    if not pids:
        raise EmptyPanelError(f"no patients at t={t_hours}h ({alignment})")
    return Panel(np.array(pids, dtype=object), np.array(rows, dtype=np.float64), np.array(labs, dtype=np.int64))
