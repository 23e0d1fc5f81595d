"""Shapley attributions of one trajectory output to time windows and tokens.

Switched-off units are replaced by the average-patient baseline: a whole
window becomes the baseline token set, and a removed token leaves its
variable to be filled by the baseline's tokens for that variable. Distant
low-contribution windows are merged into one pruned unit before the
Shapley pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetExceededError
from .metrics import THRESHOLD_NAMES
from .seqmodel import TrajectoryModel, forward_trajectory
from .tokenizer import Vocabulary, token_variable

EXACT_MAX_UNITS = 12
MIN_SAMPLES = 100
DEFAULT_ETA = 0.025
DEFAULT_SAMPLES = 1000
TARGETS = THRESHOLD_NAMES + ("expected",)


def build_baseline_tokens(training_token_sets: Sequence[Sequence[np.ndarray]], threshold: float = 0.5) -> np.ndarray:
    """Token ids present in at least ``threshold`` of all training windows."""
    counts: dict[int, int] = {}
    n_windows = 0
    for stay in training_token_sets:
        for window in stay:
            n_windows += 1
            for tok in np.unique(window).tolist():
                counts[tok] = counts.get(tok, 0) + 1
    if n_windows == 0:
        raise ValueError("no training windows")
    keep = [tok for tok, c in counts.items() if c / n_windows >= threshold]
    return np.array(sorted(keep), dtype=np.int64)


def target_value(output, target: str, t_star: int) -> float:
    if target == "expected":
        return float(output.expected[t_star])
    return float(output.q[t_star, THRESHOLD_NAMES.index(target)])


def make_target(model: TrajectoryModel, target: str, t_star: int) -> Callable[[Sequence[np.ndarray]], float]:
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}")

    def f(token_sets):
        return target_value(forward_trajectory(list(token_sets)[: t_star + 1], model), target, t_star)

    return f


# ---------------------------------------------------------------------------
# perturbation


def perturb_windows(token_sets: Sequence[np.ndarray], window_on: Sequence[bool], baseline: np.ndarray) -> list:
    """Replace every switched-off window by the baseline token set."""
    if len(window_on) != len(token_sets):
        raise ValueError("mask length differs from window count")
    return [w if on else baseline for w, on in zip(token_sets, window_on)]


class TokenPerturber:
    """Switch distinct tokens on/off across a chosen set of windows."""

    def __init__(self, token_variables: Sequence[str], baseline: np.ndarray):
        self.var_of = list(token_variables)
        self.baseline = np.asarray(baseline, dtype=np.int64)
        self.baseline_by_var: dict[str, list[int]] = {}
        for tok in self.baseline.tolist():
            self.baseline_by_var.setdefault(self.var_of[tok], []).append(tok)

    def perturb_window(self, window: np.ndarray, off: set[int]) -> np.ndarray:
        if not off:
            return window
        kept = [t for t in window.tolist() if t not in off]
        present_before = {self.var_of[t] for t in window.tolist()}
        present_after = {self.var_of[t] for t in kept}
        for var in present_before - present_after:
            kept.extend(self.baseline_by_var.get(var, ()))
        return np.array(sorted(set(kept)), dtype=np.int64)

    def perturb(self, token_sets, windows: Sequence[int], off: set[int]) -> list:
        out = list(token_sets)
        for w in windows:
            out[w] = self.perturb_window(token_sets[w], off)
        return out


def token_variables_of(vocab: Vocabulary) -> list[str]:
    return [token_variable(t) for t in vocab.tokens]


# ---------------------------------------------------------------------------
# Shapley estimation


@dataclass
class ShapleyResult:
    phi: np.ndarray
    se: np.ndarray
    f_full: float
    f_empty: float
    mode: str


def _shapley_exact(value, n):
    if n > EXACT_MAX_UNITS:
        raise BudgetExceededError(f"exact Shapley needs n <= {EXACT_MAX_UNITS} units, got {n}")
    n_coal = 1 << n
    bits = ((np.arange(n_coal)[:, None] >> np.arange(n)) & 1).astype(bool)
    vals = np.array([value(bits[s]) for s in range(n_coal)])
    sizes = bits.sum(1)
    w = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) if s < n else 0.0
                  for s in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        without = ~bits[:, i]
        idx = np.nonzero(without)[0]
        phi[i] = np.sum(w[sizes[idx]] * (vals[idx | (1 << i)] - vals[idx]))
    return phi, vals[-1], vals[0]


def _kernel_fit(Z, y, delta):
    """Least squares for phi subject to ``sum(phi) = delta`` (uniform weights)."""
    n = Z.shape[1]
    if n == 1:
        return np.array([delta])
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * delta
    head, *_ = np.linalg.lstsq(A, b, rcond=None)
    return np.append(head, delta - head.sum())


def _shapley_sampled(value, n, m, seed, n_batches=20):
    if m < MIN_SAMPLES:
        raise BudgetExceededError(f"sampled Shapley needs m >= {MIN_SAMPLES}, got {m}")
    f_full = value(np.ones(n, dtype=bool))
    f_empty = value(np.zeros(n, dtype=bool))
    delta = f_full - f_empty
    if n == 1:
        return np.array([delta]), np.zeros(1), f_full, f_empty
    rng = np.random.default_rng(seed)
    sizes = np.arange(1, n)
    probs = (n - 1) / (sizes * (n - sizes))
    probs /= probs.sum()
    half = (m + 1) // 2
    Z = np.zeros((2 * half, n), dtype=bool)
    for j in range(half):
        s = rng.choice(sizes, p=probs)
        on = rng.choice(n, size=s, replace=False)
        Z[2 * j, on] = True
        Z[2 * j + 1] = ~Z[2 * j]
    Z = Z[:m]
    cache: dict[bytes, float] = {}
    y = np.empty(len(Z))
    for j, z in enumerate(Z):
        key = np.packbits(z).tobytes()
        if key not in cache:
            cache[key] = value(z)
        y[j] = cache[key] - f_empty
    Zf = Z.astype(np.float64)
    phi = _kernel_fit(Zf, y, delta)
    n_batches = max(2, min(n_batches, len(Z) // 2))
    pairs = np.arange(len(Z)) // 2
    batches = np.array_split(np.unique(pairs), n_batches)
    est = []
    for bt in batches:
        rows = np.isin(pairs, bt)
        est.append(_kernel_fit(Zf[rows], y[rows], delta))
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    return phi, se, f_full, f_empty


def shapley_values(value: Callable[[np.ndarray], float], n: int, mode: str = "exact",
                   m: int = DEFAULT_SAMPLES, seed: int = 0) -> ShapleyResult:
    """Shapley values of a coalition game over ``n`` units.

    ``value`` receives a boolean on/off vector of length ``n``. ``exact``
    enumerates all ``2**n`` coalitions; ``sampled`` fits the constrained
    kernel regression on ``m`` coalitions drawn from the Shapley kernel
    (complement-paired) and reports batch-means standard errors.
    """
    if n == 0:
        f = value(np.zeros(0, dtype=bool))
        return ShapleyResult(np.zeros(0), np.zeros(0), f, f, mode)
    if mode == "exact":
        phi, f_full, f_empty = _shapley_exact(value, n)
        return ShapleyResult(phi, np.zeros(n), float(f_full), float(f_empty), mode)
    if mode == "sampled":
        phi, se, f_full, f_empty = _shapley_sampled(value, n, m, seed)
        return ShapleyResult(phi, se, float(f_full), float(f_empty), mode)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# temporal attribution


def prune_windows(model_or_target, token_sets, t_star: int, baseline: np.ndarray, eta: float = DEFAULT_ETA,
                  target: str = "expected") -> int:
    """Largest prefix length ``T_p`` whose windows can be merged into one unit.

    Both replacing the prefix by baseline windows must leave the output
    within ``eta`` of the actual output, and keeping only the prefix (suffix
    replaced) must stay within ``eta`` of the all-baseline output.
    """
    if t_star < 1:
        raise ValueError("t_star must be >= 1")
    f = model_or_target if callable(model_or_target) else make_target(model_or_target, target, t_star)
    seq = list(token_sets)[: t_star + 1]
    n = len(seq)
    f_x = f(seq)
    f_b = f([baseline] * n)
    for tp in range(n, -1, -1):
        mask = np.arange(n) >= tp
        keep_suffix = perturb_windows(seq, mask, baseline)
        keep_prefix = perturb_windows(seq, ~mask, baseline)
        if abs(f(keep_suffix) - f_x) <= eta and abs(f(keep_prefix) - f_b) <= eta:
            return tp
    return 0


@dataclass
class Attribution:
    target: str
    t_star: int
    unit_kind: list[str]
    units: list[str]
    phi: np.ndarray
    se: np.ndarray
    f_baseline: float
    f_x: float
    mode: str
    pruned_index: int = 0
    meta: dict = field(default_factory=dict)

    def local_accuracy_gap(self) -> float:
        return float(self.phi.sum() - (self.f_x - self.f_baseline))

    def rows(self, patient_id: str):
        for kind, unit, phi, se in zip(self.unit_kind, self.units, self.phi, self.se):
            yield patient_id, self.t_star, self.target, kind, unit, float(phi), self.mode, float(se)


def _window_units(t_star, tp):
    groups = []
    if tp > 0:
        groups.append(list(range(tp)))
    groups.extend([w] for w in range(tp, t_star + 1))
    return groups


def timeshap_windows(model, token_sets, t_star: int, target: str, baseline: np.ndarray, mode: str = "exact",
                     eta: float | None = DEFAULT_ETA, m: int = DEFAULT_SAMPLES, seed: int = 0,
                     value_fn: Callable | None = None) -> Attribution:
    """Window-level attribution of the output at ``t_star``.

    ``eta=None`` disables pruning. ``value_fn`` (token sets -> float)
    overrides the model target, mainly for constructed games.
    """
    seq = list(token_sets)[: t_star + 1]
    if not 0 <= t_star < len(token_sets):
        raise ValueError("t_star outside the stay")
    f = value_fn or make_target(model, target, t_star)
    tp = prune_windows(f, seq, t_star, baseline, eta) if (eta is not None and t_star >= 1) else 0
    groups = _window_units(t_star, tp)

    def value(on):
        mask = np.ones(len(seq), dtype=bool)
        for g, flag in zip(groups, on):
            if not flag:
                mask[g] = False
        return f(perturb_windows(seq, mask, baseline))

    res = shapley_values(value, len(groups), mode, m, seed)
    kinds = ["pruned" if (tp > 0 and i == 0) else "window" for i in range(len(groups))]
    units = [f"0-{tp - 1}" if k == "pruned" else str(g[0]) for k, g in zip(kinds, groups)]
    return Attribution(target, t_star, kinds, units, res.phi, res.se, res.f_empty, res.f_full, mode, tp)


def timeshap_tokens(model, token_sets, t_star: int, target: str, baseline: np.ndarray, token_variables,
                    pruned_index: int = 0, mode: str = "sampled", m: int = DEFAULT_SAMPLES, seed: int = 0,
                    token_names: Sequence[str] | None = None, value_fn: Callable | None = None) -> Attribution:
    """Token-level attribution over the distinct tokens of the unpruned windows.

    A token unit toggles in every unpruned window at once; the pruned prefix
    (if any) is one extra unit that toggles whole windows.
    """
    seq = list(token_sets)[: t_star + 1]
    f = value_fn or make_target(model, target, t_star)
    perturber = TokenPerturber(token_variables, baseline)
    live = list(range(pruned_index, t_star + 1))
    tokens = sorted(set().union(*(set(seq[w].tolist()) for w in live))) if live else []
    has_pruned = pruned_index > 0
    n = len(tokens) + int(has_pruned)

    def value(on):
        off = {tok for tok, flag in zip(tokens, on[: len(tokens)]) if not flag}
        out = perturber.perturb(seq, live, off)
        if has_pruned and not on[-1]:
            for w in range(pruned_index):
                out[w] = baseline
        return f(out)

    res = shapley_values(value, n, mode, m, seed)
    names = [token_names[t] if token_names is not None else str(t) for t in tokens]
    kinds = ["token"] * len(tokens)
    if has_pruned:
        names.append(f"0-{pruned_index - 1}")
        kinds.append("pruned")
    return Attribution(target, t_star, kinds, names, res.phi, res.se, res.f_empty, res.f_full, mode, pruned_index)
