"""Cross-validation partitions, optimisation and the static baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import expected_index, somers_dxy
from .errors import DataError, ParseError, UndefinedMetricError
from .seqmodel import PROB_FLOOR, TrajectoryModel, forward_trajectory, init_model, loss_and_grads

log = logging.getLogger(__name__)

N_CLASSES = 7


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1
    max_epochs: int = 30
    patience: int = 10
    dropout: float = 0.2
    window_limit: int = 84
    bin_count: int = 20
    d: int = 128
    h: int = 128
    cell: str = "gru"
    decoder: str = "multinomial"
    seed: int = 0
    window_hours: float = 2.0
    repeats: int = 20
    folds: int = 5
    grad_clip: float = 10.0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "window_limit", "bin_count",
                     "d", "h", "window_hours", "repeats", "folds", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"config {name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("config dropout must be in [0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("config patience must not exceed max_epochs")
        if self.cell not in ("gru", "lstm"):
            raise ValueError("config cell must be gru or lstm")
        if self.decoder not in ("multinomial", "ordinal"):
            raise ValueError("config decoder must be multinomial or ordinal")
        if self.bin_count < 2:
            raise ValueError("config bin_count must be >= 2")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise DataError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    kwargs[key] = int(raw)
                elif kind == "float":
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw).strip().lower()
            except ValueError:
                raise DataError(f"config {key}: bad value {raw!r}") from None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise DataError(str(exc)) from None


def load_config(path) -> TrainConfig:
    """Parse a flat ``key=value`` file (``#`` starts a comment)."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key=value", path, line_no)
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return TrainConfig.from_mapping(values)


# ---------------------------------------------------------------------------
# partitions


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class Partition:
    repeat: int
    fold: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass
class PartitionScheme:
    repeats: int
    folds: int
    seed: int
    partitions: list[Partition]

    def get(self, repeat: int, fold: int) -> Partition:
        for p in self.partitions:
            if p.repeat == repeat and p.fold == fold:
                return p
        raise KeyError((repeat, fold))

    def to_rows(self):
        for p in self.partitions:
            for role in ("train", "val", "test"):
                for pid in getattr(p, role):
                    yield p.repeat, p.fold, pid, role


def _deal(groups: list[list[str]], k: int, start: int = 0) -> list[list[str]]:
    """Round-robin class members into ``k`` bins; the bin pointer carries over between classes."""
    bins: list[list[str]] = [[] for _ in range(k)]
    pos = start
    for members in groups:
        for pid in members:
            bins[pos % k].append(pid)
            pos += 1
    return bins


def make_partitions(outcomes, repeats: int = 20, folds: int = 5, seed: int = 0) -> PartitionScheme:
    """Stratified repeated K-fold with a stratified validation share nested in each training set.

    ``outcomes`` is a sequence of :class:`OutcomeLabel` or a mapping of
    patient id to outcome index.
    """
    if hasattr(outcomes, "items"):
        labels = {str(k): int(v) for k, v in outcomes.items()}
    else:
        labels = {o.patient_id: int(o.gose_index) for o in outcomes}
    if folds < 2:
        raise ValueError("need at least two folds")
    if folds > len(labels):
        raise ValueError("more folds than patients")
    pids = sorted(labels)
    parts = []
    for r in range(repeats):
        rng = np.random.default_rng(derive_seed(seed, r))
        groups = []
        for c in range(N_CLASSES):
            members = [p for p in pids if labels[p] == c]
            groups.append([members[i] for i in rng.permutation(len(members))])
        test_bins = _deal(groups, folds)
        for f in range(folds):
            test = set(test_bins[f])
            vrng = np.random.default_rng(derive_seed(seed, r, f))
            rest = []
            for grp in groups:
                members = [p for p in grp if p not in test]
                rest.append([members[i] for i in vrng.permutation(len(members))])
            val = set(_deal(rest, folds)[0])
            train = [p for p in pids if p not in test and p not in val]
            parts.append(Partition(r, f, tuple(train), tuple(sorted(val)), tuple(sorted(test))))
    return PartitionScheme(repeats, folds, seed, parts)


# ---------------------------------------------------------------------------
# loss, gradients, Adam


def nll_loss(output, label) -> float:
    """Window-mean negative log class probability of the true outcome."""
    idx = label.gose_index if hasattr(label, "gose_index") else int(label)
    p = np.maximum(np.asarray(output.p)[:, idx], PROB_FLOOR)
    return float(-np.log(p).mean())


def backward(token_sets, label, model: TrajectoryModel):
    """Exact gradients of :func:`nll_loss` for one stay; returns ``(loss, grads)``."""
    idx = label.gose_index if hasattr(label, "gose_index") else int(label)
    return loss_and_grads(model, token_sets, idx)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# training


@dataclass
class Example:
    patient_id: str
    token_sets: list
    label: int


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dxy: float
    stopped: bool = False


@dataclass
class TrainResult:
    model: TrajectoryModel
    log: list[EpochLog]
    best_epoch: int


def end_of_stay_dxy(model: TrajectoryModel, examples: Sequence[Example]) -> float:
    scores = [forward_trajectory(ex.token_sets, model).expected[-1] for ex in examples]
    try:
        return somers_dxy(np.array(scores), np.array([ex.label for ex in examples]))
    except UndefinedMetricError:
        return math.nan


def train_fold(train: Sequence[Example], val: Sequence[Example], config: TrainConfig, vocab_size: int,
               seed: int | None = None, meta: dict | None = None) -> TrainResult:
    """Train one model with per-epoch validation Dxy early stopping.

    Training sequences are cut to ``config.window_limit`` windows; validation
    uses each stay's full length and scores its final window. The returned
    model is the snapshot from the best validation epoch.
    """
    if not train:
        raise ValueError("no training examples")
    seed = config.seed if seed is None else seed
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    model = init_model(vocab_size, config.d, config.h, config.cell, config.decoder,
                       seed=np.random.default_rng(init_ss), meta=meta)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    state = AdamState.zeros_like(model.params)
    limit = config.window_limit
    seqs = [ex.token_sets[:limit] for ex in train]

    best_dxy = -math.inf
    best_model = None
    best_epoch = 0
    bad = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = None
            for i in batch:
                loss, grads = loss_and_grads(model, seqs[i], train[i].label, config.dropout, drop_rng)
                total += loss
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            if len(batch) > 1:
                for k in acc:
                    acc[k] /= len(batch)
            clip_global_norm(acc, config.grad_clip)
            adam_step(model.params, acc, state, config.learning_rate)
        train_loss = total / len(train)
        dxy = end_of_stay_dxy(model, val) if val else math.nan
        history.append(EpochLog(epoch, train_loss, dxy))
        log.info("epoch %d loss %.5f val_dxy %.4f", epoch, train_loss, dxy)
        if dxy > best_dxy:
            best_dxy, best_model, best_epoch, bad = dxy, model.copy(), epoch, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    history[-1].stopped = True
    if best_model is None:
        best_model, best_epoch = model.copy(), history[-1].epoch
    best_model.meta["best_epoch"] = best_epoch
    return TrainResult(best_model, history, best_epoch)


# ---------------------------------------------------------------------------
# static baseline


@dataclass
class BaselineModel:
    coef: np.ndarray
    intercept: np.ndarray
    classes: np.ndarray
    impute: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    converged: bool
    grad_norm: float
    n_iter: int
    feature_names: list[str] = field(default_factory=list)

    def predict_proba(self, X) -> np.ndarray:
        """Seven-column class probabilities (zero for classes unseen in training)."""
        X = np.array(X, dtype=np.float64, ndmin=2)
        X = np.where(np.isnan(X), self.impute, X)
        Z = (X - self.center) / self.scale
        logits = Z @ self.coef.T + self.intercept
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        sub = e / e.sum(axis=1, keepdims=True)
        out = np.zeros((X.shape[0], N_CLASSES))
        out[:, self.classes] = sub
        return out

    def coefficients(self):
        """Coefficients and intercepts on the original feature scale."""
        W = self.coef / self.scale
        b = self.intercept - W @ self.center
        return W, b

    def to_dict(self) -> dict:
        return {
            "format": "tokentraj-baseline-v1",
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "classes": self.classes.tolist(),
            "impute": self.impute.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "n_iter": self.n_iter,
            "feature_names": self.feature_names,
        }


def fit_static_baseline(X, labels, l2: float = 1e-4, max_iter: int = 10_000, tol: float = 1e-6,
                        feature_names=None) -> BaselineModel:
    """Multinomial logistic regression by accelerated full-batch gradient descent.

    Missing entries (NaN) take the training column mean. Features are
    standardised internally and the L2 penalty applies to the standardised
    weights, not the intercepts. Only classes present in ``labels`` are
    modelled.
    """
    X = np.array(X, dtype=np.float64, ndmin=2)
    y = np.asarray(labels, dtype=np.int64)
    n, d = X.shape
    if n != y.size:
        raise ValueError("features and labels differ in length")
    with np.errstate(invalid="ignore"):
        impute = np.nanmean(np.where(np.isnan(X), np.nan, X), axis=0) if n else np.zeros(d)
    impute = np.where(np.isnan(impute), 0.0, impute)
    X = np.where(np.isnan(X), impute, X)
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - center) / scale
    classes = np.unique(y)
    K = classes.size
    Y = (y[:, None] == classes[None, :]).astype(np.float64)

    A = np.hstack([Z, np.ones((n, 1))])
    lip = 0.5 * np.linalg.norm(A, 2) ** 2 / n + l2
    step = 1.0 / lip
    theta = np.zeros((K, d + 1))
    penal = np.ones(d + 1)
    penal[-1] = 0.0

    def gradient(th):
        logits = A @ th.T
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        P = e / e.sum(axis=1, keepdims=True)
        return (P - Y).T @ A / n + l2 * th * penal

    prev = theta.copy()
    momentum = theta.copy()
    t_k = 1.0
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = gradient(momentum)
        theta_new = momentum - step * g
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k)) / 2.0
        if np.vdot(g, theta_new - prev) > 0:
            t_next = 1.0
            momentum = theta_new.copy()
        else:
            momentum = theta_new + ((t_k - 1.0) / t_next) * (theta_new - prev)
        prev, theta, t_k = theta_new, theta_new, t_next
        if it % 10 == 0 or it == max_iter:
            gnorm = float(np.linalg.norm(gradient(theta)))
            if gnorm < tol:
                break
    converged = gnorm < tol
    if not converged:
        log.warning("static baseline did not converge: grad norm %.3g after %d iterations", gnorm, it)
    return BaselineModel(theta[:, :d].copy(), theta[:, d].copy(), classes, impute, center, scale,
                         converged, gnorm, it, list(feature_names or []))
