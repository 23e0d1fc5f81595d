"""Seeded synthetic cohorts with a planted latent severity.

Each patient has a latent severity ``z ~ N(0, 1)``. The outcome index is
drawn from a proportional-odds model ``P(index >= k | z) =
sigmoid((z - c_k) / noise_scale)``; signal variables are noisy read-outs of
``z`` and noise variables are independent of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._numeric import sigmoid
from .errors import UndefinedMetricError
from .metrics import somers_dxy
from .schema import (
    Observation,
    OutcomeLabel,
    StayRecord,
    VariableDictionary,
    VariableSpec,
    write_dictionary,
    write_observations,
    write_outcomes,
    write_stay_lengths,
)

TEXT_CHOICES = ("Fall from Height!", "Road traffic  collision", "ASSAULT (other)", "Sports-related", "")
NOISE_LEVELS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class SynthConfig:
    n: int = 400
    n_signal_static: int = 6
    n_signal_dynamic: int = 4
    n_noise_static: int = 10
    n_noise_dynamic: int = 10
    n_sparse_dynamic: int = 5
    n_signal_categorical: int = 2
    noise_scale: float = 0.5
    feature_noise: float = 0.5
    dynamic_noise: float = 0.5
    static_missing: float = 0.05
    dynamic_obs_rate: float = 0.8
    sparse_obs_rate: float = 0.1
    missing_severity: float = 0.0
    stay_min_hours: float = 24.0
    stay_mean_extra_hours: float = 48.0
    stay_max_hours: float = 240.0
    cutpoints: tuple = (-1.6, -0.9, -0.35, 0.2, 0.75, 1.4)
    window_hours: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("static_missing", "dynamic_obs_rate", "sparse_obs_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if len(self.cutpoints) != 6 or any(b < a for a, b in zip(self.cutpoints, self.cutpoints[1:])):
            raise ValueError("need six non-decreasing cutpoints")
        if self.n_sparse_dynamic > self.n_noise_dynamic:
            raise ValueError("more sparse dynamic variables than dynamic noise variables")
        if self.n_signal_categorical > self.n_signal_static:
            raise ValueError("more categorical signal variables than static signal variables")
        if self.noise_scale < 0 or self.feature_noise < 0 or self.dynamic_noise < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.stay_min_hours <= 0 or self.stay_max_hours < self.stay_min_hours:
            raise ValueError("bad stay length bounds")


def build_dictionary(config: SynthConfig) -> VariableDictionary:
    specs = []
    n_cat = config.n_signal_categorical
    for j in range(config.n_signal_static):
        kind = "categorical" if j < n_cat else "numeric"
        specs.append(VariableSpec(f"SSIG{j + 1}", kind, True, "static-signal"))
    for j in range(config.n_noise_static):
        if j == 0:
            kind = "text"
        elif j <= 2:
            kind = "categorical"
        else:
            kind = "numeric"
        specs.append(VariableSpec(f"SNOISE{j + 1}", kind, True, "static-noise"))
    for j in range(config.n_signal_dynamic):
        specs.append(VariableSpec(f"DSIG{j + 1}", "numeric", False, "dynamic-signal", intervention=j % 2 == 1))
    for j in range(config.n_noise_dynamic):
        specs.append(VariableSpec(f"DNOISE{j + 1}", "numeric", False, "dynamic-noise"))
    return VariableDictionary(tuple(specs))


def draw_outcome(z: float, config: SynthConfig, rng: np.random.Generator) -> int:
    cut = np.asarray(config.cutpoints)
    if config.noise_scale == 0:
        return int((z > cut).sum())
    u = rng.random()
    latent = z + config.noise_scale * math.log(u / (1.0 - u))
    return int((latent > cut).sum())


def _missing(rng, rate, z, link):
    if rate <= 0 and link == 0:
        return False
    if link == 0:
        return rng.random() < rate
    p = float(sigmoid(math.log(max(rate, 1e-12) / max(1 - rate, 1e-12)) + link * z))
    return rng.random() < p


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _patient(i: int, config: SynthConfig):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
    pid = f"P{i:05d}"
    z = float(rng.normal())
    label = draw_outcome(z, config, rng)
    extra = rng.exponential(config.stay_mean_extra_hours) if config.stay_mean_extra_hours > 0 else 0.0
    length = round(min(config.stay_max_hours, config.stay_min_hours + extra), 2)
    length = max(length, 0.01)
    obs = []
    fn, link = config.feature_noise, config.missing_severity
    for j in range(config.n_signal_static):
        v = z + fn * rng.normal()
        if _missing(rng, config.static_missing, z, link):
            continue
        if j < config.n_signal_categorical:
            obs.append(Observation(f"SSIG{j + 1}", "low" if v < -0.5 else ("mid" if v < 0.5 else "high")))
        else:
            obs.append(Observation(f"SSIG{j + 1}", _fmt(v)))
    for j in range(config.n_noise_static):
        name = f"SNOISE{j + 1}"
        miss = rng.random() < config.static_missing
        if j == 0:
            value = TEXT_CHOICES[int(rng.integers(len(TEXT_CHOICES)))]
        elif j <= 2:
            value = NOISE_LEVELS[int(rng.integers(len(NOISE_LEVELS)))]
        else:
            value = _fmt(rng.normal())
        if not miss:
            obs.append(Observation(name, value))
    wh = config.window_hours
    n_windows = max(1, math.ceil(length / wh))
    for k in range(n_windows):
        lo, hi = k * wh, min((k + 1) * wh, length)
        for j in range(config.n_signal_dynamic):
            if not _missing(rng, 1.0 - config.dynamic_obs_rate, z, -link):
                t = round(lo + (hi - lo) * rng.random(), 2)
                ramp = 0.5 + 0.5 * min(1.0, t / 48.0)
                obs.append(Observation(f"DSIG{j + 1}", _fmt(z * ramp + config.dynamic_noise * rng.normal()),
                                       min(t, length)))
        for j in range(config.n_noise_dynamic):
            # the last n_sparse_dynamic noise variables are rarely charted
            rate = config.sparse_obs_rate if j >= config.n_noise_dynamic - config.n_sparse_dynamic \
                else config.dynamic_obs_rate
            if rng.random() < rate:
                t = round(lo + (hi - lo) * rng.random(), 2)
                obs.append(Observation(f"DNOISE{j + 1}", _fmt(rng.normal()), min(t, length)))
    return StayRecord(pid, tuple(obs), length), OutcomeLabel(pid, label), z


def generate_cohort(config: SynthConfig = SynthConfig(), return_latent: bool = False):
    """Return ``(dictionary, stays, outcomes)`` (plus latent ``z`` if asked)."""
    dictionary = build_dictionary(config)
    stays, outcomes, zs = [], [], []
    for i in range(config.n):
        stay, label, z = _patient(i, config)
        stays.append(stay)
        outcomes.append(label)
        zs.append(z)
    if return_latent:
        return dictionary, stays, outcomes, np.array(zs)
    return dictionary, stays, outcomes


def write_cohort(config: SynthConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dictionary, stays, outcomes = generate_cohort(config)
    paths = {
        "dict": out / "dictionary.csv",
        "obs": out / "observations.csv",
        "outcomes": out / "outcomes.csv",
        "stays": out / "stays.csv",
    }
    write_dictionary(dictionary, paths["dict"])
    write_observations(stays, paths["obs"])
    write_outcomes(outcomes, paths["outcomes"])
    write_stay_lengths(stays, paths["stays"])
    return paths


def outcome_marginals(config: SynthConfig, n_nodes: int = 80) -> np.ndarray:
    """Closed-form class frequencies, integrating the latent by Gauss-Hermite."""
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    cut = np.asarray(config.cutpoints)
    if config.noise_scale == 0:
        ge = (x[:, None] > cut[None, :]).astype(float)
    else:
        ge = sigmoid((x[:, None] - cut[None, :]) / config.noise_scale)
    ge = np.hstack([np.ones((len(x), 1)), ge, np.zeros((len(x), 1))])
    return w @ (ge[:, :-1] - ge[:, 1:])


def planted_dxy_oracle(config: SynthConfig = SynthConfig(), n_mc: int = 100_000, seed: int | None = None,
                       n_batches: int = 10):
    """Monte-Carlo Dxy of the true latent against sampled outcomes: ``(mean, se)``."""
    if n_mc < 10_000:
        raise ValueError("n_mc must be >= 10^4")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed if seed is None else seed, 0x0DD]))
    z = rng.normal(size=n_mc)
    cut = np.asarray(config.cutpoints)
    if config.noise_scale == 0:
        latent = z
    else:
        u = rng.random(n_mc)
        latent = z + config.noise_scale * np.log(u / (1.0 - u))
    y = (latent[:, None] > cut[None, :]).sum(1)
    vals = []
    for idx in np.array_split(np.arange(n_mc), n_batches):
        vals.append(somers_dxy(z[idx], y[idx]))
    vals = np.array(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_batches))
