"""Small numerical helpers shared across modules."""

import math

import numpy as np
from scipy.special import expit as sigmoid


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quantile_sorted(xs, f):
    """Linear-interpolation quantile of an ascending sequence.

    Uses the 1-based position ``f*(n-1)+1`` and interpolates between the
    neighbouring order statistics.
    """
    n = len(xs)
    if n == 0:
        raise ValueError("quantile of an empty sequence")
    pos = f * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    a, b = float(xs[lo]), float(xs[hi])
    if frac == 0.0 or a == b:
        return a
    return a + (b - a) * frac
