"""Relevance-weighted token averaging.

A window's embedding is the convex combination of its token vectors with
weights ``softplus(r_raw)``; the padding token always has weight zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._numeric import sigmoid, softplus
from .tokenizer import PAD


@dataclass
class EmbeddingParams:
    E: np.ndarray
    r_raw: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        w = softplus(self.r_raw)
        w[PAD] = 0.0
        return w


def init_embedding(vocab_size: int, d: int, rng_seed) -> EmbeddingParams:
    if vocab_size < 2 or d < 1:
        raise ValueError("need vocab_size >= 2 and d >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = 1.0 / np.sqrt(d)
    E = rng.uniform(-bound, bound, size=(vocab_size, d))
    return EmbeddingParams(E=E, r_raw=np.zeros(vocab_size))


def weighted_mean(vectors, weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if not total > 0:
        raise ValueError("token weights sum to zero")
    return weights @ np.asarray(vectors, dtype=np.float64) / total


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    if p <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def embed_window(tokens, params: EmbeddingParams, dropout_p: float = 0.0, rng=None) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("empty token set")
    x = weighted_mean(params.E[tokens], params.weights[tokens])
    if dropout_p > 0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        x = x * dropout_mask(x.shape, dropout_p, rng)
    return x


@dataclass
class _EmbedCache:
    ids: np.ndarray
    seg: np.ndarray
    w: np.ndarray
    wsum: np.ndarray
    X: np.ndarray


def embed_sequence(token_sets: Sequence[np.ndarray], E: np.ndarray, r_raw: np.ndarray):
    """Embed every window of a stay at once. Returns ``(X, cache)``."""
    lengths = np.fromiter((len(t) for t in token_sets), dtype=np.int64, count=len(token_sets))
    if lengths.size == 0:
        raise ValueError("empty stay")
    if (lengths == 0).any():
        raise ValueError("empty token set")
    ids = np.concatenate(token_sets).astype(np.int64, copy=False)
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    seg = np.repeat(np.arange(len(lengths)), lengths)
    w = softplus(r_raw[ids])
    w[ids == PAD] = 0.0
    wsum = np.add.reduceat(w, starts)
    if not (wsum > 0).all():
        raise ValueError("window without weighted tokens")
    X = np.add.reduceat(w[:, None] * E[ids], starts, axis=0) / wsum[:, None]
    return X, _EmbedCache(ids, seg, w, wsum, X)


def embed_sequence_backward(cache: _EmbedCache, gX: np.ndarray, E: np.ndarray, r_raw: np.ndarray):
    """Gradients of a scalar loss w.r.t. ``E`` and ``r_raw`` given ``dL/dX``."""
    ids, seg, w = cache.ids, cache.seg, cache.w
    g = gX[seg]
    inv = 1.0 / cache.wsum[seg]
    dE = np.zeros_like(E)
    np.add.at(dE, ids, (w * inv)[:, None] * g)
    dw = np.einsum("ij,ij->i", E[ids] - cache.X[seg], g) * inv
    dr_tok = dw * sigmoid(r_raw[ids])
    dr_tok[ids == PAD] = 0.0
    dr = np.bincount(ids, weights=dr_tok, minlength=r_raw.size)
    return dE, dr
