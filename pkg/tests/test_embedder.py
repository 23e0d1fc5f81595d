import numpy as np
import pytest

from tokentraj._numeric import softplus
from tokentraj.embedder import (
    EmbeddingParams,
    dropout_mask,
    embed_sequence,
    embed_sequence_backward,
    embed_window,
    init_embedding,
    weighted_mean,
)


def test_init_bounds_shape_determinism():
    a = init_embedding(50, 16, 3)
    b = init_embedding(50, 16, 3)
    assert a.E.shape == (50, 16)
    assert np.abs(a.E).max() <= 0.25
    assert np.array_equal(a.E, b.E)
    assert np.all(a.r_raw == 0)
    with pytest.raises(ValueError):
        init_embedding(1, 4, 0)


def test_singleton_returns_vector():
    p = init_embedding(10, 4, 0)
    np.testing.assert_allclose(embed_window([5], p), p.E[5], rtol=1e-15)


def test_equal_weights_give_plain_mean():
    p = init_embedding(10, 4, 0)
    np.testing.assert_allclose(embed_window([2, 3, 7], p), p.E[[2, 3, 7]].mean(0), rtol=1e-14)


def test_weighted_mean_example():
    # weights 1 and 2 on vectors 0 and 9 give 6
    assert weighted_mean([[0.0], [9.0]], [1.0, 2.0])[0] == pytest.approx(6.0)
    assert weighted_mean([[3.0], [6.0]], [1.0, 1.0])[0] == pytest.approx(4.5)
    with pytest.raises(ValueError):
        weighted_mean([[1.0]], [0.0])


def test_relevance_weights():
    E = np.array([[0.0], [0.0], [2.0], [8.0]])
    r = np.array([5.0, 0.0, np.log(np.e - 1), np.log(np.e ** 3 - 1)])  # softplus -> 1, 3
    p = EmbeddingParams(E, r)
    assert p.weights[0] == 0.0
    assert embed_window([2, 3], p)[0] == pytest.approx((2 + 24) / 4)
    # a pad token never contributes
    assert embed_window([0, 2], p)[0] == pytest.approx(2.0)


def test_permutation_invariance(rng):
    p = EmbeddingParams(rng.normal(size=(20, 5)), rng.normal(size=20))
    toks = rng.permutation(np.arange(1, 20))[:7]
    np.testing.assert_allclose(embed_window(toks, p), embed_window(toks[::-1], p), rtol=1e-13)


def test_empty_set_rejected():
    p = init_embedding(10, 4, 0)
    with pytest.raises(ValueError):
        embed_window([], p)
    with pytest.raises(ValueError):
        embed_sequence([np.array([1]), np.array([], dtype=np.int64)], p.E, p.r_raw)
    with pytest.raises(ValueError):
        embed_sequence([np.array([0])], p.E, p.r_raw)


def test_dropout_mask(rng):
    m = dropout_mask((20000,), 0.2, rng)
    assert set(np.unique(m)) <= {0.0, 1.25}
    assert abs(m.mean() - 1.0) < 0.03
    assert np.all(dropout_mask((4,), 0.0, rng) == 1.0)
    with pytest.raises(ValueError):
        embed_window([1], init_embedding(4, 2, 0), dropout_p=0.5)


def test_sequence_matches_per_window(rng):
    p = EmbeddingParams(rng.normal(size=(15, 3)), rng.normal(size=15))
    sets = [np.array([1, 4]), np.array([2, 3, 9, 14]), np.array([7])]
    X, _ = embed_sequence(sets, p.E, p.r_raw)
    for t, s in enumerate(sets):
        np.testing.assert_allclose(X[t], embed_window(s, p), rtol=1e-13)


def test_backward_matches_finite_differences(rng):
    E = rng.normal(size=(8, 3))
    r = rng.normal(size=8)
    sets = [np.array([0, 2, 5]), np.array([1, 5]), np.array([3, 4, 6, 7])]
    G = rng.normal(size=(3, 3))

    def f(E_, r_):
        return float((embed_sequence(sets, E_, r_)[0] * G).sum())

    _, cache = embed_sequence(sets, E, r)
    dE, dr = embed_sequence_backward(cache, G, E, r)
    eps = 1e-6
    for idx in np.ndindex(E.shape):
        e = np.zeros_like(E)
        e[idx] = eps
        assert dE[idx] == pytest.approx((f(E + e, r) - f(E - e, r)) / (2 * eps), abs=1e-8)
    for i in range(8):
        e = np.zeros(8)
        e[i] = eps
        assert dr[i] == pytest.approx((f(E, r + e) - f(E, r - e)) / (2 * eps), abs=1e-8)
    assert dr[0] == 0.0
    assert softplus(np.array([0.0]))[0] == pytest.approx(np.log(2))
