import numpy as np
import pytest
from hypothesis import given, strategies as st

from graphflow import autodiff as ad
from graphflow.conditioners import ConditionerSpec, embed, embed_all, implied_adjacency
from graphflow.graph import is_acyclic

from conftest import fd_grad


def spec(kind, d=4, **kw):
    return ConditionerSpec(kind, d, embed_size=5, hidden=[12, 12], **kw)


def test_implied_adjacency_examples():
    assert implied_adjacency(spec("autoregressive", 3)).tolist() == [[0, 0, 0], [1, 0, 0], [1, 1, 0]]
    M = implied_adjacency(spec("coupling", 4, k=2))
    assert M[:2].sum() == 0 and M[2:, :2].tolist() == [[1, 1], [1, 1]] and M[2:, 2:].sum() == 0
    A = np.array([[0, 0, 1], [0, 0, 0], [0, 1, 0.0]])
    assert np.array_equal(implied_adjacency(spec("graphical", 3), A), A)


@given(st.sampled_from(["autoregressive", "coupling"]), st.integers(2, 12))
def test_implied_adjacency_is_acyclic(kind, d):
    assert is_acyclic(implied_adjacency(ConditionerSpec(kind, d, hidden=[2])))


def test_coupling_default_split_and_range():
    assert ConditionerSpec("coupling", 7, hidden=[2]).k == 3
    for k in (0, 5):
        with pytest.raises(ValueError):
            ConditionerSpec("coupling", 5, k=k, hidden=[2])
    with pytest.raises(ValueError):
        ConditionerSpec("made", 3)


def test_zero_mask_embedding_depends_only_on_index(rng):
    s = spec("graphical")
    p = s.init(rng)
    mask = np.zeros(4)
    for i in range(4):
        a = embed(s, p, rng.normal(size=4), mask, i).data
        b = embed(s, p, rng.normal(size=4), mask, i).data
        assert np.array_equal(a, b)
    assert not np.allclose(embed(s, p, np.zeros(4), mask, 0).data, embed(s, p, np.zeros(4), mask, 1).data)


def test_graphical_with_autoregressive_row_matches_autoregressive(rng):
    g, a = spec("graphical"), spec("autoregressive")
    p = g.init(rng)
    M = implied_adjacency(a)
    x = rng.normal(size=4)
    for i in range(4):
        assert np.array_equal(embed(g, p, x, M[i], i).data, embed(a, p, x, M[i], i).data)


def test_coupling_constant_for_conditioning_half(rng):
    s = spec("coupling", k=2)
    p = s.init(rng)
    p[s.const_key] = rng.normal(size=(4, 5))
    M = implied_adjacency(s)
    for i in range(2):
        out = embed(s, p, rng.normal(size=4), M[i], i).data
        assert np.array_equal(out, p[s.const_key][i])
    batch = embed_all(s, p, rng.normal(size=(3, 4)), M).data
    assert np.array_equal(batch[:, :2], np.broadcast_to(p[s.const_key][:2], (3, 2, 5)))


def test_self_conditioning_rejected(rng):
    s = spec("graphical", 3)
    p = s.init(rng)
    with pytest.raises(ValueError):
        embed(s, p, np.zeros(3), np.array([0, 1.0, 0]), 1)
    with pytest.raises(ValueError):
        embed_all(s, p, np.zeros((2, 3)), np.eye(3))


def test_batched_matches_single(rng):
    s = spec("graphical")
    p = s.init(rng)
    M = (rng.random((4, 4)) < 0.5) * (1 - np.eye(4))
    X = rng.normal(size=(6, 4))
    C = embed_all(s, p, X, M).data
    for b in range(6):
        for i in range(4):
            assert np.allclose(C[b, i], embed(s, p, X[b], M[i], i).data, atol=1e-14)


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_masked_inputs_have_zero_gradient(d, seed):
    r = np.random.default_rng(seed)
    s = ConditionerSpec("graphical", d, embed_size=3, hidden=[8])
    p = s.init(r)
    row = (r.random(d) < 0.5).astype(float)
    i = int(r.integers(d))
    row[i] = 0
    x = r.normal(size=d)
    w = r.normal(size=3)
    (g,) = ad.grad(lambda v: ad.vsum(embed(s, p, v, row, i) * w), x)
    num = fd_grad(lambda v: float(embed(s, p, v, row, i).data @ w), x)
    assert np.all(g[row == 0] == 0)
    assert np.allclose(num[row == 0], 0, atol=1e-12)


@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_embedding_is_permutation_consistent(d, seed):
    """Relabeling variables (and the one-hot code with them) permutes the embeddings."""
    r = np.random.default_rng(seed)
    s = ConditionerSpec("graphical", d, embed_size=3, hidden=[8])
    p = s.init(r)
    perm = r.permutation(d)
    P = np.eye(d)[perm]
    # first layer sees [x, code]; permute both halves of its input rows
    q = dict(p)
    W0 = p[f"{s.network.name}.W0"]
    q[f"{s.network.name}.W0"] = np.concatenate([W0[:d][perm], W0[d:][perm]])
    M = (r.random((d, d)) < 0.5) * (1 - np.eye(d))
    X = r.normal(size=(3, d))
    C = embed_all(s, p, X, M).data
    Cp = embed_all(s, q, X[:, perm], P @ M @ P.T).data
    assert np.allclose(Cp, C[:, perm], atol=1e-12)
