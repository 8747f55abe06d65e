import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eikfnet import numeric as nm
from eikfnet.hg_repr import (fuse_hgat_hgt, gated_fusion, hgat_edge_agg, hgat_forward, hgat_node_agg,
                             hgt_forward, init_hg_fusion, init_hgat, init_hgt, multihead_self_attention)
from eikfnet.numeric import Tensor


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_incidence(rng, n, m):
    inc = (rng.random((n, m)) < 0.5).astype(float)
    inc[rng.integers(n), :] = 1.0  # no empty hyperedge
    return inc


def brute_hgat(x, inc, p, heads=1):
    """Explicit loops over nodes, hyperedges and heads."""
    n, m = inc.shape
    d = x.shape[1]
    edges = np.zeros((m, d))
    for z in range(heads):
        W0, a = p[f"hgat.{z}.W0"].data, p[f"hgat.{z}.a"].data[:, 0]
        for j in range(m):
            members = [i for i in range(n) if inc[i, j] == 1]
            if not members:
                continue
            scores = [float(np.maximum(x[i] @ W0, 0) @ a) for i in members]
            top = max(scores)
            ex = [np.exp(s - top) for s in scores]
            agg = np.zeros(d)
            for i, e in zip(members, ex):
                agg += e / sum(ex) * (x[i] @ W0)
            edges[j] += sig(agg)
    nodes = np.zeros((n, d))
    for z in range(heads):
        W0, W1, W2 = (p[f"hgat.{z}.{k}"].data for k in ("W0", "W1", "W2"))
        W3 = p[f"hgat.{z}.W3"].data[:, 0]
        for i in range(n):
            members = [j for j in range(m) if inc[i, j] == 1]
            phi = [max(float(np.concatenate([x[i] @ W2, edges[j] @ W2]) @ W3), 0.0) for j in members]
            acc = x[i] @ W0
            if members:
                top = max(phi)
                ex = [np.exp(f - top) for f in phi]
                for j, e in zip(members, ex):
                    acc = acc + e / sum(ex) * (edges[j] @ W1)
            nodes[i] += np.maximum(acc, 0.0)
    fs, fg = p["hgat.fs"].data, p["hgat.fg"].data
    out = np.zeros((n, d))
    for i in range(n):
        g = sig(nodes[i] @ fs + x[i] @ fg)
        out[i] = sig(g * nodes[i] + (1 - g) * x[i])
    return edges, out


@pytest.mark.parametrize("seed,heads", [(0, 1), (1, 1), (2, 2), (3, 1)])
def test_hgat_matches_brute_force(seed, heads):
    rng = np.random.default_rng(seed)
    n, m, d = 6, 4, 5
    x = rng.standard_normal((n, d))
    inc = random_incidence(rng, n, m)
    p = init_hgat(rng, d, heads)
    edges, expected = brute_hgat(x, inc, p, heads)
    np.testing.assert_allclose(hgat_edge_agg(x, inc, p, heads).data, edges, atol=1e-12, rtol=0)
    np.testing.assert_allclose(hgat_forward(x, inc, p, heads).data, expected, atol=1e-12, rtol=0)


def test_empty_hyperedge_is_zero_and_isolated_node_keeps_self_term():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4))
    inc = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    p = init_hgat(rng, 4)
    edges = hgat_edge_agg(x, inc, p)
    np.testing.assert_array_equal(edges.data[1], 0.0)
    nodes = hgat_node_agg(x, edges, inc, p)
    np.testing.assert_allclose(nodes.data[2], np.maximum(x[2] @ p["hgat.0.W0"].data, 0), atol=1e-15)


def test_batched_forward_equals_per_sample():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6, 4))
    inc = random_incidence(rng, 6, 3)
    p = init_hgat(rng, 4)
    batched = hgat_forward(x, inc, p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], hgat_forward(x[b], inc, p).data, atol=1e-14)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 6, 4)) * 3
    inc = random_incidence(rng, 6, 4)
    p = init_hgat(rng, 4, 2)
    p.update(init_hgt(rng, 4, 2))
    rec = []
    hgat_forward(x, inc, p, heads=2, record=rec)
    hgt_forward(x, p, 2, record=rec)
    assert {r[0] for r in rec} == {"alpha", "beta", "msa"}
    for kind, w, support in rec:
        rows = w.sum(axis=-1)
        if support is not None:
            has = support.any(axis=-1)
            np.testing.assert_array_equal(w[..., ~support], 0.0)
            rows = rows[..., has]
        assert np.max(np.abs(rows - 1.0)) <= 1e-12, kind


def test_hgt_matches_manual_block():
    rng = np.random.default_rng(7)
    n, d, heads = 5, 4, 2
    x = rng.standard_normal((n, d))
    p = init_hgt(rng, d, heads)
    p["hgt.ln1.g"].data = rng.uniform(0.5, 1.5, d)
    p["hgt.ln2.b"].data = rng.uniform(-0.5, 0.5, d)

    def ln(v, g, b):
        mu, var = v.mean(-1, keepdims=True), v.var(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + nm.LN_EPS) * g + b

    P = {k: v.data for k, v in p.items()}
    y = ln(x, P["hgt.ln1.g"], P["hgt.ln1.b"])
    q, k, v = y @ P["hgt.Wq"], y @ P["hgt.Wk"], y @ P["hgt.Wv"]
    dh = d // heads
    parts = []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        sc = q[:, s] @ k[:, s].T / np.sqrt(dh)
        a = np.exp(sc - sc.max(-1, keepdims=True))
        parts.append((a / a.sum(-1, keepdims=True)) @ v[:, s])
    u = np.concatenate(parts, -1) @ P["hgt.Wo"] + x
    z = ln(u, P["hgt.ln2.g"], P["hgt.ln2.b"])
    expected = np.maximum(z @ P["hgt.mlp.W1"] + P["hgt.mlp.b1"], 0) @ P["hgt.mlp.W2"] + P["hgt.mlp.b2"] + x
    np.testing.assert_allclose(hgt_forward(x, p, heads).data, expected, atol=1e-12)


def test_gated_fusion_limits():
    a, b = np.array([[2.0, -1.0]]), np.array([[0.5, 0.5]])
    big = Tensor(np.eye(2) * 1e3)
    zero = Tensor(np.zeros((2, 2)))
    # gate saturates at 1 when a fs is large and positive on every column
    out = gated_fusion(np.abs(a), b, big, zero).data
    np.testing.assert_allclose(out, sig(np.abs(a)), atol=1e-12)
    out = gated_fusion(a, b, zero, zero).data
    np.testing.assert_allclose(out, sig(0.5 * a + 0.5 * b), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n, m, d = 6, 3, 4
    x = rng.standard_normal((n, d))
    inc = random_incidence(rng, n, m)
    p = init_hgat(rng, d)
    p.update(init_hgt(rng, d, 2))
    p.update(init_hg_fusion(rng, d))
    perm = rng.permutation(n)

    def full(xx, ii):
        return fuse_hgat_hgt(hgt_forward(xx, p, 2), hgat_forward(xx, ii, p), p).data

    # summation order changes under permutation, so equality holds to rounding
    np.testing.assert_allclose(full(x[perm], inc[perm]), full(x, inc)[perm], atol=1e-12, rtol=0)


def test_dropout_only_with_rng():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 4))
    inc = random_incidence(rng, 6, 3)
    p = init_hgat(rng, 4)
    base = hgat_forward(x, inc, p).data
    np.testing.assert_array_equal(hgat_forward(x, inc, p, dropout=0.5).data, base)
    dropped = hgat_forward(x, inc, p, dropout=0.5, rng=np.random.default_rng(0)).data
    assert not np.array_equal(dropped, base)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    n, m, d = 5, 3, 4
    x = Tensor(rng.standard_normal((2, n, d)), requires_grad=True)
    inc = Tensor(rng.uniform(0.2, 1.0, (n, m)), requires_grad=True)
    p = init_hgat(rng, d, 2)
    p.update(init_hgt(rng, d, 2))
    p.update(init_hg_fusion(rng, d))
    c = rng.standard_normal((2, n, d))

    def loss():
        h = fuse_hgat_hgt(hgt_forward(x, p, 2), hgat_forward(x, inc, p, heads=2), p)
        return (h * c).sum()

    assert nm.gradient_check(loss, [x, inc] + list(p.values())) < 1e-4


def test_msa_single_head_uses_all_tokens():
    rng = np.random.default_rng(10)
    p = init_hgt(rng, 4, 1)
    rec = []
    multihead_self_attention(rng.standard_normal((5, 4)), p, 1, rec)
    assert rec[0][1].shape == (5, 5) and np.all(rec[0][1] > 0)
