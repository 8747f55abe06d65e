"""Hypergraph representation learning: HgAT message passing, HgT encoder, gates.

Feature tensors are (..., n, d) with an optional leading batch axis; the
incidence is a shared n x m tensor whose entries weight the attention
support (zero entries are outside it).
"""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .numeric import Tensor, glorot_uniform, ones, zeros

SUPPORT_EPS = 1e-6


def init_hgat(rng: np.random.Generator, d: int, heads: int = 1) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for z in range(heads):
        p = f"hgat.{z}."
        for key in ("W0", "W1", "W2"):
            params[p + key] = glorot_uniform(rng, (d, d), p + key)
        params[p + "a"] = glorot_uniform(rng, (d, 1), p + "a")
        params[p + "W3"] = glorot_uniform(rng, (2 * d, 1), p + "W3")
    params["hgat.fs"] = glorot_uniform(rng, (d, d), "hgat.fs")
    params["hgat.fg"] = glorot_uniform(rng, (d, d), "hgat.fg")
    return params


def init_hgt(rng: np.random.Generator, d: int, heads: int = 2) -> dict[str, Tensor]:
    if d % heads:
        raise ValueError(f"model dim {d} is not divisible by {heads} attention heads")
    params = {
        "hgt.ln1.g": ones((d,), "hgt.ln1.g"),
        "hgt.ln1.b": zeros((d,), "hgt.ln1.b"),
        "hgt.ln2.g": ones((d,), "hgt.ln2.g"),
        "hgt.ln2.b": zeros((d,), "hgt.ln2.b"),
        "hgt.mlp.W1": glorot_uniform(rng, (d, 4 * d), "hgt.mlp.W1"),
        "hgt.mlp.b1": zeros((4 * d,), "hgt.mlp.b1"),
        "hgt.mlp.W2": glorot_uniform(rng, (4 * d, d), "hgt.mlp.W2"),
        "hgt.mlp.b2": zeros((d,), "hgt.mlp.b2"),
    }
    for key in ("Wq", "Wk", "Wv", "Wo"):
        params[f"hgt.{key}"] = glorot_uniform(rng, (d, d), f"hgt.{key}")
    return params


def init_hg_fusion(rng: np.random.Generator, d: int) -> dict[str, Tensor]:
    return {
        "hgfuse.fs": glorot_uniform(rng, (d, d), "hgfuse.fs"),
        "hgfuse.fg": glorot_uniform(rng, (d, d), "hgfuse.fg"),
    }


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def hgat_edge_agg(xbar, incidence, params: dict[str, Tensor], heads: int = 1,
                  dropout: float = 0.0, rng=None, record: list | None = None) -> Tensor:
    """Intra-edge aggregation: hyperedge representations (..., m, d).

    Per head, node i scores a . relu(x_i W0); each hyperedge normalizes the
    scores over its incident nodes and squashes the weighted sum of x_i W0
    through a sigmoid. Heads are summed; empty hyperedges give zero rows.
    """
    x = nm.as_tensor(xbar)
    inc = nm.as_tensor(incidence)
    n, m = inc.shape
    lead = x.shape[:-2]
    nonempty = (inc.data.sum(axis=0) > SUPPORT_EPS).astype(np.float64)[:, None]  # m x 1
    out = None
    for z in range(heads):
        p = f"hgat.{z}."
        v = x @ params[p + "W0"]  # (..., n, d)
        e = nm.relu(v) @ params[p + "a"]  # (..., n, 1)
        logits = nm.broadcast(nm.transpose(e), lead + (m, n))
        alpha = nm.softmax(logits, axis=-1, weights=nm.transpose(inc))  # (..., m, n)
        if record is not None:
            record.append(("alpha", alpha.data, inc.data.T > SUPPORT_EPS))
        alpha = _dropout(alpha, dropout, rng)
        head = nm.sigmoid(alpha @ v) * nonempty
        out = head if out is None else out + head
    return out


def hgat_node_agg(xbar, h_edges, incidence, params: dict[str, Tensor], heads: int = 1,
                  dropout: float = 0.0, rng=None, record: list | None = None) -> Tensor:
    """Inter-edge aggregation: hypernode representations (..., n, d).

    Per head, phi_ij = relu(W3 . [x_i W2 ; h_j W2]) is normalized over the
    hyperedges containing node i and the output is
    relu(x_i W0 + sum_j beta_ij h_j W1). Heads are summed.
    """
    x = nm.as_tensor(xbar)
    he = nm.as_tensor(h_edges)
    inc = nm.as_tensor(incidence)
    d = x.shape[-1]
    out = None
    for z in range(heads):
        p = f"hgat.{z}."
        w3 = params[p + "W3"]
        left = (x @ params[p + "W2"]) @ w3[:d]  # (..., n, 1)
        right = (he @ params[p + "W2"]) @ w3[d:]  # (..., m, 1)
        phi = nm.relu(left + nm.transpose(right))  # (..., n, m)
        beta = nm.softmax(phi, axis=-1, weights=inc)
        if record is not None:
            record.append(("beta", beta.data, inc.data > SUPPORT_EPS))
        beta = _dropout(beta, dropout, rng)
        head = nm.relu(x @ params[p + "W0"] + beta @ (he @ params[p + "W1"]))
        out = head if out is None else out + head
    return out


def gated_fusion(a, b, fs: Tensor, fg: Tensor) -> Tensor:
    """sigmoid(g * a + (1 - g) * b) with gate g = sigmoid(a fs + b fg)."""
    a, b = nm.as_tensor(a), nm.as_tensor(b)
    g = nm.sigmoid(a @ fs + b @ fg)
    return nm.sigmoid(g * a + (1.0 - g) * b)


def hgat_input_gate(h, xbar, fs: Tensor, fg: Tensor) -> Tensor:
    return gated_fusion(h, xbar, fs, fg)


def hgat_forward(xbar, incidence, params: dict[str, Tensor], heads: int = 1,
                 dropout: float = 0.0, rng=None, record: list | None = None) -> Tensor:
    """One HgAT layer followed by the input gate."""
    he = hgat_edge_agg(xbar, incidence, params, heads, dropout, rng, record)
    hn = hgat_node_agg(xbar, he, incidence, params, heads, dropout, rng, record)
    return hgat_input_gate(hn, xbar, params["hgat.fs"], params["hgat.fg"])


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return nm.layer_norm(x, axis=-1) * g + b


def multihead_self_attention(x, params: dict[str, Tensor], heads: int,
                             record: list | None = None) -> Tensor:
    x = nm.as_tensor(x)
    d = x.shape[-1]
    dh = d // heads
    q, k, v = x @ params["hgt.Wq"], x @ params["hgt.Wk"], x @ params["hgt.Wv"]
    outs = []
    for h in range(heads):
        sl = (Ellipsis, slice(h * dh, (h + 1) * dh))
        scores = (q[sl] @ nm.transpose(k[sl])) * (1.0 / np.sqrt(dh))
        attn = nm.softmax(scores, axis=-1)
        if record is not None:
            record.append(("msa", attn.data, None))
        outs.append(attn @ v[sl])
    merged = outs[0] if heads == 1 else nm.concat(outs, axis=-1)
    return merged @ params["hgt.Wo"]


def hgt_forward(xbar, params: dict[str, Tensor], heads: int = 2,
                record: list | None = None) -> Tensor:
    """Single pre-norm transformer block over hypernodes as tokens.

    The MLP residual returns to the input features rather than to the
    attention output.
    """
    x = nm.as_tensor(xbar)
    u = multihead_self_attention(_affine_ln(x, params["hgt.ln1.g"], params["hgt.ln1.b"]),
                                 params, heads, record) + x
    y = _affine_ln(u, params["hgt.ln2.g"], params["hgt.ln2.b"])
    mlp = nm.relu(y @ params["hgt.mlp.W1"] + params["hgt.mlp.b1"]) @ params["hgt.mlp.W2"] + params["hgt.mlp.b2"]
    return mlp + x


def fuse_hgat_hgt(h_hgt, h_hgat, params: dict[str, Tensor]) -> Tensor:
    return gated_fusion(h_hgt, h_hgat, params["hgfuse.fs"], params["hgfuse.fg"])
