"""Implicit hypergraph inference: embedding similarity and Gumbel-softmax incidence."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .numeric import ShapeError, Tensor

DEFAULT_TEMPERATURE = 0.05
NORM_EPS = 1e-8


def init_embeddings(rng: np.random.Generator, n: int, m: int, d: int) -> dict[str, Tensor]:
    scale = 1.0 / np.sqrt(d)
    return {
        "hg.node_emb": Tensor(rng.standard_normal((n, d)) * scale, requires_grad=True, name="hg.node_emb"),
        "hg.edge_emb": Tensor(rng.standard_normal((m, d)) * scale, requires_grad=True, name="hg.edge_emb"),
    }


def pairwise_similarity(z_nodes, z_edges, eps: float = NORM_EPS) -> Tensor:
    """S_ij = (z_i . z_j + 1) / (2 |z_i| |z_j| + eps), an n x m matrix."""
    zi, zj = nm.as_tensor(z_nodes), nm.as_tensor(z_edges)
    if zi.shape[-1] != zj.shape[-1]:
        raise ShapeError(f"pairwise_similarity: embedding dims {zi.shape} and {zj.shape} differ")
    ni = nm.sqrt(nm.square(zi).sum(axis=1, keepdims=True))  # n x 1
    nj = nm.sqrt(nm.square(zj).sum(axis=1, keepdims=True))  # m x 1
    return (zi @ zj.T + 1.0) / (2.0 * (ni @ nj.T) + eps)


def edge_probabilities(S) -> Tensor:
    """Stack sigmoid(S) (connected) and sigmoid(1 - S) (not connected) as n x m x 2."""
    S = nm.as_tensor(S)
    s3 = S.reshape(S.shape + (1,))
    return nm.sigmoid(nm.concat([s3, 1.0 - s3], axis=-1))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    return -np.log(-np.log(u))


@dataclass
class IncidenceSample:
    """Sampled incidence. ``value`` is what downstream layers consume."""

    value: Tensor
    hard: np.ndarray
    soft: Tensor | None
    gamma: float
    mode: str


def gumbel_sample(P, gamma: float = DEFAULT_TEMPERATURE, rng: np.random.Generator | None = None,
                  mode: str = "train", noise: np.ndarray | None = None,
                  straight_through: bool = True) -> IncidenceSample:
    """Draw an n x m incidence from edge probabilities ``P`` (n x m x 2).

    Training mode perturbs both channels with Gumbel noise, relaxes with a
    temperature-``gamma`` softmax and, by default, hardens the forward value
    while letting gradients through the relaxation. Evaluation mode returns the
    noiseless argmax.
    """
    if gamma <= 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    P = nm.as_tensor(P)
    if mode == "eval":
        hard = (P.data[..., 0] > P.data[..., 1]).astype(np.float64)
        return IncidenceSample(Tensor(hard), hard, None, gamma, "eval")
    if mode != "train":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if noise is None:
        if rng is None:
            raise ValueError("training-mode sampling needs an rng or explicit noise")
        noise = gumbel_noise(rng, P.shape)
    logits = (P + noise) / gamma
    soft = nm.softmax(logits, axis=-1)[..., 0]
    perturbed = P.data + noise
    hard = (perturbed[..., 0] > perturbed[..., 1]).astype(np.float64)
    value = nm.straight_through(soft, hard) if straight_through else soft
    return IncidenceSample(value, hard, soft, gamma, "train")


def sparsity_penalty(P, weight: float) -> Tensor:
    """``weight`` times the mean connection probability."""
    if weight < 0:
        raise ValueError("sparsity weight must be non-negative")
    P = nm.as_tensor(P)
    return P[..., 0].mean() * weight


def save_structure_matrix(path, matrix: np.ndarray, sensor_ids, fmt=repr) -> None:
    """Write an n x m matrix with a sensor column and one column per hyperedge."""
    matrix = np.asarray(matrix)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor"] + [f"e{j}" for j in range(matrix.shape[1])])
        for sid, row in zip(sensor_ids, matrix):
            w.writerow([sid] + [fmt(v) for v in row])
