"""The full forecaster: projection, spatial experts, fusion and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .config import ModelConfig
from .graph_repr import graph_operator, init_tgcn, tgcn_unroll
from .hg_infer import (IncidenceSample, edge_probabilities, gumbel_sample, init_embeddings,
                       pairwise_similarity)
from .hg_repr import fuse_hgat_hgt, hgat_forward, hgt_forward, init_hg_fusion, init_hgat, init_hgt
from .numeric import Tensor
from .projection import gln_forward, init_projection, projection_input
from .temporal import head_forward, init_fusion, init_head, moe_fuse, uncertainty_head


@dataclass
class ForwardOutput:
    mean: Tensor  # scaled domain, (..., n, upsilon)
    var: Tensor | None
    probs: Tensor | None
    incidence: IncidenceSample | None


class EIKFNet:
    """Parameters plus forward pass for one configuration.

    ``adjacency`` is the binary explicit graph; ablation switches in ``cfg``
    decide which sub-networks (and parameters) exist.
    """

    def __init__(self, cfg: ModelConfig, n: int, tau: int, upsilon: int,
                 adjacency: np.ndarray | None, mask_channel: bool = False, seed: int = 0):
        self.cfg = cfg
        self.n, self.tau, self.upsilon = n, tau, upsilon
        self.mask_channel = mask_channel
        self.adjacency = None if adjacency is None else np.asarray(adjacency, dtype=np.float64)
        self.use_hyper = cfg.enable_spatial and cfg.enable_implicit_hypergraph
        self.use_graph = cfg.enable_spatial and cfg.enable_explicit_graph
        if self.use_graph and self.adjacency is None:
            raise ValueError("explicit graph enabled but no adjacency given")
        self.a_hat = graph_operator(self.adjacency) if self.use_graph else None

        rng = np.random.default_rng(seed)
        d = cfg.d
        channels = 2 if mask_channel else 1
        params: dict[str, Tensor] = {}
        params.update(init_projection(rng, channels * tau, d))
        if self.use_hyper:
            params.update(init_embeddings(rng, n, cfg.num_hyperedges, d))
            params.update(init_hgat(rng, d, cfg.hgat_heads))
            params.update(init_hgt(rng, d, cfg.hgt_heads))
            params.update(init_hg_fusion(rng, d))
        if self.use_graph:
            params.update(init_tgcn(rng, channels, d))
        if self.use_hyper and self.use_graph:
            params.update(init_fusion(rng, d))
        depth = cfg.head_depth if cfg.enable_temporal else 1
        params.update(init_head(rng, d, upsilon, depth, cfg.uncertainty))
        self.params = params

    # --- structure ----------------------------------------------------------
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def edge_probs(self) -> Tensor:
        S = pairwise_similarity(self.params["hg.node_emb"], self.params["hg.edge_emb"])
        return edge_probabilities(S)

    def eval_incidence(self) -> np.ndarray:
        with nm.no_grad():
            return gumbel_sample(self.edge_probs(), self.cfg.gamma, mode="eval").hard

    # --- forward ------------------------------------------------------------
    def forward(self, history, mask=None, train: bool = False, rng: np.random.Generator | None = None,
                record: list | None = None, incidence: IncidenceSample | None = None) -> ForwardOutput:
        """``history`` is (..., n, tau) in the scaled domain, masked cells zeroed."""
        history = np.asarray(history, dtype=np.float64)
        if history.shape[-1] != self.tau or history.shape[-2] != self.n:
            raise nm.ShapeError(f"forward: history shape {history.shape} does not match n={self.n}, tau={self.tau}")
        if self.mask_channel and mask is None:
            mask = np.ones_like(history)
        x_in = projection_input(history, mask if self.mask_channel else None)
        xbar = gln_forward(x_in, self.params)
        cfg = self.cfg
        probs = None
        if cfg.enable_spatial:
            h_hyper = h_graph = None
            if self.use_hyper:
                probs = self.edge_probs()
                if incidence is None:
                    mode = "train" if train else "eval"
                    incidence = gumbel_sample(probs, cfg.gamma, rng=rng, mode=mode)
                dropout = cfg.attn_dropout if train else 0.0
                h_att = hgat_forward(xbar, incidence.value, self.params, cfg.hgat_heads,
                                     dropout, rng if train else None, record)
                h_tr = hgt_forward(xbar, self.params, cfg.hgt_heads, record)
                h_hyper = fuse_hgat_hgt(h_tr, h_att, self.params)
            if self.use_graph:
                h_graph = tgcn_unroll(history, self.params, self.a_hat,
                                      mask if self.mask_channel else None)
            fused = moe_fuse(h_hyper, h_graph, self.params)
        else:
            fused = xbar
        if cfg.uncertainty:
            mean, var = uncertainty_head(fused, self.params)
        else:
            mean, var = head_forward(fused, self.params), None
        return ForwardOutput(mean, var, probs, incidence)

    # --- state --------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) ^ set(state))
            raise ValueError(f"parameter sets differ: {missing}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = arr.copy()
