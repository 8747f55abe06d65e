"""Mixture-of-experts fusion and the per-node forecast / uncertainty heads."""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .data import ScalerStats, invert_scaler
from .hg_repr import gated_fusion
from .numeric import Tensor, glorot_uniform, zeros

VAR_FLOOR = 1e-6


class FusionConfigError(ValueError):
    pass


def init_fusion(rng: np.random.Generator, d: int) -> dict[str, Tensor]:
    return {
        "moe.fs": glorot_uniform(rng, (d, d), "moe.fs"),
        "moe.fg": glorot_uniform(rng, (d, d), "moe.fg"),
    }


def moe_fuse(h_hyper, h_graph, params: dict[str, Tensor]) -> Tensor:
    """Gate the hypergraph and graph experts; a lone expert is just squashed."""
    if h_hyper is None and h_graph is None:
        raise FusionConfigError("both experts are disabled")
    if h_hyper is None:
        return nm.sigmoid(h_graph)
    if h_graph is None:
        return nm.sigmoid(h_hyper)
    return gated_fusion(h_hyper, h_graph, params["moe.fs"], params["moe.fg"])


def init_head(rng: np.random.Generator, d: int, upsilon: int, depth: int = 2,
              uncertainty: bool = False) -> dict[str, Tensor]:
    """Per-node MLP d -> d (ReLU) ... -> upsilon, plus a variance MLP when asked.

    ``depth`` counts linear maps; depth 1 is a single d -> upsilon map. The
    variance MLP has the same shape and its own weights.
    """
    params: dict[str, Tensor] = {}
    for k in range(depth - 1):
        params[f"head.W{k}"] = glorot_uniform(rng, (d, d), f"head.W{k}")
        params[f"head.b{k}"] = zeros((d,), f"head.b{k}")
    params["head.Wout"] = glorot_uniform(rng, (d, upsilon), "head.Wout")
    params["head.bout"] = zeros((upsilon,), "head.bout")
    if uncertainty:
        for k in range(depth - 1):
            params[f"head.var.W{k}"] = glorot_uniform(rng, (d, d), f"head.var.W{k}")
            params[f"head.var.b{k}"] = zeros((d,), f"head.var.b{k}")
        params["head.Wvar"] = glorot_uniform(rng, (d, upsilon), "head.Wvar")
        params["head.bvar"] = zeros((upsilon,), "head.bvar")
    return params


def _trunk(h, params: dict[str, Tensor], prefix: str = "head.") -> Tensor:
    x = nm.as_tensor(h)
    k = 0
    while f"{prefix}W{k}" in params:
        x = nm.relu(x @ params[f"{prefix}W{k}"] + params[f"{prefix}b{k}"])
        k += 1
    return x


def head_forward(h, params: dict[str, Tensor]) -> Tensor:
    """Scaled-domain point forecast (..., n, upsilon)."""
    return _trunk(h, params) @ params["head.Wout"] + params["head.bout"]


def forecast_head(h, params: dict[str, Tensor], scaler: ScalerStats) -> np.ndarray:
    """Point forecast in original units; node axis is -2."""
    scaled = head_forward(h, params).data
    return invert_scaler(scaled, scaler, axis=-2)


def uncertainty_head(h, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Mean and variance; variance = softplus(.) + 1e-6 so it never reaches 0."""
    mu = head_forward(h, params)
    var = nm.softplus(_trunk(h, params, "head.var.") @ params["head.Wvar"] + params["head.bvar"]) + VAR_FLOOR
    return mu, var
