"""Gated linear projection of raw node histories to d-dimensional features."""

from __future__ import annotations

import numpy as np

from .numeric import ShapeError, Tensor, as_tensor, glorot_uniform, sigmoid


def init_projection(rng: np.random.Generator, in_features: int, d: int) -> dict[str, Tensor]:
    """``in_features`` is tau, or 2*tau when the mask channel is appended."""
    return {
        "proj.W0": glorot_uniform(rng, (in_features, d), "proj.W0"),
        "proj.W1": glorot_uniform(rng, (in_features, d), "proj.W1"),
        "proj.W2": glorot_uniform(rng, (d, d), "proj.W2"),
    }


def projection_input(history, mask=None) -> Tensor:
    """History rows, with the observation mask concatenated when given."""
    history = np.asarray(history.data if isinstance(history, Tensor) else history)
    if mask is None:
        return Tensor(history)
    return Tensor(np.concatenate([history, np.asarray(mask, dtype=np.float64)], axis=-1))


def gln_forward(history, params: dict[str, Tensor]) -> Tensor:
    """X_bar = (sigmoid(X W0) * (X W1)) W2 applied row-wise to (..., n, tau)."""
    x = as_tensor(history)
    w0, w1, w2 = params["proj.W0"], params["proj.W1"], params["proj.W2"]
    if x.shape[-1] != w0.shape[0]:
        raise ShapeError(f"gln_forward: history has {x.shape[-1]} columns, weights expect {w0.shape[0]}")
    return (sigmoid(x @ w0) * (x @ w1)) @ w2
