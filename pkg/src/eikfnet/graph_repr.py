"""T-GCN over the explicit sensor graph: a GRU whose input transform is a GCN."""

from __future__ import annotations

import numpy as np

from . import numeric as nm
from .data import normalized_adjacency
from .numeric import ShapeError, Tensor, glorot_uniform, zeros


def init_tgcn(rng: np.random.Generator, in_channels: int, d: int) -> dict[str, Tensor]:
    params = {"tgcn.Wg": glorot_uniform(rng, (in_channels, d), "tgcn.Wg")}
    for gate in ("u", "r", "c"):
        params[f"tgcn.W{gate}"] = glorot_uniform(rng, (2 * d, d), f"tgcn.W{gate}")
        params[f"tgcn.B{gate}"] = zeros((d,), f"tgcn.B{gate}")
    return params


def gcn_apply(x, a_hat, w) -> Tensor:
    """A_hat X W for node features X of shape (..., n, c)."""
    x = nm.as_tensor(x)
    a_hat = nm.as_tensor(a_hat)
    w = nm.as_tensor(w)
    if a_hat.shape[-1] != x.shape[-2] or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"gcn_apply: incompatible shapes {a_hat.shape}, {x.shape}, {w.shape}")
    return (a_hat @ x) @ w


def tgcn_step(x_s, h_prev, params: dict[str, Tensor], a_hat, gcn_term: Tensor | None = None) -> Tensor:
    """One recurrence: update/reset gates and candidate from [gcn(x_s) ; H]."""
    if gcn_term is None:
        gcn_term = gcn_apply(x_s, a_hat, params["tgcn.Wg"])
    h_prev = nm.as_tensor(h_prev)
    xh = nm.concat([gcn_term, h_prev], axis=-1)
    u = nm.sigmoid(xh @ params["tgcn.Wu"] + params["tgcn.Bu"])
    r = nm.sigmoid(xh @ params["tgcn.Wr"] + params["tgcn.Br"])
    c = nm.tanh(nm.concat([gcn_term, r * h_prev], axis=-1) @ params["tgcn.Wc"] + params["tgcn.Bc"])
    return u * h_prev + (1.0 - u) * c


def step_inputs(history, mask=None) -> np.ndarray:
    """Per-step node inputs (..., tau, n, c): value channel, plus mask channel."""
    history = np.asarray(history, dtype=np.float64)
    chans = [history]
    if mask is not None:
        chans.append(np.asarray(mask, dtype=np.float64))
    stacked = np.stack(chans, axis=-1)  # (..., n, tau, c)
    return np.swapaxes(stacked, -3, -2)


def tgcn_unroll(history, params: dict[str, Tensor], a_hat, mask=None) -> Tensor:
    """Run the recurrence over the tau columns of ``history`` from H_0 = 0."""
    history = np.asarray(history.data if isinstance(history, Tensor) else history, dtype=np.float64)
    a_hat = np.asarray(a_hat.data if isinstance(a_hat, Tensor) else a_hat)
    xs = step_inputs(history, mask)  # (..., tau, n, c)
    tau = xs.shape[-3]
    # graph propagation of the raw inputs is parameter-free; do it once
    gcn_all = Tensor(a_hat @ xs) @ params["tgcn.Wg"]  # (..., tau, n, d)
    d = params["tgcn.Wg"].shape[1]
    h = Tensor(np.zeros(history.shape[:-1] + (d,)))
    for s in range(tau):
        h = tgcn_step(None, h, params, a_hat, gcn_term=gcn_all[..., s, :, :])
    return h


def graph_operator(adjacency: np.ndarray) -> np.ndarray:
    return normalized_adjacency(adjacency)
