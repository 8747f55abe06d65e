"""Losses, metrics, the historical-average baseline, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .config import TrainConfig
from .data import ScalerStats, WindowedDataset, invert_scaler
from .hg_infer import sparsity_penalty
from .numeric import ShapeError, Tensor
from .temporal import VAR_FLOOR

log = logging.getLogger(__name__)

MAPE_EPS = 1e-4


class NonFiniteLossError(FloatingPointError):
    pass


# --- losses -----------------------------------------------------------------
def _check_same(op, a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def mae_loss(target, pred, mask=None) -> Tensor:
    """Mean |target - pred| over all (or all observed) entries."""
    target, pred = nm.as_tensor(target), nm.as_tensor(pred)
    _check_same("mae_loss", target, pred)
    err = nm.abs_(pred - target)
    if mask is None:
        return err.mean()
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("mae_loss: every entry is masked")
    return (err * mask).sum() * (1.0 / count)


def gaussian_nll(target, mu, var, mask=None) -> Tensor:
    """Mean of log(var)/2 + (target - mu)^2 / (2 var); the 2*pi constant is dropped."""
    target, mu, var = nm.as_tensor(target), nm.as_tensor(mu), nm.as_tensor(var)
    _check_same("gaussian_nll", target, mu)
    _check_same("gaussian_nll", target, var)
    if np.any(var.data < VAR_FLOOR * (1 - 1e-12)):
        raise ValueError(f"gaussian_nll: variance below the {VAR_FLOOR} floor")
    terms = nm.log(var) * 0.5 + nm.square(target - mu) / (var * 2.0)
    if mask is None:
        return terms.mean()
    mask = np.asarray(mask, dtype=np.float64)
    return (terms * mask).sum() * (1.0 / mask.sum())


# --- metrics ----------------------------------------------------------------
@dataclass
class HorizonMetrics:
    mae: float | None
    rmse: float | None
    mape: float | None
    mean_sigma: float | None = None
    count: int = 0


@dataclass
class MetricReport:
    horizons: list[HorizonMetrics]
    overall: HorizonMetrics
    excluded: int = 0

    @property
    def mae(self) -> float | None:
        return self.overall.mae


def _metrics(err: np.ndarray, truth: np.ndarray, sigma: np.ndarray | None, mape_eps: float) -> HorizonMetrics:
    if err.size == 0:
        return HorizonMetrics(None, None, None, None, 0)
    ae = np.abs(err)
    nz = np.abs(truth) > mape_eps
    mape = float(100.0 * np.mean(ae[nz] / np.abs(truth[nz]))) if nz.any() else None
    ms = float(np.mean(sigma)) if sigma is not None else None
    return HorizonMetrics(float(ae.mean()), float(math.sqrt(np.mean(err * err))), mape, ms, int(err.size))


def compute_metrics(y_true, y_pred, mask=None, sigma=None, mape_eps: float = MAPE_EPS) -> MetricReport:
    """MAE, RMSE and MAPE (%) per horizon step and overall.

    Arrays are (..., upsilon) on the original scale. Masked cells are left
    out; a horizon with nothing left reports ``None`` for every metric.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"compute_metrics: shapes {y_true.shape} and {y_pred.shape} differ")
    keep = np.ones(y_true.shape, bool) if mask is None else np.asarray(mask) > 0
    ups = y_true.shape[-1]
    err = y_pred - y_true
    sig = None if sigma is None else np.asarray(sigma, dtype=np.float64)
    horizons = []
    for h in range(ups):
        k = keep[..., h]
        horizons.append(_metrics(err[..., h][k], y_true[..., h][k],
                                 None if sig is None else sig[..., h][k], mape_eps))
    overall = _metrics(err[keep], y_true[keep], None if sig is None else sig[keep], mape_eps)
    return MetricReport(horizons, overall, int((~keep).sum()))


# --- baseline ---------------------------------------------------------------
def ha_baseline(history, upsilon: int, mask=None, fallback=None) -> np.ndarray:
    """Per-node mean of the observed history, repeated over the horizon.

    Rows with no observed cell fall back to ``fallback`` (per-node values,
    typically the training mean; zero in the scaled domain if omitted).
    """
    history = np.asarray(history, dtype=np.float64)
    obs = np.ones_like(history) if mask is None else np.asarray(mask, dtype=np.float64)
    count = obs.sum(axis=-1)
    total = (history * obs).sum(axis=-1)
    fb = np.zeros(history.shape[-2]) if fallback is None else np.asarray(fallback, dtype=np.float64)
    fb = np.broadcast_to(fb, count.shape)
    avg = np.where(count > 0, total / np.maximum(count, 1), fb)
    return np.repeat(avg[..., None], upsilon, axis=-1)


# --- optimisation -------------------------------------------------------------
def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], moments: dict,
              lr: float, t: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip: float | None = None):
    """Functional Adam update; returns (new params, new moments)."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    grads = {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    clip_global_norm(grads, clip)
    m_old = moments.get("m", {})
    v_old = moments.get("v", {})
    new_p, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k, np.zeros_like(p))
        m = beta1 * m_old.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * v_old.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        new_p[k] = p - lr * mh / (np.sqrt(vh) + eps)
        m_new[k], v_new[k] = m, v
    return new_p, {"m": m_new, "v": v_new}


class PlateauSchedule:
    """Multiply the lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad = 0

    def step(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.lr *= self.factor
            self.bad = 0
            return True
        return False


# --- loop ---------------------------------------------------------------------
@dataclass
class DataBundle:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    scaler: ScalerStats
    sensor_ids: list[str]
    adjacency: np.ndarray | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float
    optimizer: Adam = field(repr=False)


def predict(model, windows: WindowedDataset, scaler: ScalerStats, batch: int = 512):
    """Original-scale (mean, sigma-or-None) forecasts for every window."""
    means, sigmas = [], []
    with nm.no_grad():
        for start in range(0, len(windows), batch):
            sl = slice(start, start + batch)
            out = model.forward(windows.history[sl], windows.history_mask[sl], train=False)
            means.append(invert_scaler(out.mean.data, scaler, axis=-2))
            if out.var is not None:
                sigmas.append(np.sqrt(out.var.data) * scaler.std[:, None])
    mean = np.concatenate(means) if means else np.zeros((0, model.n, model.upsilon))
    sigma = np.concatenate(sigmas) if sigmas else None
    return mean, sigma


def evaluate(model, windows: WindowedDataset, scaler: ScalerStats) -> MetricReport:
    mean, sigma = predict(model, windows, scaler)
    truth = invert_scaler(windows.target, scaler, axis=-2)
    return compute_metrics(truth, mean, windows.target_mask, sigma)


def batch_loss(model, windows: WindowedDataset, train_cfg_lambda: float, rng) -> Tensor:
    out = model.forward(windows.history, windows.history_mask, train=True, rng=rng)
    if out.var is not None:
        loss = gaussian_nll(windows.target, out.mean, out.var, windows.target_mask)
    else:
        loss = mae_loss(windows.target, out.mean, windows.target_mask)
    if train_cfg_lambda > 0 and out.probs is not None:
        loss = loss + sparsity_penalty(out.probs, train_cfg_lambda)
    return loss


def train_loop(model, data: DataBundle, cfg: TrainConfig, lambda_sparsity: float = 0.0,
               on_epoch=None) -> TrainResult:
    """Adam on shuffled mini-batches with plateau lr halving and early stopping.

    Validation MAE (original scale) drives both the schedule and model
    selection; the best parameters are restored before returning.
    """
    shuffle_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    sample_rng = np.random.default_rng(sample_seq)
    opt = Adam(model.params, lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.lr_patience, cfg.lr_factor)
    best_val, best_epoch, best_state = math.inf, 0, model.state()
    history: list[EpochRecord] = []
    since_best = 0
    n_train = len(data.train)
    for epoch in range(1, cfg.epochs + 1):
        lr_used = sched.lr
        opt.lr = lr_used
        order = shuffle_rng.permutation(n_train)
        losses = []
        for b, start in enumerate(range(0, n_train, cfg.batch)):
            idx = order[start:start + cfg.batch]
            try:
                loss = batch_loss(model, data.train.subset(idx), lambda_sparsity, sample_rng)
            except FloatingPointError as exc:
                raise NonFiniteLossError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}")
            leaf_grads = nm.backward(loss)
            grads = {k: leaf_grads[p] for k, p in model.params.items() if p in leaf_grads}
            clip_global_norm(grads, cfg.grad_clip)
            opt.step(grads)
            losses.append(value)
        val_mae = evaluate(model, data.val, data.scaler).mae
        if val_mae is None or not math.isfinite(val_mae):
            raise NonFiniteLossError(f"validation MAE undefined at epoch {epoch}")
        record = EpochRecord(epoch, float(np.mean(losses)), val_mae, lr_used)
        history.append(record)
        log.info("epoch %d loss %.5f val_mae %.5f lr %.2e", epoch, record.train_loss, val_mae, lr_used)
        if on_epoch is not None:
            on_epoch(record)
        if val_mae < best_val:
            best_val, best_epoch, best_state = val_mae, epoch, model.state()
            since_best = 0
        else:
            since_best += 1
        sched.step(val_mae)
        if since_best >= cfg.early_patience:
            break
    model.load_state(best_state)
    return TrainResult(history, best_epoch, best_val, opt)
