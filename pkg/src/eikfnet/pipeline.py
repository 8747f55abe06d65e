"""Glue from a RunConfig to prepared windows and a freshly initialised model."""

from __future__ import annotations

import numpy as np

from .config import ConfigError, RunConfig
from .data import (DataError, RawSeries, apply_scaler, build_adjacency, chronological_split,
                   fit_scaler, load_distances, load_mask, load_series, make_windows, simulate_missing)
from .model import EIKFNet
from .training import DataBundle


def observation_mask(cfg: RunConfig, series: RawSeries) -> np.ndarray | None:
    if cfg.data.mask_path is not None:
        mask = load_mask(cfg.resolve(cfg.data.mask_path), series.sensor_ids)
        if mask.shape != series.values.shape:
            raise DataError(f"mask shape {mask.shape} does not match series {series.values.shape}")
        return mask
    ms = cfg.missing
    if ms.scheme is None or ms.rate == 0:
        return None
    return simulate_missing(ms.scheme, series.T, series.n, ms.rate, cfg.train.seed, ms.p_failure).mask


def prepare_data(cfg: RunConfig, series: RawSeries | None = None,
                 distances: np.ndarray | None = None, mask: np.ndarray | None = None) -> DataBundle:
    """Load (unless given), split chronologically, scale on train, window each split."""
    if series is None:
        if cfg.data.series_path is None:
            raise ConfigError("data.series_path", "required")
        series = load_series(cfg.resolve(cfg.data.series_path))
    if mask is None:
        mask = observation_mask(cfg, series)
    full_mask = np.ones_like(series.values) if mask is None else np.asarray(mask, dtype=np.float64)
    tau, ups = cfg.data.tau, cfg.data.upsilon
    parts = chronological_split(series, cfg.data.split_ratios, tau + ups, full_mask)
    (train, mtrain), (val, mval), (test, mtest) = parts
    # a sensor dark for (almost) the whole training span borrows pooled statistics
    scaler = fit_scaler(train.values, mtrain, series.sensor_ids, min_observed=tau + ups,
                        pooled_fallback=mask is not None)
    windows = []
    offset = 0
    for seg, m in parts:
        windows.append(make_windows(apply_scaler(seg.values, scaler), m, tau, ups, offset))
        offset += seg.T
    adjacency = None
    if cfg.model.enable_spatial and cfg.model.enable_explicit_graph:
        if distances is None:
            if cfg.data.distance_path is None:
                raise ConfigError("data.distance_path", "required when the explicit graph is enabled")
            distances = load_distances(cfg.resolve(cfg.data.distance_path), series.sensor_ids)
        adjacency = build_adjacency(distances, cfg.model.kernel_width, cfg.model.kernel_threshold).adjacency
    return DataBundle(windows[0], windows[1], windows[2], scaler, list(series.sensor_ids), adjacency)


def build_model(cfg: RunConfig, data: DataBundle) -> EIKFNet:
    n = len(data.sensor_ids)
    return EIKFNet(cfg.model, n, cfg.data.tau, cfg.data.upsilon, data.adjacency,
                   mask_channel=cfg.uses_mask_channel, seed=cfg.train.seed)
