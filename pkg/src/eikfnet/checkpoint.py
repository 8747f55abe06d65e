"""Versioned text checkpoints.

Everything lives in one JSON document; floats are written with ``repr`` so
values round-trip exactly and two identical runs give identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, from_dict
from .data import ScalerStats
from .model import EIKFNet

FORMAT = "eikfnet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class HashMismatchError(CheckpointError):
    pass


def _encode(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _decode(obj: dict, name: str) -> np.ndarray:
    try:
        arr = np.asarray(obj["values"], dtype=np.float64)
        return arr.reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{name}: malformed array ({exc})") from None


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    scaler: ScalerStats
    sensor_ids: list[str]
    adjacency: np.ndarray | None = None
    adam_t: int = 0
    adam_m: dict | None = None
    adam_v: dict | None = None
    best_epoch: int = 0
    best_val_mae: float | None = None
    config_hash: str = ""

    def build_model(self) -> EIKFNet:
        cfg = self.config
        model = EIKFNet(cfg.model, len(self.sensor_ids), cfg.data.tau, cfg.data.upsilon,
                        self.adjacency, mask_channel=cfg.uses_mask_channel, seed=cfg.train.seed)
        model.load_state(self.params)
        return model


def from_training(cfg: RunConfig, model: EIKFNet, scaler: ScalerStats, sensor_ids,
                  result=None) -> Checkpoint:
    opt = None if result is None else result.optimizer
    return Checkpoint(
        config=cfg, params=model.state(), scaler=scaler, sensor_ids=list(sensor_ids),
        adjacency=model.adjacency,
        adam_t=0 if opt is None else opt.t,
        adam_m=None if opt is None else {k: v.copy() for k, v in opt.m.items()},
        adam_v=None if opt is None else {k: v.copy() for k, v in opt.v.items()},
        best_epoch=0 if result is None else result.best_epoch,
        best_val_mae=None if result is None else result.best_val_mae,
        config_hash=cfg.digest(),
    )


def dumps(ck: Checkpoint) -> str:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config_hash": ck.config.digest(),
        "config": ck.config.to_dict(),
        # relative data paths in the config resolve against this directory
        "source_dir": None if ck.config.base_dir is None else str(Path(ck.config.base_dir).resolve()),
        "sensor_ids": list(ck.sensor_ids),
        "scaler": {"mean": _encode(ck.scaler.mean), "std": _encode(ck.scaler.std)},
        "adjacency": None if ck.adjacency is None else _encode(ck.adjacency),
        "params": {k: _encode(v) for k, v in sorted(ck.params.items())},
        "optimizer": {
            "t": ck.adam_t,
            "m": {k: _encode(v) for k, v in sorted((ck.adam_m or {}).items())},
            "v": {k: _encode(v) for k, v in sorted((ck.adam_v or {}).items())},
        },
        "best_epoch": ck.best_epoch,
        "best_val_mae": ck.best_val_mae,
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save(path, ck: Checkpoint) -> None:
    Path(path).write_text(dumps(ck), encoding="utf-8")


def load(path, expected_hash: str | None = None, base_dir: Path | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_hash`` a config mismatch raises HashMismatchError."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an eikfnet checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    if base_dir is None:
        base_dir = Path(doc["source_dir"]) if doc.get("source_dir") else path.parent
    cfg = from_dict(doc["config"], base_dir=base_dir)
    stored = doc["config_hash"]
    if cfg.digest() != stored:
        raise HashMismatchError(f"{path}: stored config does not match its hash")
    if expected_hash is not None and expected_hash != stored:
        raise HashMismatchError(f"config hash {expected_hash[:12]} does not match checkpoint {stored[:12]}")
    opt = doc["optimizer"]
    return Checkpoint(
        config=cfg,
        params={k: _decode(v, k) for k, v in doc["params"].items()},
        scaler=ScalerStats(_decode(doc["scaler"]["mean"], "scaler.mean"),
                           _decode(doc["scaler"]["std"], "scaler.std")),
        sensor_ids=list(doc["sensor_ids"]),
        adjacency=None if doc["adjacency"] is None else _decode(doc["adjacency"], "adjacency"),
        adam_t=int(opt["t"]),
        adam_m={k: _decode(v, k) for k, v in opt["m"].items()},
        adam_v={k: _decode(v, k) for k, v in opt["v"].items()},
        best_epoch=int(doc["best_epoch"]),
        best_val_mae=doc["best_val_mae"],
        config_hash=stored,
    )
