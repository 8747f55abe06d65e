"""JSON run configuration with strict validation.

Defaults alone describe the 12-step-to-12-step task with d=18, five
hyperedges, lr 1e-3 and batch 18.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DataConfig:
    series_path: str | None = None
    distance_path: str | None = None
    mask_path: str | None = None
    tau: int = 12
    upsilon: int = 12
    split_ratios: list = field(default_factory=lambda: [0.6, 0.2, 0.2])


@dataclass
class ModelConfig:
    d: int = 18
    num_hyperedges: int = 5
    hgat_heads: int = 1
    hgt_heads: int = 2
    gamma: float = 0.05
    enable_explicit_graph: bool = True
    enable_implicit_hypergraph: bool = True
    enable_spatial: bool = True
    enable_temporal: bool = True
    uncertainty: bool = False
    lambda_sparsity: float = 0.0
    kernel_width: float | None = None
    kernel_threshold: float = 0.1
    attn_dropout: float = 0.1
    head_depth: int = 2


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 18
    epochs: int = 30
    lr_patience: int = 5
    lr_factor: float = 0.5
    early_patience: int = 10
    seed: int = 0
    grad_clip: float | None = 5.0


@dataclass
class MissingConfig:
    scheme: str | None = None
    rate: float = 0.0
    p_failure: float = 0.0015


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    missing: MissingConfig = field(default_factory=MissingConfig)
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; ties checkpoints to configs."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    @property
    def uses_mask_channel(self) -> bool:
        return self.data.mask_path is not None or (
            self.missing.scheme is not None and self.missing.rate > 0)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "missing": MissingConfig}


def _coerce(path: str, value: Any, default: Any, annotation: str):
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if "bool" in annotation:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if annotation.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if annotation == "list":
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = RunConfig(base_dir=base_dir)
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "must be an object")
        target = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in fields:
                raise ConfigError(path, "unknown key")
            f = fields[key]
            setattr(target, key, _coerce(path, value, getattr(target, key), str(f.type)))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    def positive(path, v):
        if v is None or v <= 0:
            raise ConfigError(path, f"must be positive, got {v!r}")

    for key in ("tau", "upsilon"):
        positive(f"data.{key}", getattr(cfg.data, key))
    ratios = cfg.data.split_ratios
    if (len(ratios) != 3 or any(isinstance(r, bool) or not isinstance(r, (int, float)) or r <= 0 for r in ratios)
            or abs(sum(ratios) - 1.0) > 1e-9):
        raise ConfigError("data.split_ratios", "need three positive ratios summing to 1")
    m = cfg.model
    for key in ("d", "num_hyperedges", "hgat_heads", "hgt_heads", "gamma", "kernel_threshold", "head_depth"):
        positive(f"model.{key}", getattr(m, key))
    if m.kernel_width is not None:
        positive("model.kernel_width", m.kernel_width)
    if m.d % m.hgt_heads:
        raise ConfigError("model.hgt_heads", f"must divide d={m.d}")
    if m.lambda_sparsity < 0:
        raise ConfigError("model.lambda_sparsity", "must be non-negative")
    if not 0 <= m.attn_dropout < 1:
        raise ConfigError("model.attn_dropout", "must lie in [0, 1)")
    if m.enable_spatial and not (m.enable_explicit_graph or m.enable_implicit_hypergraph):
        raise ConfigError("model.enable_explicit_graph", "both spatial experts are disabled")
    t = cfg.train
    for key in ("lr", "batch", "epochs", "lr_patience", "lr_factor", "early_patience"):
        positive(f"train.{key}", getattr(t, key))
    if t.grad_clip is not None:
        positive("train.grad_clip", t.grad_clip)
    if t.seed < 0:
        raise ConfigError("train.seed", "must be non-negative")
    ms = cfg.missing
    if ms.scheme not in (None, "point", "block"):
        raise ConfigError("missing.scheme", f"must be null, 'point' or 'block', got {ms.scheme!r}")
    if not 0 <= ms.rate <= 1:
        raise ConfigError("missing.rate", "must lie in [0, 1]")
    if ms.p_failure < 0 or ms.p_failure > 1:
        raise ConfigError("missing.p_failure", "must lie in [0, 1]")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return from_dict(raw, base_dir=path.parent)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
