"""Configuration, window shapes and per-window instance normalization."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import torch
from torch import Tensor


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


@dataclass(frozen=True)
class Config:
    num_channels: int = 1
    lookback: int = 192
    horizon: int = 32
    patch_size: int = 16
    patch_stride: int = 8
    hidden_dim: int = 256
    encoder_layers: int = 3
    msp_count: int = 2
    n_heads: int = 4
    lambda_time: float = 1.0
    lambda_freq: float = 0.2
    lambda_main: float = 0.5
    lambda_msp: float = 0.5
    lambda_contra: float = 1.0
    eps: float = 1e-5
    gumbel_temperature: float = 0.5
    anomaly_ratio: float = 1.0
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    dropout: float = 0.1
    mask_mode: str = "binary"
    use_graph: bool = True
    detach_purified: bool = False
    grad_clip: float = 5.0
    val_fraction: float = 0.2
    train_stride: int = 1
    score_stride: int = 0
    threshold_split: str = "val+test"

    def __post_init__(self) -> None:
        for name in ("num_channels", "lookback", "horizon", "patch_size", "patch_stride",
                     "hidden_dim", "n_heads", "batch_size", "train_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        for name in ("encoder_layers", "msp_count", "epochs", "score_stride"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.patch_size > self.lookback:
            raise ConfigError(f"patch_size {self.patch_size} exceeds lookback {self.lookback}")
        if self.patch_stride > self.patch_size:
            raise ConfigError("patch_stride must not exceed patch_size")
        if self.hidden_dim % self.n_heads:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        for name in ("lambda_time", "lambda_freq", "lambda_main", "lambda_msp", "lambda_contra",
                     "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eps <= 0 or self.gumbel_temperature <= 0 or self.learning_rate <= 0:
            raise ConfigError("eps, gumbel_temperature and learning_rate must be > 0")
        if not 0 < self.anomaly_ratio < 100:
            raise ConfigError("anomaly_ratio must lie in (0, 100)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.mask_mode not in ("binary", "soft"):
            raise ConfigError(f"mask_mode must be 'binary' or 'soft', got {self.mask_mode!r}")
        if self.threshold_split not in ("val+test", "val-only"):
            raise ConfigError("threshold_split must be 'val+test' or 'val-only'")

    @property
    def num_patches(self) -> int:
        return patch_count(self.lookback, self.patch_size, self.patch_stride)

    @property
    def stride_for_scoring(self) -> int:
        return self.score_stride or self.horizon

    def replace(self, **changes: Any) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def coerce_value(key: str, raw: str) -> Any:
    """Parse a textual config value into the type declared for ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip("'\"")


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = coerce_value(key, raw)
    return values


def load_config(path: str | Path, **overrides: Any) -> Config:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update(overrides)
    return Config.from_dict(values)


def patch_count(length: int, patch_size: int, stride: int) -> int:
    """Number of patches of ``patch_size`` taken every ``stride`` steps."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch_size > length:
        raise ValueError(f"window of length {length} is too short for patch size {patch_size}")
    return (length - patch_size) // stride + 1


def unfold_patches(x: Tensor, patch_size: int, stride: int) -> Tensor:
    """(..., L) -> (..., N, patch_size)."""
    patch_count(x.shape[-1], patch_size, stride)
    return x.unfold(-1, patch_size, stride)


@dataclass(frozen=True)
class InstanceStats:
    mean: Tensor  # (..., C, 1)
    std: Tensor  # (..., C, 1), >= eps


def instance_normalize(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, InstanceStats]:
    """Standardize each channel of a (..., C, L) window over time.

    Uses the population standard deviation; flat channels get std ``eps``
    and come out as zeros.
    """
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = centered.pow(2).mean(dim=-1, keepdim=True)
    # clamp the variance, not the std, so sqrt never sees 0 in backward
    std = var.clamp(min=eps * eps).sqrt()
    return centered / std, InstanceStats(mean, std)


def instance_denormalize(x: Tensor, stats: InstanceStats) -> Tensor:
    if stats.mean.shape[:-1] != x.shape[:-1]:
        raise ValueError(
            f"stats for shape {tuple(stats.mean.shape[:-1])} cannot denormalize {tuple(x.shape)}"
        )
    return x * stats.std + stats.mean


def check_window(x: Tensor, config: Config) -> None:
    if x.dim() < 2 or x.shape[-2:] != (config.num_channels, config.lookback):
        raise ValueError(
            f"expected window (..., {config.num_channels}, {config.lookback}), got {tuple(x.shape)}"
        )
    if not torch.isfinite(x).all():
        raise ValueError("window contains non-finite values")
