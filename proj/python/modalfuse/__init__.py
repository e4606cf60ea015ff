"""Python interface to the modalfuse RGB + auxiliary-modality segmentation toolkit."""

from __future__ import annotations

import json
import os
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import _core
from ._core import ConfigError, ContractError, FormatError, NumericError, ShapeError

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "Model",
    "NumericError",
    "ShapeError",
    "default_config",
    "lr_at",
    "masked_sample_count",
    "metrics",
    "param_report",
    "resolve_config",
    "train",
]

ConfigLike = Optional[Mapping[str, Any]]


def _dump(config: ConfigLike) -> str:
    return json.dumps(dict(config) if config is not None else {})


def default_config() -> dict:
    """The complete default configuration."""
    return json.loads(_core.default_config())


def resolve_config(config: ConfigLike = None, overrides: Iterable[str] = ()) -> dict:
    """Layers a partial configuration and dotted overrides on the defaults and validates."""
    return json.loads(_core.resolve_config(_dump(config), list(overrides)))


def param_report(config: ConfigLike = None) -> dict:
    """Per-group, frozen and trainable parameter counts of the model for config."""
    return json.loads(_core.param_report(_dump(config)))


def lr_at(step: int, config: ConfigLike = None) -> float:
    return _core.lr_at(int(step), _dump(config))


def masked_sample_count(batch_size: int, ratio: float) -> int:
    return _core.masked_sample_count(int(batch_size), float(ratio))


def metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    foreground: Optional[Sequence[int]] = None,
    ignore_index: int = -1,
) -> dict:
    """OA, mean F1, mean IoU and per-class scores of two label maps."""
    report = _core.metrics(
        np.ascontiguousarray(pred, dtype=np.int32).ravel(),
        np.ascontiguousarray(gt, dtype=np.int32).ravel(),
        int(num_classes),
        None if foreground is None else [int(c) for c in foreground],
        int(ignore_index),
    )
    return json.loads(report)


def train(config: ConfigLike, seed: int, run_dir: "os.PathLike[str] | str") -> dict:
    """Trains one run into run_dir and returns the metrics document."""
    return json.loads(_core.train(_dump(config), int(seed), os.fspath(run_dir)))


class Model:
    """Inference wrapper around the native dual-stream network."""

    def __init__(self, config: ConfigLike = None, seed: int = 42, *, _native=None):
        self._native = _native if _native is not None else _core.Model(_dump(config), int(seed))

    @classmethod
    def from_checkpoint(cls, path: "os.PathLike[str] | str", drop_aux_heads: bool = True) -> "Model":
        return cls(_native=_core.Model.from_checkpoint(os.fspath(path), drop_aux_heads))

    @property
    def has_aux_heads(self) -> bool:
        return self._native.has_aux_heads

    def parameter_count(self, trainable_only: bool = False) -> int:
        return self._native.parameter_count(trainable_only)

    def predict(self, rgb: np.ndarray, aux: np.ndarray) -> np.ndarray:
        """Fused-branch logits [B, K, H, W] for normalised [B, 3, H, W] and [B, 1, H, W] inputs."""
        return self._native.predict(np.asarray(rgb, dtype=np.float64), np.asarray(aux, dtype=np.float64))
