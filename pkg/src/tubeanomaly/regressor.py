"""Regression head: fused feature volume -> anomaly score in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import FeatureVolume

__all__ = [
    "RegressorConfig",
    "FULL_SCALE_FC_DIMS",
    "init_regressor",
    "score",
    "classify",
    "NORMAL",
    "ANOMALOUS",
]

FULL_SCALE_FC_DIMS = (1024, 256, 64, 1)

NORMAL = "normal"
ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class RegressorConfig:
    conv_channels: int = 64
    fc_dims: tuple = (128, 32, 8, 1)
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if not self.fc_dims or self.fc_dims[-1] != 1:
            raise ValueError(f"last fully-connected width must be 1, got {self.fc_dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return {
            "conv_channels": self.conv_channels,
            "fc_dims": list(self.fc_dims),
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressorConfig":
        return cls(int(d["conv_channels"]), tuple(d["fc_dims"]), float(d["dropout_rate"]))


def init_regressor(config: RegressorConfig, feature_shape: tuple, rng: np.random.Generator) -> dict:
    """Parameters for a head reading ``feature_shape`` = ``(S_h, S_w, C)``."""
    sh, sw, c = feature_shape
    bound = np.sqrt(1.0 / c)
    params = {
        "reg/conv/w": Parameter(rng.uniform(-bound, bound, (1, 1, c, config.conv_channels)), "reg/conv/w"),
        "reg/conv/b": Parameter(np.zeros(config.conv_channels), "reg/conv/b"),
    }
    fan_in = sh * sw * config.conv_channels
    for i, width in enumerate(config.fc_dims):
        bound = np.sqrt(1.0 / fan_in)
        params[f"reg/fc{i}/w"] = Parameter(rng.uniform(-bound, bound, (fan_in, width)), f"reg/fc{i}/w")
        params[f"reg/fc{i}/b"] = Parameter(np.zeros(width), f"reg/fc{i}/b")
        fan_in = width
    return params


def score(
    features,
    params: dict,
    config: RegressorConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Anomaly score of an ``S x S x C`` volume, or a vector for an ``N``-batch.

    1x1 conv -> ReLU -> flatten -> FC stack (ReLU + dropout between layers)
    -> sigmoid.
    """
    x = features.values if isinstance(features, FeatureVolume) else features
    x = x if isinstance(x, Tensor) else Tensor(x)
    batched = x.ndim == 4
    w = params["reg/conv/w"]
    if x.ndim not in (3, 4) or x.shape[-1] != w.shape[2]:
        raise ValueError(f"regressor expects S x S x {w.shape[2]} features, got {x.shape}")
    n = x.shape[0] if batched else 1
    h = ad.relu(ad.conv2d_1x1(x, w, params["reg/conv/b"]))
    h = ad.reshape(h, (n, -1))
    if h.shape[1] != params["reg/fc0/w"].shape[0]:
        raise ValueError(
            f"flattened features ({h.shape[1]}) do not match the first FC layer "
            f"({params['reg/fc0/w'].shape[0]})"
        )
    last = len(config.fc_dims) - 1
    for i in range(len(config.fc_dims)):
        h = ad.linear(h, params[f"reg/fc{i}/w"], params[f"reg/fc{i}/b"])
        if i < last:
            h = ad.relu(h)
            h = ad.dropout(h, config.dropout_rate, mode, rng)
    out = ad.sigmoid(h)
    return ad.reshape(out, (n,) if batched else ())


def classify(score_value: float, tau: float) -> str:
    """Binary decision: anomalous iff ``tau <= score``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {tau}")
    return ANOMALOUS if float(score_value) >= tau else NORMAL
