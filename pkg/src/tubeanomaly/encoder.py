"""Two-stream 3D convolutional video encoder.

An RGB stream and an optical-flow stream share one architecture (only the
stem's input channel count differs). Each stream maps a ``16 x H x W x C``
tube to a ``T' x S x S x C'`` activation taken before the final max-pool;
:func:`fuse` averages both over time and concatenates them on channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

__all__ = [
    "ConvBlock",
    "EncoderConfig",
    "FeatureVolume",
    "FULL_SCALE_FEATURE_SHAPE",
    "FLOW_CLIP",
    "init_stream",
    "init_encoder",
    "normalize_flow",
    "encode_stream",
    "encode_rgb",
    "encode_flow",
    "fuse",
]

# I3D ``Mixed_4f`` output after temporal averaging: recorded, not built.
FULL_SCALE_FEATURE_SHAPE = (14, 14, 832)
FULL_SCALE_FUSED_SHAPE = (14, 14, 2 * 832)

# displacement magnitude (pixels) mapped to +-1 before encoding
FLOW_CLIP = 20.0


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)
    pool: tuple | None = (2, 2, 2)


def _desk_blocks() -> tuple:
    return (
        ConvBlock(16, stride=(1, 2, 2)),
        ConvBlock(32),
        ConvBlock(64, pool=None),
    )


@dataclass(frozen=True)
class EncoderConfig:
    """Input extent and conv blocks of one stream.

    The default maps ``16 x 56 x 56`` to ``4 x 7 x 7 x 64``: a strided stem, a
    second pooled block and a last block whose output is read before pooling.
    """

    input_size: tuple = (16, 56, 56)
    blocks: tuple = field(default_factory=_desk_blocks)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.blocks)
        blocks = tuple(
            ConvBlock(
                int(b.channels),
                tuple(b.kernel),
                tuple(b.stride),
                tuple(b.padding),
                None if b.pool is None else tuple(b.pool),
            )
            for b in blocks
        )
        if not blocks:
            raise ValueError("encoder needs at least one conv block")
        object.__setattr__(self, "blocks", blocks)
        self.output_shape()

    def output_shape(self) -> tuple:
        """``(T', S_h, S_w, C)`` produced by one stream."""
        dims = list(self.input_size)
        for i, b in enumerate(self.blocks):
            dims = [(d + 2 * p - k) // s + 1 for d, k, s, p in zip(dims, b.kernel, b.stride, b.padding)]
            if min(dims) < 1:
                raise ValueError(f"block {i} collapses the volume to {dims}")
            if b.pool is not None and i < len(self.blocks) - 1:
                dims = [(d - w) // w + 1 for d, w in zip(dims, b.pool)]
                if min(dims) < 1:
                    raise ValueError(f"pool after block {i} collapses the volume to {dims}")
        return (*dims, self.blocks[-1].channels)

    def fused_shape(self) -> tuple:
        t, h, w, c = self.output_shape()
        return (h, w, 2 * c)

    def to_dict(self) -> dict:
        return {"input_size": list(self.input_size), "blocks": [asdict(b) for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(tuple(d["input_size"]), tuple(ConvBlock(**b) for b in d["blocks"]))


@dataclass(frozen=True)
class FeatureVolume:
    values: Tensor
    stream: str

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_stream(config: EncoderConfig, in_channels: int, rng: np.random.Generator, prefix: str) -> dict:
    params = {}
    cin = in_channels
    for i, b in enumerate(config.blocks):
        shape = (*b.kernel, cin, b.channels)
        fan_in = int(np.prod(b.kernel)) * cin
        params[f"{prefix}/conv{i}/w"] = Parameter(_uniform(rng, shape, fan_in), f"{prefix}/conv{i}/w")
        params[f"{prefix}/conv{i}/b"] = Parameter(np.zeros(b.channels), f"{prefix}/conv{i}/b")
        cin = b.channels
    return params


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict:
    params = init_stream(config, 3, rng, "rgb")
    params.update(init_stream(config, 2, rng, "flow"))
    return params


def normalize_flow(flows: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(flows, dtype=np.float64), -FLOW_CLIP, FLOW_CLIP) / FLOW_CLIP


def _check_input(x: np.ndarray, config: EncoderConfig, channels: int) -> None:
    tail = x.shape[-4:]
    if x.ndim not in (4, 5) or tuple(tail[:3]) != config.input_size or tail[3] != channels:
        raise ValueError(
            f"encoder expects {config.input_size} x {channels} input, got {x.shape}"
        )


def encode_stream(x: Tensor, params: dict, config: EncoderConfig, prefix: str) -> Tensor:
    h = x
    last = len(config.blocks) - 1
    for i, b in enumerate(config.blocks):
        h = ad.conv3d(h, params[f"{prefix}/conv{i}/w"], params[f"{prefix}/conv{i}/b"], b.stride, b.padding)
        h = ad.relu(h)
        if b.pool is not None and i < last:
            h = ad.max_pool3d(h, b.pool)
    return h


def encode_rgb(frames, params: dict, config: EncoderConfig) -> FeatureVolume:
    """Encode ``16 x H x W x 3`` RGB (or a batch of them) with the RGB stream."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    _check_input(x.value, config, 3)
    return FeatureVolume(encode_stream(x, params, config, "rgb"), "rgb")


def encode_flow(flows, params: dict, config: EncoderConfig, normalized: bool = True) -> FeatureVolume:
    """Encode ``16 x H x W x 2`` flow fields with the motion stream.

    ``normalized`` states whether the fields already went through
    :func:`normalize_flow`.
    """
    if isinstance(flows, Tensor):
        x = flows
    else:
        x = Tensor(flows if normalized else normalize_flow(flows))
    _check_input(x.value, config, 2)
    return FeatureVolume(encode_stream(x, params, config, "flow"), "flow")


def fuse(rgb: FeatureVolume, flow: FeatureVolume) -> FeatureVolume:
    """Average each stream over time, then concatenate on channels."""
    r, f = rgb.values, flow.values
    if r.shape[:-1] != f.shape[:-1]:
        raise ValueError(f"stream shapes disagree: rgb {r.shape} vs flow {f.shape}")
    pooled = [ad.temporal_avg_pool(r), ad.temporal_avg_pool(f)]
    return FeatureVolume(ad.concat(pooled, axis=-1), "fused")
