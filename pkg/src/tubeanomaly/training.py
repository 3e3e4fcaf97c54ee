"""Model container, squared-error objective, Nesterov SGD and the training loop."""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import EncoderConfig, encode_flow, encode_rgb, fuse, init_encoder, normalize_flow
from .flow import FlowParams, flow_for_clip
from .regressor import RegressorConfig, init_regressor
from .regressor import score as regress
from .tubes import BoundingBox, Tube, VideoClip, extract_flow_tube, extract_tube, full_frame_tube, static_tube

__all__ = [
    "TrainingSample",
    "TrainConfig",
    "Model",
    "FlowCache",
    "mse_loss",
    "sgd_nesterov_step",
    "random_tube",
    "train",
    "save_model",
    "load_model",
    "ModelFormatError",
    "MODEL_MAGIC",
    "MODEL_VERSION",
]

log = logging.getLogger(__name__)

MODEL_MAGIC = b"TUBEMDL"
MODEL_VERSION = 1

TUBE, FULLFRAME = "tube", "fullframe"


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """A clip, the tube to read it through, and a binary label.

    ``tube`` may be ``None`` for normal clips, which carry no boxes; a random
    tube is drawn for them when one is needed.
    """

    clip: VideoClip
    tube: Tube | None
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.tube is not None:
            self.tube.validate(self.clip.dims)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 5
    epochs: int = 10
    train_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def random_tube(dims: tuple[int, int], rng: np.random.Generator, side_range=(0.25, 0.5)) -> Tube:
    """A static tube with sides drawn as fractions of the frame."""
    h, w = dims
    bw = max(rng.uniform(*side_range) * w, 2.0)
    bh = max(rng.uniform(*side_range) * h, 2.0)
    x0 = rng.uniform(0.0, w - bw)
    y0 = rng.uniform(0.0, h - bh)
    return static_tube(BoundingBox(float(np.floor(x0)), float(np.floor(y0)),
                                   float(np.floor(x0) + round(bw)), float(np.floor(y0) + round(bh))))


class FlowCache:
    """Per-clip optical flow, computed once on the full frames."""

    def __init__(self, params: FlowParams | None = None):
        self.params = params or FlowParams()
        self._store: dict = {}

    def __call__(self, clip: VideoClip) -> np.ndarray:
        key = id(clip)
        hit = self._store.get(key)
        if hit is None or hit[0] is not clip:
            hit = (clip, flow_for_clip(clip, self.params))
            self._store[key] = hit
        return hit[1]

    def clear(self) -> None:
        self._store.clear()


@dataclass
class Model:
    """Encoder and regressor parameters with optimizer state."""

    encoder_config: EncoderConfig
    regressor_config: RegressorConfig
    params: dict
    velocity: dict
    seed: int = 0
    flow_params: FlowParams = field(default_factory=FlowParams)

    @classmethod
    def initialize(
        cls,
        encoder_config: EncoderConfig | None = None,
        regressor_config: RegressorConfig | None = None,
        seed: int = 0,
        flow_params: FlowParams | None = None,
    ) -> "Model":
        encoder_config = encoder_config or EncoderConfig()
        regressor_config = regressor_config or RegressorConfig()
        rng = np.random.default_rng(seed)
        params = init_encoder(encoder_config, rng)
        params.update(init_regressor(regressor_config, encoder_config.fused_shape(), rng))
        velocity = {k: np.zeros(p.shape) for k, p in params.items()}
        return cls(encoder_config, regressor_config, params, velocity, seed, flow_params or FlowParams())

    @property
    def input_dims(self) -> tuple[int, int]:
        return self.encoder_config.input_size[1:]

    def encoder_params(self) -> dict:
        return {k: p for k, p in self.params.items() if not k.startswith("reg/")}

    def regressor_params(self) -> dict:
        return {k: p for k, p in self.params.items() if k.startswith("reg/")}

    def prepare(self, clip: VideoClip, tube: Tube, flows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stream inputs for one clip read through ``tube``."""
        out = self.input_dims
        if flows.shape[1:3] != clip.frames.shape[1:3]:
            raise ValueError(f"flow field is {flows.shape[1:3]} but clip frames are {clip.dims}")
        rgb = extract_tube(clip, tube, out).frames
        flow = normalize_flow(extract_flow_tube(flows, tube, out))
        return rgb, flow

    def forward(
        self,
        rgb: np.ndarray,
        flow: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        detach_encoder: bool = False,
    ) -> Tensor:
        """Scores for a batch ``N x 16 x H x W x {3, 2}`` (vector of length N)."""
        fused = fuse(
            encode_rgb(rgb, self.params, self.encoder_config),
            encode_flow(flow, self.params, self.encoder_config),
        )
        feats = Tensor(fused.values.value) if detach_encoder else fused.values
        return regress(feats, self.params, self.regressor_config, mode, rng)

    def score_batch(self, rgb: np.ndarray, flow: np.ndarray, chunk: int = 16) -> np.ndarray:
        out = []
        for i in range(0, len(rgb), chunk):
            out.append(self.forward(rgb[i : i + chunk], flow[i : i + chunk]).numpy())
        return np.concatenate(out) if out else np.zeros(0)

    def score_tubes(self, clip: VideoClip, tubes: Sequence[Tube], flows: np.ndarray | None = None) -> np.ndarray:
        """Eval-mode score of ``clip`` read through each tube, in order."""
        flows = flow_for_clip(clip, self.flow_params) if flows is None else flows
        pairs = [self.prepare(clip, t, flows) for t in tubes]
        if not pairs:
            return np.zeros(0)
        rgb = np.stack([p[0] for p in pairs])
        flow = np.stack([p[1] for p in pairs])
        return self.score_batch(rgb, flow)

    def config_dict(self) -> dict:
        fp = self.flow_params
        return {
            "encoder": self.encoder_config.to_dict(),
            "regressor": self.regressor_config.to_dict(),
            "flow": {
                "levels": fp.levels,
                "pyr_scale": fp.pyr_scale,
                "window": fp.window,
                "sigma": fp.sigma,
                "iterations": fp.iterations,
                "eps": fp.eps,
            },
            "seed": self.seed,
        }

    def copy(self) -> "Model":
        params = {k: Parameter(p.value.copy(), p.name) for k, p in self.params.items()}
        velocity = {k: v.copy() for k, v in self.velocity.items()}
        return Model(self.encoder_config, self.regressor_config, params, velocity, self.seed, self.flow_params)


def mse_loss(scores, labels) -> Tensor:
    """Mean of squared differences between scores and binary labels."""
    if not isinstance(scores, Tensor):
        scores = Tensor(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    if scores.value.size == 0:
        raise ValueError("empty batch")
    if scores.value.size != labels.size:
        raise ValueError(f"{scores.value.size} scores but {labels.size} labels")
    return ad.mse(ad.reshape(scores, (labels.size,)), labels)


def sgd_nesterov_step(params: Iterable[Parameter], velocity: dict, config: TrainConfig) -> None:
    """``v <- mu v - lr g``; ``theta <- theta + v``.

    ``g`` must have been evaluated at the look-ahead point ``theta + mu v``
    (see :func:`train`), which makes this the Nesterov update.
    """
    mu, lr = config.momentum, config.learning_rate
    for p in params:
        v = mu * velocity[p.name] - lr * p.grad
        velocity[p.name] = v
        p.assign(p.value + v)


def _select_tube(sample: TrainingSample, mode: str, rng: np.random.Generator) -> Tube:
    if mode == FULLFRAME:
        return full_frame_tube(sample.clip.dims)
    if sample.tube is not None:
        return sample.tube
    return random_tube(sample.clip.dims, rng)


def _validate_samples(samples: Sequence[TrainingSample], model: Model) -> None:
    if not samples:
        raise ValueError("no training samples")
    for i, s in enumerate(samples):
        if not isinstance(s, TrainingSample):
            raise TypeError(f"sample {i} is {type(s).__name__}, not TrainingSample")
        if s.tube is not None:
            s.tube.validate(s.clip.dims)


def train(
    model: Model,
    samples: Sequence[TrainingSample],
    mode: str = TUBE,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
    flow_cache: FlowCache | None = None,
) -> tuple[Model, list]:
    """Optimize ``model`` in place on ``samples``; return it with per-epoch mean losses.

    In ``tube`` mode each sample is read through its annotated tube (normal
    clips get one random tube, fixed for the run); in ``fullframe`` mode every
    sample uses the full-frame tube.
    """
    config = config or TrainConfig()
    if mode not in (TUBE, FULLFRAME):
        raise ValueError(f"mode must be {TUBE!r} or {FULLFRAME!r}, got {mode!r}")
    _validate_samples(samples, model)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if config.epochs == 0:
        return model, []
    flow_cache = flow_cache or FlowCache(model.flow_params)

    tube_rng = np.random.default_rng(rng.integers(2**63))
    tubes = [_select_tube(s, mode, tube_rng) for s in samples]
    labels = np.array([s.label for s in samples], dtype=np.float64)

    trainable = list(model.params.values()) if config.train_encoder else list(model.regressor_params().values())
    mu = config.momentum
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            pairs = [model.prepare(samples[i].clip, tubes[i], flow_cache(samples[i].clip)) for i in idx]
            rgb = np.stack([p[0] for p in pairs])
            flow = np.stack([p[1] for p in pairs])

            for p in trainable:
                p.zero_grad()
            anchors = {p.name: p.value for p in trainable}
            for p in trainable:
                p.assign(p.value + mu * model.velocity[p.name])
            scores = model.forward(rgb, flow, "train", rng, detach_encoder=not config.train_encoder)
            loss = mse_loss(scores, labels[idx])
            ad.backward(loss)
            for p in trainable:
                p.assign(anchors[p.name])
            sgd_nesterov_step(trainable, model.velocity, config)
            losses.append(loss.item() * len(idx))
        history.append(float(np.sum(losses) / len(samples)))
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, history[-1])
    return model, history


# --------------------------------------------------------------------------
# serialization


class ModelFormatError(ValueError):
    pass


def _write_block(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def model_to_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(model.config_dict(), sort_keys=True).encode("utf-8")
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(header)))
    buf.write(header)
    blocks = [(k, p.value) for k, p in model.params.items()]
    blocks += [(f"velocity:{k}", v) for k, v in model.velocity.items()]
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        _write_block(buf, name, arr)
    return buf.getvalue()


def save_model(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(model))
    os.replace(tmp, path)


def _take(data: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise ModelFormatError("model file truncated")
    return data[pos : pos + n], pos + n


def model_from_bytes(data: bytes) -> Model:
    raw, pos = _take(data, 0, len(MODEL_MAGIC))
    if raw != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    raw, pos = _take(data, pos, 8)
    version, hlen = struct.unpack("<II", raw)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    raw, pos = _take(data, pos, hlen)
    cfg = json.loads(raw.decode("utf-8"))
    raw, pos = _take(data, pos, 4)
    (count,) = struct.unpack("<I", raw)
    params, velocity = {}, {}
    for _ in range(count):
        raw, pos = _take(data, pos, 2)
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(data, pos, nlen)
        name = raw.decode("utf-8")
        raw, pos = _take(data, pos, 1)
        (ndim,) = struct.unpack("<B", raw)
        raw, pos = _take(data, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, pos = _take(data, pos, 8 * int(np.prod(shape, dtype=np.int64)))
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if name.startswith("velocity:"):
            velocity[name[len("velocity:"):]] = arr
        else:
            params[name] = Parameter(arr, name)
    if pos != len(data):
        raise ModelFormatError("trailing bytes after the last parameter block")
    model = Model(
        EncoderConfig.from_dict(cfg["encoder"]),
        RegressorConfig.from_dict(cfg["regressor"]),
        params,
        velocity,
        int(cfg.get("seed", 0)),
        FlowParams(**cfg["flow"]),
    )
    expected = Model.initialize(model.encoder_config, model.regressor_config, 0, model.flow_params)
    for k, p in expected.params.items():
        if k not in params or params[k].shape != p.shape:
            raise ModelFormatError(f"parameter {k!r} missing or mis-shaped")
        if velocity.get(k) is None or velocity[k].shape != p.shape:
            raise ModelFormatError(f"velocity for {k!r} missing or mis-shaped")
    return model


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
