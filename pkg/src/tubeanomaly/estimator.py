"""scikit-learn compatible wrapper around the tube anomaly model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import EncoderConfig
from .evaluation import TubeSource, evaluate_scores
from .flow import FlowParams
from .regressor import RegressorConfig
from .training import FlowCache, Model, TrainConfig, TrainingSample, train
from .tubes import Tube, VideoClip

__all__ = ["TubeAnomalyDetector", "check_clip", "check_samples"]


def check_clip(clip, dims: tuple[int, int] | None = None) -> VideoClip:
    """Coerce ``clip`` to a :class:`VideoClip` and check its frame size."""
    if not isinstance(clip, VideoClip):
        clip = VideoClip(np.asarray(clip, dtype=np.float64))
    frames = clip.frames
    if not np.isfinite(frames).all():
        raise ValueError("clip contains NaN or infinite values")
    if frames.min() < 0.0 or frames.max() > 1.0:
        raise ValueError("clip values must lie in [0, 1]")
    if dims is not None and tuple(clip.dims) != tuple(dims):
        raise ValueError(f"clip frames are {clip.dims} but the model expects {tuple(dims)}")
    return clip


def check_samples(X, y=None, dims: tuple[int, int] | None = None) -> list:
    """Turn ``X`` (and optional ``y``) into a list of :class:`TrainingSample`.

    Elements of ``X`` may be TrainingSamples, ``(clip, tube)`` pairs or bare
    clips. ``y`` overrides sample labels when given and is required for
    elements that carry none.
    """
    X = list(X)
    if not X:
        raise ValueError("empty input")
    if y is not None:
        y = np.asarray(y).ravel()
        if y.size != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {y.size} labels")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, TrainingSample):
            clip, tube, label = item.clip, item.tube, item.label
        elif isinstance(item, tuple) and len(item) == 2:
            clip, tube = item
            label = None
        else:
            clip, tube, label = item, None, None
        if y is not None:
            label = int(y[i])
        if label is None:
            label = 0
        clip = check_clip(clip, dims)
        if tube is not None and not isinstance(tube, Tube):
            tube = Tube.from_array(tube)
        out.append(TrainingSample(clip, tube, int(label)))
    return out


class TubeAnomalyDetector(ClassifierMixin, BaseEstimator):
    """Two-stream tube encoder plus regression head, trained with squared error.

    Parameters
    ----------
    mode : {"tube", "fullframe"}
        Read training clips through their annotated tubes, or through the
        full frame.
    learning_rate, momentum, batch_size, epochs
        Nesterov SGD settings.
    train_encoder : bool
        Update the encoder too; when False only the regression head learns.
    threshold : float
        Decision threshold used by :meth:`predict`.
    encoder_config, regressor_config, flow_params
        Architecture and flow settings; defaults when None.
    random_state : int
        Seeds initialization, batching, dropout and random normal tubes.
    """

    def __init__(
        self,
        mode: str = "tube",
        learning_rate: float = 0.001,
        momentum: float = 0.9,
        batch_size: int = 5,
        epochs: int = 10,
        train_encoder: bool = True,
        threshold: float = 0.5,
        encoder_config: EncoderConfig | None = None,
        regressor_config: RegressorConfig | None = None,
        flow_params: FlowParams | None = None,
        random_state: int = 0,
    ):
        self.mode = mode
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.train_encoder = train_encoder
        self.threshold = threshold
        self.encoder_config = encoder_config
        self.regressor_config = regressor_config
        self.flow_params = flow_params
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            self.learning_rate, self.momentum, self.batch_size, self.epochs, self.train_encoder, self.random_state
        )

    def fit(self, X, y=None):
        if self.mode not in ("tube", "fullframe"):
            raise ValueError(f"mode must be 'tube' or 'fullframe', got {self.mode!r}")
        model = Model.initialize(self.encoder_config, self.regressor_config, self.random_state, self.flow_params)
        samples = check_samples(X, y, model.input_dims)
        self.flow_cache_ = FlowCache(model.flow_params)
        self.model_, self.loss_history_ = train(
            model, samples, self.mode, self._train_config(), flow_cache=self.flow_cache_
        )
        self.classes_ = np.array([0, 1])
        return self

    def _default_source(self) -> TubeSource:
        return TubeSource("oracle" if self.mode == "tube" else "fullframe")

    def decision_function(self, X, tube_source: TubeSource | str | None = None) -> np.ndarray:
        """Anomaly score in ``[0, 1]`` for every sample."""
        check_is_fitted(self, "model_")
        samples = check_samples(X, None, self.model_.input_dims)
        source = tube_source or self._default_source()
        source = TubeSource.parse(source) if isinstance(source, str) else source
        rng = np.random.default_rng(self.random_state)
        out = np.empty(len(samples))
        for i, s in enumerate(samples):
            tube = source.tube_for(s, rng)
            out[i] = self.model_.score_tubes(s.clip, [tube], self.flow_cache_(s.clip))[0]
        return out

    score_samples = decision_function

    def predict_proba(self, X, tube_source=None) -> np.ndarray:
        s = self.decision_function(X, tube_source)
        return np.column_stack([1.0 - s, s])

    def predict(self, X, tube_source=None) -> np.ndarray:
        return (self.decision_function(X, tube_source) >= self.threshold).astype(int)

    def score(self, X, y=None, sample_weight=None) -> float:
        """ROC AUC of the anomaly scores (labels from ``y`` or the samples)."""
        samples = check_samples(X, y)
        s = self.decision_function(samples)
        return evaluate_scores(s, [x.label for x in samples], "estimator").auc
