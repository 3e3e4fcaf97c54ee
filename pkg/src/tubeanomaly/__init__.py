"""Tube-based video anomaly detection.

Clips are read through spatio-temporal tubes, encoded by a two-stream
(RGB + optical flow) 3D convolutional network and scored by a small
regression head. Everything differentiable runs on a NumPy reverse-mode
autodiff core.
"""

from .autodiff import Parameter, Tensor, backward, grad_check
from .dataset import DatasetManifest, SynthConfig, clip_iterator, generate_synthetic, load_manifest
from .encoder import EncoderConfig
from .estimator import TubeAnomalyDetector
from .evaluation import ROBUSTNESS_SETTINGS, TubeSource, evaluate, pair_auc, roc_auc, robustness_suite
from .flow import FlowParams, estimate_flow, flow_for_clip
from .proposals import ProposalConfig, build_weak_dataset, propose, retrain_weak
from .regressor import RegressorConfig, classify
from .training import Model, TrainConfig, TrainingSample, load_model, save_model, train
from .tubes import BoundingBox, Tube, VideoClip, extract_tube, full_frame_tube

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "DatasetManifest",
    "EncoderConfig",
    "FlowParams",
    "Model",
    "Parameter",
    "ProposalConfig",
    "ROBUSTNESS_SETTINGS",
    "RegressorConfig",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "TrainingSample",
    "Tube",
    "TubeAnomalyDetector",
    "TubeSource",
    "VideoClip",
    "backward",
    "build_weak_dataset",
    "classify",
    "clip_iterator",
    "estimate_flow",
    "evaluate",
    "extract_tube",
    "flow_for_clip",
    "full_frame_tube",
    "generate_synthetic",
    "grad_check",
    "load_manifest",
    "load_model",
    "pair_auc",
    "propose",
    "retrain_weak",
    "robustness_suite",
    "roc_auc",
    "save_model",
    "train",
]
