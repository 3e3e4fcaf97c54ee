import numpy as np
import pytest

from tubeanomaly.encoder import ConvBlock, EncoderConfig
from tubeanomaly.regressor import RegressorConfig
from tubeanomaly.training import Model
from tubeanomaly.tubes import CLIP_LENGTH, BoundingBox, VideoClip, static_tube

TINY_ENCODER = EncoderConfig((16, 16, 16), (ConvBlock(4, stride=(1, 2, 2)), ConvBlock(4, pool=None)))
TINY_REGRESSOR = RegressorConfig(conv_channels=4, fc_dims=(8, 1), dropout_rate=0.5)


def tiny_model(seed=0):
    return Model.initialize(TINY_ENCODER, TINY_REGRESSOR, seed=seed)


def blob_clip(rng, anomalous, size=16, source="c"):
    """Noise background; anomalous clips carry a jittering bright blob in the top-left quarter."""
    frames = rng.random((CLIP_LENGTH, size, size, 3)) * 0.3
    if anomalous:
        for t in range(CLIP_LENGTH):
            x, y = rng.integers(1, 5, size=2)
            frames[t, y : y + 3, x : x + 3] = 1.0
    return VideoClip(frames, source)


BLOB_TUBE = static_tube(BoundingBox(0, 0, 8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance and shown after the run
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
