import numpy as np
import pytest

from tubeanomaly.autodiff import Parameter
from tubeanomaly.training import (
    MODEL_MAGIC,
    FlowCache,
    Model,
    ModelFormatError,
    TrainConfig,
    TrainingSample,
    load_model,
    model_from_bytes,
    model_to_bytes,
    mse_loss,
    random_tube,
    save_model,
    sgd_nesterov_step,
    train,
)
from tubeanomaly.tubes import BoundingBox, VideoClip, static_tube

from conftest import BLOB_TUBE, blob_clip, tiny_model


def _samples(seed=0, n_pos=4, n_neg=4):
    rng = np.random.default_rng(seed)
    out = [TrainingSample(blob_clip(rng, True, source=f"a{i}"), BLOB_TUBE, 1) for i in range(n_pos)]
    out += [TrainingSample(blob_clip(rng, False, source=f"n{i}"), None, 0) for i in range(n_neg)]
    return out


# ---------------------------------------------------------------- loss


def test_mse_examples():
    assert mse_loss([0.3, 1.0], [0.3, 1.0]).item() == 0.0
    assert mse_loss([1.0, 0.0], [0, 1]).item() == 1.0
    assert mse_loss([0.5], [1]).item() == 0.25
    with pytest.raises(ValueError):
        mse_loss([], [])
    with pytest.raises(ValueError):
        mse_loss([0.1, 0.2], [1])


def test_mse_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.random(5)
        y = rng.integers(0, 2, 5)
        loss = mse_loss(s, y).item()
        assert loss >= 0 and (loss == 0) == np.array_equal(s, y)


# ---------------------------------------------------------------- optimizer


def _one_param(theta, grad, velocity=0.0):
    p = Parameter(np.array([theta]), "w")
    p.grad = np.array([grad])
    return p, {"w": np.array([velocity])}


def test_plain_sgd_when_no_momentum():
    p, v = _one_param(1.0, 2.0)
    sgd_nesterov_step([p], v, TrainConfig(learning_rate=0.1, momentum=0.0))
    assert p.value[0] == pytest.approx(0.8)


def test_nesterov_two_steps_by_hand():
    cfg = TrainConfig(learning_rate=0.001, momentum=0.9)
    p, v = _one_param(0.0, 1.0)
    sgd_nesterov_step([p], v, cfg)
    assert v["w"][0] == pytest.approx(-0.001) and p.value[0] == pytest.approx(-0.001)
    p.grad = np.array([1.0])
    sgd_nesterov_step([p], v, cfg)
    assert v["w"][0] == pytest.approx(-0.0019) and p.value[0] == pytest.approx(-0.0029)


def test_zero_gradient_is_pure_momentum_drift():
    cfg = TrainConfig(learning_rate=0.5, momentum=0.9)
    p, v = _one_param(2.0, 0.0, velocity=0.3)
    sgd_nesterov_step([p], v, cfg)
    assert p.value[0] == pytest.approx(2.0 + 0.9 * 0.3)
    p, v = _one_param(2.0, 0.0, velocity=0.0)
    sgd_nesterov_step([p], v, cfg)
    assert p.value[0] == 2.0


def test_train_config_validation():
    for kw in (dict(learning_rate=0), dict(batch_size=0), dict(epochs=-1), dict(momentum=1.0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.epochs) == (0.001, 0.9, 5, 10)


# ---------------------------------------------------------------- samples


def test_sample_invariants():
    clip = VideoClip(np.zeros((16, 16, 16, 3)))
    with pytest.raises(ValueError):
        TrainingSample(clip, None, 2)
    with pytest.raises(ValueError):
        TrainingSample(clip, static_tube(BoundingBox(0, 0, 17, 8)), 1)


def test_random_tube_valid():
    rng = np.random.default_rng(0)
    for _ in range(100):
        random_tube((56, 56), rng).validate((56, 56))


# ---------------------------------------------------------------- train


def test_epochs_zero_leaves_model_unchanged():
    model = tiny_model()
    before = model_to_bytes(model)
    model, hist = train(model, _samples(), "tube", TrainConfig(epochs=0))
    assert hist == [] and model_to_bytes(model) == before


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train(tiny_model(), [], "tube")
    with pytest.raises(ValueError):
        train(tiny_model(), _samples(), "patch")
    with pytest.raises(TypeError):
        train(tiny_model(), [("clip", None, 0)], "tube")


def test_train_deterministic():
    cfg = TrainConfig(learning_rate=0.05, epochs=2, seed=3)
    samples = _samples()
    a, ha = train(tiny_model(1), samples, "tube", cfg)
    b, hb = train(tiny_model(1), samples, "tube", cfg)
    assert ha == hb and model_to_bytes(a) == model_to_bytes(b)


def test_train_reduces_loss_on_separable_set():
    cfg = TrainConfig(learning_rate=0.05, epochs=10, seed=0)
    _, hist = train(tiny_model(2), _samples(), "tube", cfg, flow_cache=FlowCache())
    assert len(hist) == 10 and hist[-1] < hist[0]


def test_frozen_encoder_only_moves_head():
    model = tiny_model(4)
    enc_before = {k: p.value.copy() for k, p in model.encoder_params().items()}
    head_before = {k: p.value.copy() for k, p in model.regressor_params().items()}
    train(model, _samples(), "fullframe", TrainConfig(learning_rate=0.05, epochs=1, train_encoder=False))
    assert all(np.array_equal(p.value, enc_before[k]) for k, p in model.encoder_params().items())
    assert any(not np.array_equal(p.value, head_before[k]) for k, p in model.regressor_params().items())


def test_velocity_shapes_match_params():
    model = tiny_model()
    train(model, _samples(), "tube", TrainConfig(learning_rate=0.01, epochs=1))
    assert all(model.velocity[k].shape == p.shape for k, p in model.params.items())


def test_prepare_rejects_mismatched_clip():
    model = tiny_model()
    clip = VideoClip(np.zeros((16, 20, 20, 3)))
    with pytest.raises(ValueError):
        model.prepare(clip, static_tube(BoundingBox(0, 0, 20, 20)), np.zeros((16, 24, 24, 2)))


# ---------------------------------------------------------------- serialization


def test_model_round_trip_bit_exact(tmp_path):
    model = tiny_model(5)
    train(model, _samples(), "tube", TrainConfig(learning_rate=0.01, epochs=1))
    path = tmp_path / "m.bin"
    save_model(model, path)
    data = path.read_bytes()
    assert data.startswith(MODEL_MAGIC)
    loaded = load_model(path)
    assert model_to_bytes(loaded) == data
    for k, p in model.params.items():
        assert np.array_equal(p.value, loaded.params[k].value)
        assert np.array_equal(model.velocity[k], loaded.velocity[k])
    assert loaded.encoder_config == model.encoder_config
    assert loaded.regressor_config == model.regressor_config


def test_model_format_errors():
    data = model_to_bytes(tiny_model())
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"NOTAMDL" + data[7:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:-3])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data + b"\0")
    bad_version = data[:7] + (99).to_bytes(4, "little") + data[11:]
    with pytest.raises(ModelFormatError):
        model_from_bytes(bad_version)


def test_scores_survive_round_trip():
    model = tiny_model(6)
    rng = np.random.default_rng(0)
    clip = blob_clip(rng, True)
    a = model.score_tubes(clip, [BLOB_TUBE])
    b = model_from_bytes(model_to_bytes(model)).score_tubes(clip, [BLOB_TUBE])
    assert np.array_equal(a, b)
