import numpy as np
import pytest

from capsnet_lstm.errors import ConfigError, DimensionError, WeightsFormatError
from capsnet_lstm.model import (
    ModelConfig,
    ModelGraph,
    build_model,
    load_weights,
    model_summary,
    preset,
    read_weights,
    save_weights,
)
from capsnet_lstm.tensor import seeded_rng
from capsnet_lstm.training import one_hot

from conftest import full_model_grad_error

TABLE_SHAPES = [(128, 128, 128), (120, 120, 256), (56, 56, 256), (100352, 8), (100352, 8), (2, 16), (1024,), (1024,), (512,), (256,), (64,), (2,)]
TABLE_COUNTS = [604160, 2654464, 5308672, 0, 0, 25690112, 4263936, 1049600, 524800, 131328, 16448, 130]
SCALED_TOTAL = 57_978


@pytest.fixture(scope="module")
def full_skeleton():
    return build_model(init=False)


@pytest.fixture
def small():
    return build_model(preset("scaled-down"), dtype=np.float64)


def test_full_size_shapes_and_counts(full_skeleton):
    rows = full_skeleton.summary_rows()
    assert [r.output_shape for r in rows] == TABLE_SHAPES
    assert [r.params for r in rows] == TABLE_COUNTS
    assert full_skeleton.param_count() == 40_243_650


def test_full_size_layer_names(full_skeleton):
    assert [layer.name for layer in full_skeleton.layers] == [
        "conv_lst_m2d", "conv1", "primarycap_conv2d", "primarycap_reshape", "primarycap_squash",
        "secondarycap", "lstm_1", "dense_1", "dense_2", "dense_3", "dense_4", "dense_5"]


def test_summary_text(full_skeleton):
    text = model_summary(full_skeleton)
    assert "Total params 40,243,650" in text
    assert "Non-trainable params 0" in text
    line = next(ln for ln in text.splitlines() if ln.startswith("secondarycap"))
    assert "(None, 2, 16)" in line and line.rstrip().endswith("25690112")
    assert next(ln for ln in text.splitlines() if ln.startswith("dense_4")).rstrip().endswith("16448")
    assert "dense_5 (Dense) (Output)" in text


def test_zero_layer_summary():
    text = model_summary(ModelGraph([], (3,)))
    assert "Total params 0" in text


def test_scaled_down_total_frozen(small):
    assert small.param_count() == SCALED_TOTAL
    assert small.forward(np.zeros((1,) + small.input_shape)).shape == (1, 2)


def test_config_errors():
    with pytest.raises(ConfigError):
        build_model(preset("scaled-down", caps_dim=5))
    with pytest.raises(ConfigError):
        preset("huge")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        build_model(preset("scaled-down", feature_import=[8, 8, 2048]))
    with pytest.raises(ConfigError):
        build_model(preset("scaled-down", height=8, width=8))


def test_forward_rows_are_probabilities(small):
    p = small.forward(seeded_rng(0).uniform(size=(3,) + small.input_shape))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_forward_dimension_error(small):
    with pytest.raises(DimensionError):
        small.forward(np.zeros((1, 4, 32, 32, 3)))


def test_batch_invariance():
    model = build_model(preset("scaled-down"))
    x = seeded_rng(1).uniform(size=(4,) + model.input_shape).astype(np.float32)
    full = model.forward(x)
    for n in range(4):
        assert np.max(np.abs(model.forward(x[n:n + 1])[0] - full[n])) <= 1e-6


def test_forward_deterministic(small):
    x = seeded_rng(2).uniform(size=(2,) + small.input_shape)
    assert small.forward(x).tobytes() == small.forward(x).tobytes()
    assert build_model(preset("scaled-down")).state_dict()["secondarycap/W"].tobytes() == \
        build_model(preset("scaled-down")).state_dict()["secondarycap/W"].tobytes()


def test_perfect_prediction_loss_zero(small):
    small.zero_grad()
    head = small.head
    head.params["kernel"][:] = 0.0
    head.params["bias"][:] = [200.0, -200.0]
    x = seeded_rng(3).uniform(size=(2,) + small.input_shape)
    loss = small.backward(x, one_hot([0, 0], 2, np.float64))
    assert loss == pytest.approx(0.0, abs=1e-9)
    assert np.abs(head.grads["bias"]).max() < 1e-12


def test_label_shape_mismatch(small):
    with pytest.raises(DimensionError):
        small.backward(np.zeros((2,) + small.input_shape), np.zeros((3, 2)))


def test_full_model_grad_check():
    worst = full_model_grad_error()
    assert len(worst) == 20
    assert max(worst.values()) < 1e-4, worst


def test_duplicated_batch_gradient_unchanged(small):
    x = seeded_rng(4).uniform(size=(2,) + small.input_shape)
    y = one_hot([0, 1], 2, np.float64)
    small.zero_grad()
    small.backward(x, y)
    once = {k: v.copy() for k, v in small.named_gradients()}
    small.zero_grad()
    small.backward(np.concatenate([x, x]), np.concatenate([y, y]))
    for name, g in small.named_gradients():
        assert np.max(np.abs(g - once[name])) <= 1e-6, name


# -- weights file ----------------------------------------------------------------


def test_weights_round_trip_bitwise(tmp_path):
    model = build_model(preset("scaled-down"))
    path = tmp_path / "w.capw"
    save_weights(model, path)
    loaded = load_weights(path, preset("scaled-down"))
    for (n1, a), (n2, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    assert path.read_bytes()[:4] == b"CAPW"


def test_weights_header_layout(tmp_path):
    path = tmp_path / "w.capw"
    save_weights(build_model(preset("scaled-down")), path)
    raw = path.read_bytes()
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 20
    name_len = int.from_bytes(raw[12:16], "little")
    assert raw[16:16 + name_len] == b"conv_lst_m2d/kernel"


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "w.capw"
    save_weights(build_model(preset("scaled-down")), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError, match="magic"):
        read_weights(path)


@pytest.mark.parametrize("cut", [2, 10, 30, 200, -1])
def test_weights_truncated(tmp_path, cut):
    path = tmp_path / "w.capw"
    save_weights(build_model(preset("scaled-down")), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(WeightsFormatError, match="truncated"):
        read_weights(path)


def test_weights_trailing_bytes(tmp_path):
    path = tmp_path / "w.capw"
    save_weights(build_model(preset("scaled-down")), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(WeightsFormatError, match="trailing"):
        read_weights(path)


def test_weights_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "w.capw"
    save_weights(build_model(preset("scaled-down")), path)
    with pytest.raises(WeightsFormatError, match="conv_lst_m2d/kernel"):
        load_weights(path)


@pytest.mark.slow
def test_full_size_forward_backward_populates_all_gradients(full_skeleton):
    model = build_model()
    x = seeded_rng(5).uniform(size=(1,) + model.input_shape).astype(np.float32)
    p = model.forward(x)
    assert p.shape == (1, 2) and abs(float(p.sum()) - 1) < 1e-6
    model.zero_grad()
    loss = model.backward(x, one_hot([1], 2))
    assert np.isfinite(loss)
    total = 0
    for (name, g), (_, w) in zip(model.named_gradients(), model.named_parameters()):
        assert g.shape == w.shape and np.all(np.isfinite(g)), name
        assert np.any(g), name
        total += g.size
    assert total == 40_243_650
