import numpy as np
import pytest

from fbttr.bttr import FitConfig, NormStats, fit, predict
from fbttr.model_io import (
    MAGIC,
    ModelFormatError,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
)
from fbttr.sparse_tucker import HyperGrid

GRID = HyperGrid(snr_values=(15.0, 35.0), tau_values=(97.0, 100.0))


def fitted_model(with_norm=False, keep_trace=True, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 5, 4))
    y = (x[:, 1, 1] * 1.5 + 0.1 * rng.normal(size=25)).reshape(-1, 1)
    norm = NormStats.from_training(x, y) if with_norm else None
    return fit(x, y, FitConfig(max_blocks=2, grid=GRID), normalization=norm,
               keep_trace=keep_trace), x


@pytest.mark.parametrize("with_norm,keep_trace", [(False, False), (True, True), (False, True)])
def test_round_trip_bit_exact(with_norm, keep_trace):
    model, _ = fitted_model(with_norm=with_norm, keep_trace=keep_trace)
    data = model_to_bytes(model)
    back = model_from_bytes(data)
    assert model_to_bytes(back) == data


def test_round_trip_preserves_predictions_exactly():
    model, x = fitted_model()
    back = model_from_bytes(model_to_bytes(model))
    assert np.array_equal(predict(model, x), predict(back, x))
    assert back.input_shape == model.input_shape
    for a, b in zip(model.blocks, back.blocks):
        assert np.array_equal(a.core, b.core)
        assert np.array_equal(a.score_core, b.score_core)
        assert np.array_equal(a.q, b.q)
        assert a.d == b.d
        assert np.array_equal(a.t, b.t)


def test_magic_checked():
    model, _ = fitted_model()
    data = bytearray(model_to_bytes(model))
    data[:8] = b"NOTMODEL"
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(data))
    assert model_to_bytes(model)[:8] == MAGIC


def test_truncated_data_rejected():
    model, _ = fitted_model()
    data = model_to_bytes(model)
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:-4])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data + b"\x00")


def test_file_round_trip(tmp_path):
    model, x = fitted_model(with_norm=True)
    path = tmp_path / "model.fbttr"
    save_model(model, path)
    back = load_model(path)
    assert np.array_equal(predict(model, x), predict(back, x))
    assert np.array_equal(back.normalization.x_mean, model.normalization.x_mean)
