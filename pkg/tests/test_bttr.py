import numpy as np
import pytest

from fbttr.bttr import (
    FitConfig,
    FitError,
    NormStats,
    fit,
    materialize_predictor,
    predict,
    residual_trace,
    select_k_cv,
)
from fbttr.sparse_tucker import HyperGrid
from fbttr.tensor import frobenius_norm, kron_factors, multilinear_product, unfold

SMALL_GRID = HyperGrid(snr_values=(10.0, 25.0, 40.0), tau_values=(95.0, 99.0, 100.0))


def plant_blocks(rng, n, feature_shape, n_blocks, m=1, noise=0.0):
    """Synthetic tensor with orthogonal planted multilinear components."""
    ranks = [1] * len(feature_shape)
    t_all, _ = np.linalg.qr(rng.normal(size=(n, n_blocks)))
    p_per_mode = []
    for ext in feature_shape:
        p_all, _ = np.linalg.qr(rng.normal(size=(ext, n_blocks)))
        p_per_mode.append(p_all)
    q_all, _ = np.linalg.qr(rng.normal(size=(m, min(m, n_blocks))))
    x = np.zeros((n,) + tuple(feature_shape))
    y = np.zeros((n, m))
    truth = []
    for k in range(n_blocks):
        t = t_all[:, k:k + 1]
        ps = [p[:, k:k + 1] for p in p_per_mode]
        core = np.full([1] + ranks, 2.0 * 0.7**k)
        fmap = {1: t}
        fmap.update({i + 2: p for i, p in enumerate(ps)})
        x = x + multilinear_product(core, fmap)
        q = q_all[:, k % q_all.shape[1]:k % q_all.shape[1] + 1]
        d = 3.0 * 0.8**k
        y = y + d * (t @ q.T)
        truth.append((t, ps, q, d))
    if noise > 0:
        x = x + noise * rng.normal(size=x.shape)
        y = y + noise * rng.normal(size=y.shape)
    return x, y, truth


def test_fit_single_planted_block_high_training_r():
    rng = np.random.default_rng(0)
    x, y, _ = plant_blocks(rng, 60, (6, 5), n_blocks=1)
    model = fit(x, y, FitConfig(max_blocks=1, grid=SMALL_GRID))
    pred = predict(model, x)
    r = np.corrcoef(pred[:, 0], y[:, 0])[0, 1]
    assert r >= 0.99


def test_fit_config_rejects_zero_blocks():
    with pytest.raises(ValueError):
        FitConfig(max_blocks=0)


def test_fit_epsilon_above_response_norm_still_extracts_one_block():
    rng = np.random.default_rng(1)
    x, y, _ = plant_blocks(rng, 40, (5, 4), n_blocks=1)
    cfg = FitConfig(max_blocks=3, epsilon=10.0 * frobenius_norm(y), grid=SMALL_GRID)
    model = fit(x, y, cfg)
    assert model.n_blocks == 1


def test_training_prediction_matches_block_sum_oracle():
    rng = np.random.default_rng(2)
    x, y, _ = plant_blocks(rng, 50, (6, 4), n_blocks=2, noise=0.05)
    model = fit(x, y, FitConfig(max_blocks=3, grid=SMALL_GRID))
    pred = predict(model, x)
    oracle = sum(b.d * (b.t @ b.q.T) for b in model.blocks)
    assert np.max(np.abs(pred - oracle)) < 1e-8


def test_predict_zero_tensor_gives_zero():
    rng = np.random.default_rng(3)
    x, y, _ = plant_blocks(rng, 30, (5, 3), n_blocks=1)
    model = fit(x, y, FitConfig(max_blocks=1, grid=SMALL_GRID))
    assert np.array_equal(predict(model, np.zeros((4, 5, 3))), np.zeros((4, 1)))


def test_predict_single_sample_shape():
    rng = np.random.default_rng(4)
    x, y, _ = plant_blocks(rng, 30, (5, 3), n_blocks=1, m=2)
    model = fit(x, y, FitConfig(max_blocks=1, grid=SMALL_GRID))
    out = predict(model, x[:1])
    assert out.shape == (1, 2)


def test_predict_shape_mismatch():
    rng = np.random.default_rng(5)
    x, y, _ = plant_blocks(rng, 30, (5, 3), n_blocks=1)
    model = fit(x, y, FitConfig(max_blocks=1, grid=SMALL_GRID))
    with pytest.raises(ValueError):
        predict(model, np.zeros((4, 5, 4)))


def test_deflation_orthogonality():
    rng = np.random.default_rng(6)
    x, y, _ = plant_blocks(rng, 40, (6, 4), n_blocks=2, noise=0.05)
    model = fit(x, y, FitConfig(max_blocks=2, grid=SMALL_GRID))
    e = x.copy()
    for b in model.blocks:
        fmap = {1: b.t}
        fmap.update({n + 2: f for n, f in enumerate(b.factors)})
        e = e - multilinear_product(b.core, fmap)
        leak = b.t.T @ unfold(e, 1) @ kron_factors(b.factors)
        assert np.max(np.abs(leak)) < 1e-8 * max(frobenius_norm(e), 1e-12)


def test_response_residual_never_increases():
    rng = np.random.default_rng(7)
    x, y, _ = plant_blocks(rng, 40, (6, 4), n_blocks=3, noise=0.1)
    model = fit(x, y, FitConfig(max_blocks=3, grid=SMALL_GRID))
    trace = residual_trace(model)
    f_norms = [f for _, f in trace]
    assert all(b <= a + 1e-12 for a, b in zip(f_norms, f_norms[1:]))
    assert all(e >= 0 and f >= 0 for e, f in trace)


def test_residual_trace_length_and_recovery():
    rng = np.random.default_rng(8)
    x, y, _ = plant_blocks(rng, 50, (6, 5), n_blocks=1)
    model = fit(x, y, FitConfig(max_blocks=1, grid=SMALL_GRID))
    trace = residual_trace(model)
    assert len(trace) == 2

    x2, y2, _ = plant_blocks(rng, 60, (8, 6), n_blocks=2)
    model2 = fit(x2, y2, FitConfig(max_blocks=2, grid=SMALL_GRID))
    trace2 = residual_trace(model2)
    assert trace2[-1][1] < 0.05 * trace2[0][1]


def test_residual_trace_requires_retention():
    rng = np.random.default_rng(9)
    x, y, _ = plant_blocks(rng, 30, (5, 3), n_blocks=1)
    model = fit(x, y, FitConfig(max_blocks=1, grid=SMALL_GRID), keep_trace=False)
    with pytest.raises(ValueError):
        residual_trace(model)


def test_fit_rejects_mismatched_and_nonfinite_inputs():
    rng = np.random.default_rng(10)
    x, y, _ = plant_blocks(rng, 20, (4, 3), n_blocks=1)
    with pytest.raises(ValueError):
        fit(x, y[:-1], FitConfig(max_blocks=1, grid=SMALL_GRID))
    bad = y.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        fit(x, bad, FitConfig(max_blocks=1, grid=SMALL_GRID))


def test_fit_zero_data_raises_fit_error():
    with pytest.raises(FitError):
        fit(np.zeros((10, 4, 3)), np.zeros((10, 1)), FitConfig(max_blocks=1, grid=SMALL_GRID))


def test_w_columns_reproduce_training_scores():
    rng = np.random.default_rng(11)
    x, y, _ = plant_blocks(rng, 40, (6, 4), n_blocks=2, noise=0.05)
    model = fit(x, y, FitConfig(max_blocks=2, grid=SMALL_GRID))
    t_mat = np.column_stack([b.t.ravel() for b in model.blocks])
    assert np.max(np.abs(unfold(x, 1) @ model.w - t_mat)) < 1e-8


def test_select_k_cv_planted_single_block():
    rng = np.random.default_rng(12)
    x, y, _ = plant_blocks(rng, 60, (5, 4), n_blocks=1, noise=0.02)
    cfg = FitConfig(max_blocks=3, grid=SMALL_GRID)
    assert select_k_cv(x, y, cfg, folds=3) == 1


def test_select_k_cv_fold_validation():
    rng = np.random.default_rng(13)
    x, y, _ = plant_blocks(rng, 10, (4, 3), n_blocks=1)
    cfg = FitConfig(max_blocks=2, grid=SMALL_GRID)
    with pytest.raises(ValueError):
        select_k_cv(x, y, cfg, folds=11)
    with pytest.raises(ValueError):
        select_k_cv(x, y, cfg, folds=1)


def test_select_k_cv_tie_goes_to_smaller_k():
    # a noiseless 1-block dataset: fitting stops after one block, so every
    # K gives identical validation scores and the tie resolves to K=1
    rng = np.random.default_rng(14)
    x, y, _ = plant_blocks(rng, 50, (5, 4), n_blocks=1)
    cfg = FitConfig(max_blocks=3, grid=SMALL_GRID)
    assert select_k_cv(x, y, cfg, folds=2) == 1


def test_norm_stats_round_trip():
    rng = np.random.default_rng(15)
    x = rng.normal(loc=3.0, scale=2.0, size=(30, 4, 3))
    y = rng.normal(loc=-1.0, scale=0.5, size=(30, 2))
    ns = NormStats.from_training(x, y)
    xn = ns.apply_x(x)
    yn = ns.apply_y(y)
    assert np.allclose(xn.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(xn.std(axis=0), 1.0, atol=1e-12)
    assert np.allclose(ns.invert_y(yn), y, atol=1e-12)


def test_materialize_predictor_empty_blocks():
    w, z = materialize_predictor([], (4, 3))
    assert w.shape == (12, 0)
    assert z.shape == (0, 0)
