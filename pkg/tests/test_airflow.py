import numpy as np
import pytest

from aio.airflow import (
    N_FEATURES,
    AirflowEstimator,
    LstmRegressor,
    TrainingConfig,
    _layer_forward,
    estimate_airflow,
    feature_mask,
    fit_windows,
    identify_covariance,
    init_params,
    lstm_train,
    mse_loss_and_grad,
    training_windows,
)
from aio.presets import WHISKERS, random_lissajous
from aio.sim import SensorNoiseSpec, TrajectorySpec, WindFieldSpec, simulate


def _model(rng, mask=None):
    mask = np.ones(N_FEATURES, bool) if mask is None else mask
    n = int(mask.sum())
    return LstmRegressor(params=init_params(n, rng=rng), mean=rng.normal(size=n),
                         std=rng.uniform(0.5, 2.0, n), mask=mask)


def test_zero_weights_give_zero_output():
    model = _model(np.random.default_rng(0))
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    X = np.random.default_rng(1).normal(size=(7, 5, N_FEATURES))
    assert np.array_equal(model.predict(X), np.zeros((7, 3)))


def test_single_unit_accumulates_tanh_of_inputs():
    # input and forget gates saturated open, output gate open: c_T = sum tanh(x_t)
    big = 40.0
    Wx = np.array([[0.0, 0.0, 1.0, 0.0]])
    Wh = np.zeros((1, 4))
    b = np.array([big, big, 0.0, big])
    x = np.array([0.3, -0.1, 0.2, 0.05, -0.25])
    hs, _ = _layer_forward(x.reshape(1, 5, 1), Wx, Wh, b)
    assert np.arctanh(hs[0, -1, 0]) == pytest.approx(np.tanh(x).sum(), abs=1e-12)
    assert np.allclose(np.arctanh(hs[0, :, 0]), np.cumsum(np.tanh(x)), atol=1e-12)


def test_rejects_wrong_window_shape():
    model = _model(np.random.default_rng(0))
    with pytest.raises(ValueError):
        model.predict(np.zeros((4, N_FEATURES)))
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 5, N_FEATURES - 1)))


def test_predictions_are_per_window():
    rng = np.random.default_rng(2)
    model = _model(rng)
    X = rng.normal(size=(6, 5, N_FEATURES))
    perm = rng.permutation(6)
    assert np.allclose(model.predict(X)[perm], model.predict(X[perm]), atol=1e-14)
    assert np.allclose(model.predict(X[3]), model.predict(X)[3], atol=1e-14)


def bptt_gradient_error(n_params=64, seed=3):
    """Worst relative error of BPTT against central differences."""
    rng = np.random.default_rng(seed)
    params = init_params(N_FEATURES, rng=rng)
    # push the gates away from their init so every path carries gradient
    for v in params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    X = rng.normal(size=(8, 5, N_FEATURES))
    Y = rng.normal(size=(8, 3))
    _, grads = mse_loss_and_grad(params, X, Y)
    eps = 1e-5
    names = sorted(params)
    worst = 0.0
    for _ in range(n_params):
        k = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in params[k].shape)
        orig = params[k][idx]
        params[k][idx] = orig + eps
        lp, _ = mse_loss_and_grad(params, X, Y)
        params[k][idx] = orig - eps
        lm, _ = mse_loss_and_grad(params, X, Y)
        params[k][idx] = orig
        num = (lp - lm) / (2 * eps)
        ana = grads[k][idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
    return worst


def test_bptt_gradient_matches_finite_differences():
    assert bptt_gradient_error() < 1e-4


def test_normalisation_shift_invariance():
    rng = np.random.default_rng(4)
    model = _model(rng)
    X = rng.normal(size=(5, 5, N_FEATURES))
    ref = model.predict(X)
    c = 4.0
    X2 = X.copy()
    X2[..., 6] += c
    model.mean[6] += c
    assert np.allclose(model.predict(X2), ref, rtol=0, atol=1e-12)


def test_learns_linear_target():
    rng = np.random.default_rng(5)
    A = rng.normal(scale=0.08, size=(N_FEATURES, 3))
    X = rng.normal(size=(3000, 5, N_FEATURES))
    Y = X[:, -1] @ A
    cfg = TrainingConfig(epochs=60, learning_rate=1e-2, lr_decay=0.95, seed=0)
    res = fit_windows(X[:2400], Y[:2400], X[2400:], Y[2400:], cfg)
    assert res.val_loss[-1] < 1e-4
    assert not res.diverged


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        lstm_train([], TrainingConfig())


def test_training_restores_last_finite_weights():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(200, 5, N_FEATURES))
    Y = 1e200 * rng.normal(size=(200, 3))
    with np.errstate(over="ignore"):
        res = fit_windows(X[:150], Y[:150], X[150:], Y[150:], TrainingConfig(epochs=3))
    assert res.diverged
    assert all(np.all(np.isfinite(v)) for v in res.model.params.values())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainingConfig(features=["airflow", "sonar"])


def test_feature_mask_groups():
    m = feature_mask("airflow", "gyro")
    assert m.sum() == 11 and m[:11].all() and not m[11:].any()


def test_model_roundtrip(tmp_path):
    model = _model(np.random.default_rng(7), mask=feature_mask("airflow", "acc"))
    model.save(tmp_path / "m.json")
    back = LstmRegressor.load(tmp_path / "m.json")
    X = np.random.default_rng(8).normal(size=(3, 5, N_FEATURES))
    assert np.array_equal(back.predict(X), model.predict(X))


# --- streaming ----------------------------------------------------------------


def test_estimator_constant_input_and_warmup():
    model = _model(np.random.default_rng(9))
    est = AirflowEstimator(model, np.eye(3) * 0.01)
    row = np.linspace(-1, 1, N_FEATURES)
    out = [est.push(k / 50.0, row) for k in range(40)]
    assert all(m is None for m in out[:4])
    vals = [m.value for m in out if m is not None]
    assert len(vals) == 18
    assert all(np.array_equal(v, vals[0]) for v in vals)


def test_estimator_rejects_bad_covariance():
    model = _model(np.random.default_rng(9))
    with pytest.raises(ValueError):
        AirflowEstimator(model, np.diag([1.0, 1.0, -1.0]))


def test_output_rate_is_25hz():
    log = simulate(TrajectorySpec(kind="hover", duration=10.0), WindFieldSpec(), SensorNoiseSpec())
    out = estimate_airflow(_model(np.random.default_rng(0)), np.eye(3), log)
    # rate counted from the first emission; warm-up takes four 50 Hz samples
    span = log.t[-1] + log.dt - out[0].t
    assert out[0].t == pytest.approx(0.08)
    assert abs(len(out) - 25.0 * span) <= 1
    assert np.allclose(np.diff([m.t for m in out]), 0.04)


# --- training on simulator data ------------------------------------------------


@pytest.fixture(scope="module")
def small_training():
    rng = np.random.default_rng(11)
    logs = [simulate(random_lissajous(rng, 20.0), WindFieldSpec(), SensorNoiseSpec(), WHISKERS, seed=i)
            for i in range(3)]
    cfg = TrainingConfig(epochs=4, seed=1)
    return logs, cfg, lstm_train(logs, cfg)


def test_training_is_seed_deterministic(small_training):
    logs, cfg, res = small_training
    again = lstm_train(logs, cfg)
    assert again.train_loss == res.train_loss
    assert again.val_loss == res.val_loss
    assert np.mean(np.diff(res.train_loss)) < 0


def test_covariance_identification_is_pd(small_training):
    logs, cfg, res = small_training
    _, _, Xva, Yva = training_windows(logs, cfg.val_fraction)
    cov = identify_covariance(res.model, Xva, Yva)
    assert np.allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > 0


def test_streaming_error_on_noiseless_zero_wind_log(small_training):
    _, _, res = small_training
    traj = random_lissajous(np.random.default_rng(99), 20.0)
    log = simulate(traj, WindFieldSpec(), SensorNoiseSpec(), WHISKERS, seed=5)
    out = estimate_airflow(res.model, np.eye(3), log)
    idx = np.searchsorted(log.t, [m.t for m in out])
    truth = -np.einsum("nji,nj->ni", log.gt_R[idx], log.gt_v[idx])
    err = np.sqrt(np.mean(np.sum((np.array([m.value for m in out]) - truth) ** 2, axis=1) / 3))
    assert err < 1.5 * np.sqrt(res.val_loss[-1])
