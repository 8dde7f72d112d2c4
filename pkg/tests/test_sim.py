import dataclasses

import numpy as np
import pytest

from aio.geom import exp_so3, hat, log_so3
from aio.sim import (
    GRAVITY,
    MIXER,
    Jet,
    SensorLog,
    SensorNoiseSpec,
    TrajectorySpec,
    WhiskerModel,
    WindFieldSpec,
    drag_attitude,
    generate_trajectory,
    ou_process,
    simulate,
    synthesize_sensors,
    wind_at,
    wind_jacobian,
)

JET = WindFieldSpec(jets=[Jet([0.0, 0.0, 1.5], [0.0, 1.0, 0.0], 2.0, 0.7, 1.5)])
LISSAJOUS = TrajectorySpec(
    kind="lissajous", duration=20.0, amplitude=[2.0, 1.5, 0.3], frequency=[0.1, 0.13, 0.2],
    phase=[0.1, 0.5, 1.0], yaw="sinusoid", yaw_amplitude=1.0, yaw_frequency=0.05,
)


# --- trajectories -----------------------------------------------------------


def test_hover_is_static():
    tr = generate_trajectory(TrajectorySpec(kind="hover", duration=2.0, yaw0=0.4))
    assert np.all(tr.p == tr.p[0])
    assert np.all(tr.v == 0) and np.all(tr.a == 0)
    assert np.allclose(tr.R, tr.R[0], atol=1e-12)
    assert np.allclose(tr.omega, 0.0, atol=1e-9)


def test_uniform_circle():
    tr = generate_trajectory(TrajectorySpec(kind="circle", radius=1.0, period=2 * np.pi, duration=10.0))
    assert np.allclose(np.linalg.norm(tr.v, axis=1), 1.0, atol=1e-12)
    assert np.allclose(np.linalg.norm(tr.a, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("spec", [
    LISSAJOUS,
    TrajectorySpec(kind="circle", radius=1.5, period=5.0, duration=10.0, yaw="tracking"),
    TrajectorySpec(kind="waypoints", duration=8.0, waypoints=[[0, 0, 1], [2, 1, 1.5], [0, 2, 1]],
                   segment_times=[4.0, 4.0], yaw="sinusoid", yaw_amplitude=0.5, yaw_frequency=0.2),
], ids=["lissajous", "circle", "waypoints"])
def test_kinematic_consistency(spec):
    tr = generate_trajectory(spec)
    dt = 1.0 / spec.rate
    dp = (tr.p[2:] - tr.p[:-2]) / (2 * dt)
    dv = (tr.v[2:] - tr.v[:-2]) / (2 * dt)
    assert np.max(np.linalg.norm(dp - tr.v[1:-1], axis=1)) < 1e-3
    assert np.max(np.linalg.norm(dv - tr.a[1:-1], axis=1)) < 1e-2
    # R_{k+1} ~ R_k exp(mean(omega_k, omega_k+1) dt), third-order accurate
    mid = 0.5 * (tr.omega[:-1] + tr.omega[1:])
    pred = np.einsum("nij,njk->nik", tr.R[:-1], np.stack([exp_so3(w * dt) for w in mid]))
    err = np.array([np.linalg.norm(log_so3(A.T @ B)) for A, B in zip(pred, tr.R[1:])])
    # min-jerk knots have a jerk step, so omega jumps there
    assert np.percentile(err, 99) < 1e-6
    assert err.max() < 2e-3
    # thrust (body z) is parallel to a - g
    f = tr.a - GRAVITY
    assert np.allclose(np.cross(tr.R[:, :, 2], f), 0.0, atol=1e-9)


def test_infeasible_waypoints_rejected():
    spec = TrajectorySpec(kind="waypoints", duration=2.0, waypoints=[[0, 0, 1], [5, 0, 1]], segment_times=[2.0])
    with pytest.raises(ValueError, match="peak speed"):
        generate_trajectory(spec)
    with pytest.raises(ValueError, match="segment times"):
        generate_trajectory(dataclasses.replace(spec, segment_times=[1.0, 1.0]))


def test_spec_validation():
    with pytest.raises(ValueError):
        TrajectorySpec(duration=0.0)
    with pytest.raises(ValueError):
        TrajectorySpec(peak_speed=4.0)
    with pytest.raises(ValueError):
        TrajectorySpec(kind="helix")


def test_lissajous_speed_limit():
    spec = dataclasses.replace(LISSAJOUS, amplitude=[5.0, 5.0, 0.0], frequency=[0.3, 0.3, 0.1])
    with pytest.raises(ValueError, match="peak_speed"):
        generate_trajectory(spec)


# --- wind -------------------------------------------------------------------


def test_wind_without_jets_is_zero():
    P = np.random.default_rng(0).normal(size=(10, 3))
    assert np.all(wind_at(WindFieldSpec(), P) == 0.0)


def test_jet_origin_and_far_field():
    jet = JET.jets[0]
    assert np.allclose(wind_at(JET, jet.origin), 2.0 * np.asarray(jet.direction))
    far = np.asarray(jet.origin) + [11 * 0.7, 0.0, 0.0]
    assert np.linalg.norm(wind_at(JET, far)) < 1e-3 * 2.0
    far = np.asarray(jet.origin) + [0.0, 11 * 1.5, 0.0]
    assert np.linalg.norm(wind_at(JET, far)) < 1e-3 * 2.0


def test_wind_jacobian_matches_central_differences():
    rng = np.random.default_rng(4)
    spec = WindFieldSpec(jets=JET.jets + [Jet([1.0, -1.0, 1.0], [1.0, 1.0, 0.2], 1.5, 0.5, 2.0)])
    h = 1e-6
    for p in rng.uniform([-2, -2, 0.5], [2, 2, 2.5], size=(25, 3)):
        num = np.column_stack([(wind_at(spec, p + h * e) - wind_at(spec, p - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.allclose(wind_jacobian(spec, p), num, atol=1e-5)


def test_ou_autocorrelation_and_std():
    rng = np.random.default_rng(7)
    rate, tau, sigma = 200.0, 0.5, 0.3
    x = ou_process(int(600 * rate), 1 / rate, sigma, tau, rng)
    assert np.std(x) == pytest.approx(sigma, rel=0.15)
    lag = int(tau * rate)
    x0 = x - x.mean(axis=0)
    rho = np.mean([np.corrcoef(x0[:-lag, i], x0[lag:, i])[0, 1] for i in range(3)])
    assert rho == pytest.approx(np.exp(-1.0), rel=0.2)


# --- sensors ----------------------------------------------------------------


def test_noiseless_hover_sensors():
    tr = generate_trajectory(TrajectorySpec(kind="hover", duration=2.0, yaw0=0.3))
    wm = WhiskerModel()
    log = synthesize_sensors(tr, WindFieldSpec(), SensorNoiseSpec(), wm, seed=0)
    expect = -np.einsum("nji,j->ni", tr.R, GRAVITY)
    assert np.array_equal(log.acc, expect)
    assert np.allclose(log.gyro, 0.0, atol=1e-9)
    # only the downwash deflects the whiskers
    assert np.allclose(log.whisker, wm.deflection(np.zeros(3), wm.hover_throttle), atol=1e-15)
    assert np.all(log.whisker == log.whisker[0])
    assert np.allclose(log.throttle, wm.hover_throttle)


def test_zero_propwash_vertical_rod_sees_only_airflow():
    wm = WhiskerModel(propwash=0.0)
    defl = wm.deflection(np.array([[1.0, 0.0, 0.0]]), 0.5)
    gain = wm.theta_max * 1.0 / (1.0 + wm.half_speed**2)
    q = wm.mounts[0].T @ [1.0, 0.0, 0.0]
    assert q[2] == 0.0
    assert np.allclose(defl[0, :2], gain * q[:2])


def test_motor_weights_and_mixer():
    wm = WhiskerModel(propwash_spread=2.0)
    W = wm.motor_weights()
    assert np.allclose(W.sum(axis=1), 1.0)
    assert np.allclose(W[0], 1.0 / 6)  # vertical rod
    assert np.allclose(MIXER.sum(axis=0), 0.0)
    # uniform thrust reduces to the mean-throttle downwash
    u = np.full((1, 6), 0.55)
    assert np.allclose(wm.deflection(np.zeros((1, 3)), u), WhiskerModel().deflection(np.zeros((1, 3)), 0.55))


def test_logs_are_deterministic():
    noise = SensorNoiseSpec(accel_noise=0.02, gyro_noise=0.003, whisker_noise=0.003, throttle_noise=0.05,
                            accel_bias_rw=0.003, odom_pos_std=0.01)
    a = simulate(LISSAJOUS, JET, noise, seed=11)
    b = simulate(LISSAJOUS, JET, noise, seed=11)
    c = simulate(LISSAJOUS, JET, noise, seed=12)
    assert np.array_equal(a.to_array(), b.to_array())
    assert not np.array_equal(a.acc, c.acc)


def test_accel_noise_matches_density():
    density, rate = 0.02, 200.0
    tr = generate_trajectory(TrajectorySpec(kind="hover", duration=60.0, rate=rate))
    log = synthesize_sensors(tr, WindFieldSpec(), SensorNoiseSpec(accel_noise=density), seed=3)
    resid = log.acc + np.einsum("nji,j->ni", tr.R, GRAVITY)
    assert np.std(resid) == pytest.approx(density * np.sqrt(rate), rel=0.1)


def test_bias_random_walk_statistics():
    density, rate, n = 0.003, 200.0, 2000
    tr = generate_trajectory(TrajectorySpec(kind="hover", duration=n / rate, rate=rate))
    incs = []
    for seed in range(20):
        log = synthesize_sensors(tr, WindFieldSpec(), SensorNoiseSpec(accel_bias_rw=density), seed=seed)
        incs.append(np.diff(log.gt_ba, axis=0))
    incs = np.concatenate(incs)
    var = density**2 / rate
    assert abs(incs.mean()) < 3 * np.sqrt(var / incs.size)
    assert incs.var() == pytest.approx(var, rel=0.15)


def test_turbulent_airflow_on_hover():
    wind = WindFieldSpec(turbulence_intensity=0.2, turbulence_tau=0.5)
    log = simulate(TrajectorySpec(kind="hover", duration=600.0), wind, SensorNoiseSpec(), seed=5)
    w = log.gt_wind - log.gt_wind.mean(axis=0)
    lag = int(0.5 * log.rate)
    rho = np.mean([np.corrcoef(w[:-lag, i], w[lag:, i])[0, 1] for i in range(3)])
    assert rho == pytest.approx(np.exp(-1.0), rel=0.2)
    assert np.allclose(log.airflow_truth(), np.einsum("nji,nj->ni", log.gt_R, log.gt_wind - log.gt_v))


def test_rotor_drag_tilts_attitude_and_shows_in_accelerometer():
    spec = TrajectorySpec(kind="circle", radius=1.5, period=6.0, duration=6.0)
    tr = generate_trajectory(spec)
    k = 0.4
    R, omega, thrust = drag_attitude(tr, np.zeros((len(tr.t), 3)), k, 1e-6)
    drag = -k * np.einsum("nji,nj->ni", R, tr.v)
    drag[:, 2] = 0
    # thrust along body z plus drag reproduces the kinematic acceleration
    total = thrust[:, None] * R[:, :, 2] + np.einsum("nij,nj->ni", R, drag)
    assert np.allclose(total, tr.a - GRAVITY, atol=1e-6)
    log = synthesize_sensors(tr, WindFieldSpec(), SensorNoiseSpec(), WhiskerModel(rotor_drag=k, drag_tau=1e-6), seed=0)
    assert np.allclose(log.acc[:, :2], drag[:, :2], atol=1e-6)
    # gyro still integrates to the logged attitude
    dt = 1 / spec.rate
    err = [np.linalg.norm(log_so3((A @ exp_so3(w * dt)).T @ B)) for A, B, w in zip(R[:-1], R[1:], omega[:-1])]
    assert max(err) < 1e-4


def test_throttle_lags_and_motor_effects():
    spec = TrajectorySpec(kind="hover", duration=10.0)
    wm = WhiskerModel(differential_std=0.05, throttle_scale_std=0.0)
    log = simulate(spec, WindFieldSpec(), SensorNoiseSpec(), wm, seed=2)
    # differential effort leaves the collective unchanged
    assert np.allclose(log.throttle.mean(axis=1), wm.hover_throttle, atol=1e-12)
    assert log.throttle.std(axis=0).min() > 0.02
    assert np.all((log.throttle >= 0) & (log.throttle <= 1))


def test_failure_injection():
    log = simulate(TrajectorySpec(kind="hover", duration=5.0), WindFieldSpec(), SensorNoiseSpec(), failure_time=3.0)
    avail = log.odom_available
    assert avail[0] and not avail[-1]
    assert np.all(np.diff(avail.astype(int)) <= 0)
    k = log.failure_index()
    assert log.t[k] >= 3.0 and log.t[k - 1] < 3.0
    assert np.all(np.isnan(log.odom_p[k:])) and np.all(np.isfinite(log.odom_p[:k]))
    late = simulate(TrajectorySpec(kind="hover", duration=5.0), WindFieldSpec(), SensorNoiseSpec(), failure_time=9.0)
    assert late.odom_available.all() and late.meta["failure_flagged"]


def test_csv_roundtrip(tmp_path):
    noise = SensorNoiseSpec(accel_noise=0.02, whisker_noise=0.003, odom_pos_std=0.01)
    log = simulate(dataclasses.replace(LISSAJOUS, duration=30.0), JET, noise, failure_time=20.0, seed=1)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert len(lines) - 2 == 6000
    back = SensorLog.from_csv(path)
    a, b = log.to_array(), back.to_array()
    assert np.array_equal(np.isnan(a), np.isnan(b))
    assert np.array_equal(a[~np.isnan(a)], b[~np.isnan(b)])
    assert back.meta == log.meta
    log.to_csv(tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_hat_consistency_of_gyro_on_circle():
    # yaw-rate of a level circle with tracking yaw equals 2 pi / period about z
    spec = TrajectorySpec(kind="circle", radius=1.0, period=8.0, duration=8.0, yaw="tracking")
    tr = generate_trajectory(spec)
    Rdot = np.gradient(tr.R, 1 / spec.rate, axis=0)
    assert np.allclose(Rdot[5:-5], np.einsum("nij,njk->nik", tr.R, np.stack([hat(w) for w in tr.omega]))[5:-5],
                       atol=1e-3)
    world_rate = np.einsum("nij,nj->ni", tr.R, tr.omega)
    assert np.allclose(world_rate[:, 2], 2 * np.pi / 8.0, atol=1e-6)
