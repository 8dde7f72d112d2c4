"""Ready-made pipeline configurations.

``zero-wind`` evaluates dead reckoning in still air, ``jet`` adds a wind jet
and a map learned from a separate mapping flight, ``full`` runs both
evaluations off one trained network, and ``smoke`` is a seconds-long
version of ``full`` for tests.
"""

from __future__ import annotations

import copy

import numpy as np

from aio.airflow import TrainingConfig
from aio.ekf import FilterConfig
from aio.evaluation import ExperimentSpec
from aio.sim import Jet, SensorNoiseSpec, TrajectorySpec, WhiskerModel, WindFieldSpec

# consumer-grade IMU, mocap-like odometry
NOISE = SensorNoiseSpec(
    accel_noise=0.02, gyro_noise=0.003, accel_bias_rw=0.003, gyro_bias_rw=3e-4,
    accel_bias_init=0.1, gyro_bias_init=0.01, whisker_noise=0.003, throttle_noise=0.05,
    odom_pos_std=0.01, odom_vel_std=0.03, odom_att_std=0.01,
)

# hexarotor effects that make throttle and accelerometer informative inputs
WHISKERS = WhiskerModel(
    propwash=4.0, propwash_spread=2.0, differential_std=0.06, throttle_scale_std=0.03, rotor_drag=0.35,
)

# correlation time of the simulated gusts; the filter treats map residuals alike
JET_WIND_TAU = 0.5

JET_WIND = WindFieldSpec(
    jets=[Jet(origin=[0.0, 0.0, 1.5], direction=[0.0, 1.0, 0.0], core_speed=2.0,
              radial_decay=0.7, axial_decay=1.5)],
    turbulence_intensity=0.15,
    turbulence_tau=JET_WIND_TAU,
)

FILTER = FilterConfig(
    accel_noise=0.02, gyro_noise=0.003, accel_bias_rw=0.003, gyro_bias_rw=3e-4,
    map_noise_tau=JET_WIND_TAU, airflow_gate=0.95,
)

MAPPING_FLIGHT = TrajectorySpec(
    kind="lissajous", duration=130.0, center=[0.0, 0.0, 1.5], amplitude=[2.8, 2.3, 0.3],
    frequency=[0.061, 0.083, 0.11], phase=[0.3, 1.1, 0.0],
    yaw="sinusoid", yaw_amplitude=1.5, yaw_frequency=0.03,
)

# hover on the jet's upwind side, then cross the jet back and forth
JET_EVAL_FLIGHT = TrajectorySpec(
    kind="waypoints", duration=38.0,
    waypoints=[[-3, 0, 1.5], [-2.5, -1.5, 1.6], [-3.5, -0.5, 1.4], [-2.5, 1.2, 1.5], [-3.6, 1.0, 1.6],
               [-3, -1.2, 1.5], [-3, 0, 1.5], [2.5, 0.2, 1.5], [-2.5, -0.3, 1.5], [2.5, 0.4, 1.6],
               [-2.0, 0, 1.5]],
    segment_times=[4, 4, 4, 4, 3, 3, 4.5, 4.5, 4.5, 4.5],
    yaw="sinusoid", yaw_amplitude=0.6, yaw_frequency=0.07,
)


def random_lissajous(rng, duration, max_speed=2.8, center=(0.0, 0.0, 1.5)):
    """An aggressive Lissajous flight with a swinging heading."""
    f = rng.uniform(0.06, 0.22, 3)
    A = np.r_[rng.uniform(1.0, 2.5, 2), rng.uniform(0.1, 0.4)]
    speed = np.linalg.norm(A * 2 * np.pi * f)
    if speed > max_speed:
        A *= max_speed / speed
    return TrajectorySpec(
        kind="lissajous", duration=duration, center=list(center), amplitude=A.tolist(),
        frequency=f.tolist(), phase=rng.uniform(0, 2 * np.pi, 3).tolist(),
        yaw="sinusoid", yaw0=float(rng.uniform(-np.pi, np.pi)),
        yaw_amplitude=float(rng.uniform(0.5, 2.0)), yaw_frequency=float(rng.uniform(0.02, 0.1)),
    )


def training_flights(count=8, duration=60.0, seed=0):
    rng = np.random.default_rng(seed)
    return [random_lissajous(rng, duration) for _ in range(count)]


def _zero_wind_eval(duration=30.0, seed=123):
    return random_lissajous(np.random.default_rng(seed), duration)


def _evaluation(name, traj, wind, modes, **experiment):
    return {
        "id": name,
        "trajectory": traj.to_dict(),
        "wind": wind.to_dict(),
        "experiment": ExperimentSpec(dataset=name, modes=list(modes), seed=None, **experiment).to_dict(),
    }


def _base(name, flights, training):
    return {
        "format_version": 1,
        "name": name,
        "seed": 0,
        "noise": NOISE.to_dict(),
        "whiskers": WHISKERS.to_dict(),
        "filter": FILTER.to_dict(),
        "training": {"flights": [f.to_dict() for f in flights], "config": training.to_dict()},
        "mapping": None,
        "evaluations": [],
    }


def _mapping(traj, wind, M=20, burn_in=10.0):
    return {
        "trajectory": traj.to_dict(),
        "wind": wind.to_dict(),
        "burn_in": burn_in,
        "sample_rate": 1.0,
        "fit": {"M": M, "optimize": True, "optimize_inducing": True, "maxiter": 300},
    }


def preset(name):
    """Return a fresh pipeline configuration dictionary."""
    training = TrainingConfig(epochs=20)
    zero = _evaluation("zero-wind", _zero_wind_eval(), WindFieldSpec(), ["imu-only", "aio-no-map"],
                       repetitions=10, failure_start=20.0, failure_width=2.0, horizon=30.0)
    jet = _evaluation("jet", JET_EVAL_FLIGHT, JET_WIND, ["imu-only", "aio-no-map", "aio-with-map"],
                      repetitions=10, failure_start=20.0, failure_width=2.0, horizon=38.0)
    if name == "zero-wind":
        cfg = _base(name, training_flights(), training)
        cfg["evaluations"] = [zero]
    elif name == "jet":
        cfg = _base(name, training_flights(), training)
        cfg["mapping"] = _mapping(MAPPING_FLIGHT, JET_WIND)
        cfg["evaluations"] = [jet]
    elif name == "full":
        cfg = _base(name, training_flights(), training)
        cfg["mapping"] = _mapping(MAPPING_FLIGHT, JET_WIND)
        cfg["evaluations"] = [zero, jet]
    elif name == "smoke":
        cfg = _base(name, training_flights(count=2, duration=20.0), TrainingConfig(epochs=2))
        short_map = copy.deepcopy(MAPPING_FLIGHT)
        short_map.duration = 30.0
        cfg["mapping"] = _mapping(short_map, JET_WIND, M=8, burn_in=5.0)
        cfg["mapping"]["fit"]["maxiter"] = 30
        cfg["evaluations"] = [
            _evaluation("zero-wind", _zero_wind_eval(duration=12.0), WindFieldSpec(),
                        ["imu-only", "aio-no-map"], repetitions=2, failure_start=6.0,
                        failure_width=1.0, horizon=12.0),
            _evaluation("jet", _zero_wind_eval(duration=12.0), JET_WIND, ["imu-only", "aio-with-map"],
                        repetitions=2, failure_start=6.0, failure_width=1.0, horizon=12.0),
        ]
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return cfg


PRESETS = ("zero-wind", "jet", "full", "smoke")
