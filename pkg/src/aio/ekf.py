"""Error-state EKF fusing IMU, relative-airflow and odometry measurements.

Error state (18): position, velocity, attitude error phi, accelerometer bias,
gyro bias, wind-map error e_w. The true attitude is ``exp(phi) @ R`` where ``R``
is the nominal rotation, so ``phi = log(R_true R^T)``. ``phi`` is injected into
the nominal rotation and reset to zero after every update.
"""

from __future__ import annotations

import dataclasses
import logging
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from aio.airflow import INPUT_RATE, OUTPUT_RATE, AirflowEstimator, AirflowMeasurement, log_features
from aio.geom import euler_zyx, exp_so3, hat, left_jacobian, log_so3
from aio.sim import GRAVITY

logger = logging.getLogger(__name__)

P_, V_, PHI_, BA_, BG_, EW_ = (slice(3 * i, 3 * i + 3) for i in range(6))
STATE_DIM = 18
STATE_LABELS = [f"{b}_{a}" for b in ("p", "v", "phi", "ba", "bg", "ew") for a in "xyz"]
MODES = ("imu-only", "aio-no-map", "aio-with-map")


class FilterError(RuntimeError):
    pass


@dataclass
class FilterState:
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    ew: np.ndarray
    P: np.ndarray
    t: float = 0.0
    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self):
        return FilterState(
            p=self.p.copy(), v=self.v.copy(), R=self.R.copy(), ba=self.ba.copy(),
            bg=self.bg.copy(), ew=self.ew.copy(), P=self.P.copy(), t=self.t, phi=self.phi.copy(),
        )

    @property
    def attitude(self):
        return exp_so3(self.phi) @ self.R

    def boxplus(self, dx):
        """Apply an error-state increment to the nominal state (phi reset to 0)."""
        out = self.copy()
        out.p = self.p + dx[P_]
        out.v = self.v + dx[V_]
        out.R = exp_so3(self.phi + dx[PHI_]) @ self.R
        out.phi = np.zeros(3)
        out.ba = self.ba + dx[BA_]
        out.bg = self.bg + dx[BG_]
        out.ew = self.ew + dx[EW_]
        return out


@dataclass
class ProcessNoiseSpec:
    """Continuous-time noise covariances (3x3 each)."""

    accel: np.ndarray
    gyro: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    wind: np.ndarray

    @classmethod
    def from_densities(cls, accel=0.0, gyro=0.0, accel_bias=0.0, gyro_bias=0.0, wind=0.0):
        I = np.eye(3)
        return cls(accel**2 * I, gyro**2 * I, accel_bias**2 * I, gyro_bias**2 * I, wind**2 * I)

    def continuous(self):
        Qc = np.zeros((15, 15))
        for i, blk in enumerate((self.accel, self.gyro, self.accel_bias, self.gyro_bias, self.wind)):
            Qc[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = blk
        return Qc


@dataclass
class OdomMeasurement:
    """Odometry sample. A block with covariance ``None`` (or non-finite) is unused."""

    p: np.ndarray | None = None
    v: np.ndarray | None = None
    R: np.ndarray | None = None
    cov_p: np.ndarray | None = None
    cov_v: np.ndarray | None = None
    cov_R: np.ndarray | None = None


@dataclass
class Innovation:
    residual: np.ndarray
    S: np.ndarray
    nis: float
    applied: bool


# ---------------------------------------------------------------------------
# prediction


def propagate_nominal(state, acc, gyro, dt, gravity=GRAVITY):
    """Forward-Euler propagation of the nominal state (phi assumed zero)."""
    a = acc - state.ba
    out = state.copy()
    out.p = state.p + state.v * dt
    out.v = state.v + (gravity + state.R @ a) * dt
    out.R = state.R @ exp_so3((gyro - state.bg) * dt)
    out.t = state.t + dt
    return out


def transition_matrices(state, acc, gyro, dt):
    """Error-state transition ``F`` (18x18) and noise input ``G`` (18x15)."""
    R = state.R
    a = acc - state.ba
    Jl = left_jacobian((gyro - state.bg) * dt)
    F = np.eye(STATE_DIM)
    F[P_, V_] = dt * np.eye(3)
    F[V_, PHI_] = -hat(R @ a) * dt
    F[V_, BA_] = -R * dt
    F[PHI_, BG_] = -(R @ Jl) * dt
    G = np.zeros((STATE_DIM, 15))
    G[V_, 0:3] = -R
    G[PHI_, 3:6] = -(R @ Jl)
    G[BA_, 6:9] = np.eye(3)
    G[BG_, 9:12] = np.eye(3)
    G[EW_, 12:15] = np.eye(3)
    return F, G


def predict(state, acc, gyro, dt, noise: ProcessNoiseSpec, gravity=GRAVITY):
    """One IMU prediction step. Raises FilterError on invalid input."""
    acc = np.asarray(acc, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    if not (np.all(np.isfinite(acc)) and np.all(np.isfinite(gyro))):
        raise FilterError("non-finite IMU sample")
    if not 0 < dt <= 0.1:
        raise FilterError(f"time step {dt} outside (0, 0.1] s")
    F, G = transition_matrices(state, acc, gyro, dt)
    out = propagate_nominal(state, acc, gyro, dt, gravity)
    P = F @ state.P @ F.T + (G @ noise.continuous() @ G.T) * dt
    out.P = 0.5 * (P + P.T)
    return out


# ---------------------------------------------------------------------------
# measurement models


def _wind(state, wind_map):
    if wind_map is None:
        return state.ew.copy(), np.zeros((3, 3)), np.zeros((3, 3))
    mean, cov = wind_map.query(state.p)
    return mean + state.ew, cov, wind_map.mean_jacobian(state.p)


class PredictiveMap:
    """Wind map whose covariance includes scaled observation noise."""

    def __init__(self, wind_map, noise_scale=1.0):
        self.wind_map = wind_map
        self.extra = noise_scale * np.asarray(wind_map.noise_covariance(), dtype=float)

    def query(self, p):
        mean, cov = self.wind_map.query(p)
        return mean, cov + self.extra

    def mean_jacobian(self, p):
        return self.wind_map.mean_jacobian(p)


def airflow_model(state, wind_map=None):
    """Predicted body-frame relative airflow ``R_true^T (w - v)``."""
    w, _, _ = _wind(state, wind_map)
    return state.attitude.T @ (w - state.v)


def airflow_jacobians(state, wind_map=None):
    """Measurement Jacobian H (3x18), noise Jacobian J and map covariance."""
    w, cov_map, dM = _wind(state, wind_map)
    Rt = state.attitude.T
    u = w - state.v
    H = np.zeros((3, STATE_DIM))
    H[:, P_] = Rt @ dM
    H[:, V_] = -Rt
    H[:, PHI_] = Rt @ hat(u) @ left_jacobian(state.phi)
    H[:, EW_] = Rt
    return H, Rt, cov_map


@lru_cache(maxsize=None)
def _gate_threshold(prob, dof):
    return float(chi2.ppf(prob, dof))


def _kalman_update(state, residual, H, Rm, gate=None):
    S = H @ state.P @ H.T + Rm
    S = 0.5 * (S + S.T)
    try:
        cf = cho_factor(S)
    except (LinAlgError, ValueError):
        logger.warning("innovation covariance not positive definite; update skipped")
        return state, Innovation(residual, S, np.nan, False)
    nis = float(residual @ cho_solve(cf, residual))
    if gate is not None and nis > _gate_threshold(gate, residual.size):
        return state, Innovation(residual, S, nis, False)
    PHt = state.P @ H.T
    K = cho_solve(cf, PHt.T).T
    out = state.boxplus(K @ residual)
    A = np.eye(STATE_DIM) - K @ H
    P = A @ state.P @ A.T + K @ Rm @ K.T
    out.P = 0.5 * (P + P.T)
    return out, Innovation(residual, S, nis, True)


def update_airflow(state, meas: AirflowMeasurement, wind_map=None, gate=None):
    """Airflow update; map uncertainty enters through its own noise Jacobian."""
    H, J, cov_map = airflow_jacobians(state, wind_map)
    residual = np.asarray(meas.value, dtype=float) - airflow_model(state, wind_map)
    Rm = np.asarray(meas.cov, dtype=float) + J @ cov_map @ J.T
    return _kalman_update(state, residual, H, Rm, gate)


def odometry_residual(state, meas: OdomMeasurement):
    """Stacked residual, Jacobian and noise covariance over the usable blocks."""
    rows, res, covs = [], [], []
    blocks = ((meas.p, meas.cov_p, P_), (meas.v, meas.cov_v, V_), (meas.R, meas.cov_R, PHI_))
    for value, cov, sl in blocks:
        if value is None or cov is None:
            continue
        cov = np.asarray(cov, dtype=float)
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(value)):
            continue
        if sl is PHI_:
            r = log_so3(np.asarray(value) @ state.R.T) - state.phi
        elif sl is P_:
            r = np.asarray(value) - state.p
        else:
            r = np.asarray(value) - state.v
        Hb = np.zeros((3, STATE_DIM))
        Hb[:, sl] = np.eye(3)
        rows.append(Hb)
        res.append(r)
        covs.append(cov)
    if not rows:
        return None
    n = 3 * len(rows)
    Rm = np.zeros((n, n))
    for i, c in enumerate(covs):
        Rm[3 * i : 3 * i + 3, 3 * i : 3 * i + 3] = c
    return np.concatenate(res), np.vstack(rows), Rm


def update_odometry(state, meas: OdomMeasurement, gate=None):
    """Linear update on position, velocity and attitude error."""
    parts = odometry_residual(state, meas)
    if parts is None:
        return state, Innovation(np.zeros(0), np.zeros((0, 0)), 0.0, False)
    residual, H, Rm = parts
    return _kalman_update(state, residual, H, Rm, gate)


# ---------------------------------------------------------------------------
# airflow sources for replay


class LstmAirflowSource:
    """Feeds 50 Hz features (IMU de-biased with the current estimate) to the
    learned regressor and emits its 25 Hz estimates."""

    rate = OUTPUT_RATE

    def __init__(self, model, cov, cov_scale=1.0):
        self.model = model
        self.cov = np.asarray(cov, dtype=float) * cov_scale

    def start(self, log):
        self._est = AirflowEstimator(self.model, self.cov)
        self._stride = int(round(log.rate / INPUT_RATE))
        self._feats = log_features(log, ba=np.zeros(3), bg=np.zeros(3))

    def measurement(self, k, log, state):
        if k % self._stride:
            return None
        f = self._feats[k].copy()
        f[8:11] -= state.bg
        f[11:14] -= state.ba
        return self._est.push(log.t[k], f)


class TruthAirflowSource:
    """Ground-truth relative airflow plus white noise at a fixed rate."""

    def __init__(self, cov, rate=25.0, seed=0):
        self.cov = np.asarray(cov, dtype=float)
        self.rate = rate
        self.seed = seed

    def start(self, log):
        self._stride = int(round(log.rate / self.rate))
        L = np.linalg.cholesky(self.cov)
        rng = np.random.default_rng(self.seed)
        self._values = log.airflow_truth() + rng.standard_normal((len(log), 3)) @ L.T

    def measurement(self, k, log, state):
        if k % self._stride or k == 0:
            return None
        return AirflowMeasurement(t=log.t[k], value=self._values[k], cov=self.cov)


# ---------------------------------------------------------------------------
# replay


@dataclass
class FilterConfig:
    """Noise model and policies for replaying a log.

    Densities follow :class:`aio.sim.SensorNoiseSpec`; ``wind_rw`` is the
    wind-error random-walk density used while mapping (no map attached and
    odometry available) and ``wind_rw_after_failure`` the one used without a
    map once odometry is gone. With a map the wind error never walks.

    ``map_noise_tau`` switches the map covariance from the latent GP variance
    to the predictive one. The observation noise of the map is treated as
    coloured with that correlation time and inflated by
    ``(1 + rho) / (1 - rho)``, ``rho = exp(-dt / tau)``, so that the white
    noise the filter assumes carries the same low-frequency power.
    """

    accel_noise: float = 0.02
    gyro_noise: float = 0.002
    accel_bias_rw: float = 0.002
    gyro_bias_rw: float = 2e-4
    wind_rw: float = 0.3
    odom_pos_std: float = 0.01
    odom_vel_std: float = 0.03
    odom_att_std: float = 0.01
    odom_rate: float = 50.0
    use_odom_velocity: bool = True
    init: str = "odometry"
    init_att_std: float = 0.01
    init_accel_bias_std: float = 0.1
    init_gyro_bias_std: float = 0.01
    init_wind_std: float = 1.0
    init_wind_std_with_map: float = 0.1
    airflow_cov_scale: float = 1.0
    wind_rw_after_failure: float = 0.0
    map_noise_tau: float | None = None
    odom_gate: float | None = None
    airflow_gate: float | None = None

    def __post_init__(self):
        if self.init not in ("odometry", "truth"):
            raise ValueError(f"unknown init policy {self.init!r}")
        if self.wind_rw < 0 or self.wind_rw_after_failure < 0:
            raise ValueError("wind random-walk densities must be non-negative")
        if self.map_noise_tau is not None and self.map_noise_tau < 0:
            raise ValueError("map_noise_tau must be non-negative")
        for g in (self.odom_gate, self.airflow_gate):
            if g is not None and not 0 < g < 1:
                raise ValueError("gates are chi-square probabilities in (0, 1)")

    def map_noise_inflation(self, interval):
        """Variance factor applied to the map observation noise."""
        if self.map_noise_tau is None:
            return 0.0
        if self.map_noise_tau == 0:
            return 1.0
        rho = np.exp(-interval / self.map_noise_tau)
        return (1 + rho) / (1 - rho)

    def process_noise(self, wind=0.0):
        return ProcessNoiseSpec.from_densities(
            self.accel_noise, self.gyro_noise, self.accel_bias_rw, self.gyro_bias_rw, wind
        )

    def odom_measurement(self, log, k):
        I = np.eye(3)
        return OdomMeasurement(
            p=log.odom_p[k], v=log.odom_v[k] if self.use_odom_velocity else None, R=log.odom_R[k],
            cov_p=self.odom_pos_std**2 * I, cov_v=self.odom_vel_std**2 * I if self.use_odom_velocity else None,
            cov_R=self.odom_att_std**2 * I,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FilterOutput:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    ew: np.ndarray
    P_diag: np.ndarray
    mode: str
    airflow_nis: list = field(default_factory=list)
    odom_nis: list = field(default_factory=list)
    skipped_updates: int = 0
    rejected_steps: int = 0
    final_state: FilterState | None = None

    CSV_COLUMNS = (
        ["t", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "yaw", "pitch", "roll"]
        + ["ba_x", "ba_y", "ba_z", "bg_x", "bg_y", "bg_z", "ew_x", "ew_y", "ew_z"]
        + [f"P_{s}" for s in STATE_LABELS]
    )

    def to_array(self):
        yaw, pitch, roll = euler_zyx(self.R)
        return np.column_stack(
            [self.t, self.p, self.v, yaw, pitch, roll, self.ba, self.bg, self.ew, self.P_diag]
        )

    def to_csv(self, path):
        data = self.to_array()
        with open(path, "w") as fh:
            fh.write(f"# aio-trajectory format_version=1 mode={self.mode}\n")
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for row in data:
                fh.write(",".join("%.17g" % x for x in row) + "\n")


def initial_state(log, config: FilterConfig, mode, wind_map=None):
    k = 0
    if config.init == "truth":
        p, v, R = log.gt_p[k].copy(), log.gt_v[k].copy(), log.gt_R[k].copy()
        ba, bg = log.gt_ba[k].copy(), log.gt_bg[k].copy()
    else:
        if not log.odom_available[k]:
            raise FilterError("odometry initialisation needs odometry at the first sample")
        p, v, R = log.odom_p[k].copy(), log.odom_v[k].copy(), log.odom_R[k].copy()
        ba, bg = np.zeros(3), np.zeros(3)
    wind_std = config.init_wind_std_with_map if mode == "aio-with-map" else config.init_wind_std
    P0 = np.diag(
        np.concatenate(
            [
                np.full(3, config.odom_pos_std**2),
                np.full(3, config.odom_vel_std**2),
                np.full(3, config.init_att_std**2),
                np.full(3, config.init_accel_bias_std**2),
                np.full(3, config.init_gyro_bias_std**2),
                np.full(3, wind_std**2),
            ]
        )
    )
    P0 = np.maximum(P0, np.diag(np.full(STATE_DIM, 1e-12)))
    return FilterState(p=p, v=v, R=R, ba=ba, bg=bg, ew=np.zeros(3), P=P0, t=float(log.t[k]))


def run_filter(log, mode, config: FilterConfig | None = None, airflow=None, wind_map=None):
    """Replay a sensor log.

    Prediction runs at the IMU rate, odometry updates at ``config.odom_rate``
    while available, airflow updates whenever ``airflow`` (a
    :class:`LstmAirflowSource` or :class:`TruthAirflowSource`) emits.
    """
    config = config or FilterConfig()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "imu-only" and airflow is None:
        raise ValueError(f"mode {mode!r} needs an airflow source")
    if mode == "aio-with-map" and wind_map is None:
        raise ValueError("mode 'aio-with-map' needs a wind map")
    use_airflow = mode != "imu-only"
    wmap = wind_map if mode == "aio-with-map" else None

    n = len(log)
    dt = log.dt
    odom_stride = max(1, int(round(log.rate / config.odom_rate)))
    no_map = mode == "aio-no-map"
    noise_mapping = config.process_noise(config.wind_rw if no_map else 0.0)
    noise_lost = config.process_noise(config.wind_rw_after_failure if no_map else 0.0)
    if wmap is not None and config.map_noise_tau is not None:
        interval = 1.0 / getattr(airflow, "rate", OUTPUT_RATE)
        wmap = PredictiveMap(wmap, config.map_noise_inflation(interval))

    state = initial_state(log, config, mode, wmap)
    if use_airflow:
        airflow.start(log)

    out = FilterOutput(
        t=log.t.copy(), p=np.empty((n, 3)), v=np.empty((n, 3)), R=np.empty((n, 3, 3)),
        ba=np.empty((n, 3)), bg=np.empty((n, 3)), ew=np.empty((n, 3)),
        P_diag=np.empty((n, STATE_DIM)), mode=mode,
    )
    lost_odometry = False
    for k in range(n):
        if k > 0:
            noise = noise_lost if lost_odometry else noise_mapping
            try:
                state = predict(state, log.acc[k - 1], log.gyro[k - 1], dt, noise)
            except FilterError as exc:
                logger.warning("step %d rejected: %s", k, exc)
                out.rejected_steps += 1
        if log.odom_available[k]:
            if k % odom_stride == 0:
                state, info = update_odometry(state, config.odom_measurement(log, k), config.odom_gate)
                out.odom_nis.append(info.nis)
                out.skipped_updates += not info.applied
        else:
            lost_odometry = True
        if use_airflow:
            meas = airflow.measurement(k, log, state)
            if meas is not None:
                state, info = update_airflow(state, meas, wmap, config.airflow_gate)
                out.airflow_nis.append(info.nis)
                out.skipped_updates += not info.applied
        out.p[k] = state.p
        out.v[k] = state.v
        out.R[k] = state.R
        out.ba[k] = state.ba
        out.bg[k] = state.bg
        out.ew[k] = state.ew
        out.P_diag[k] = np.diag(state.P)
    out.final_state = state
    return out


def estimate_wind(log, airflow, config: FilterConfig | None = None, burn_in=10.0, sample_rate=1.0):
    """Run the filter in mapping mode and subsample the wind estimate.

    Returns ``(t, p_hat, w_hat)`` sampled at ``sample_rate`` from ``burn_in``
    seconds on. Mapping needs the position fix, so logs with any odometry
    gap are rejected.
    """
    if not np.all(log.odom_available):
        gap = float(log.t[np.argmin(log.odom_available)])
        raise ValueError(f"mapping needs odometry for the whole log; it is missing from t={gap:.3f} s")
    if sample_rate <= 0 or sample_rate > log.rate:
        raise ValueError(f"sample rate must be in (0, {log.rate}] Hz")
    out = run_filter(log, "aio-no-map", config, airflow=airflow)
    stride = int(round(log.rate / sample_rate))
    idx = np.arange(int(np.ceil(burn_in * log.rate - 1e-9)), len(log), stride)
    return out.t[idx], out.p[idx], out.ew[idx]
