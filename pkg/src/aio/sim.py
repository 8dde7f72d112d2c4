"""Synthetic flights, wind fields and sensor streams.

Trajectories are kinematic: position is an analytic function of time, the
attitude follows from the direction of the commanded thrust (multirotor
differential flatness) plus a yaw profile, and the body rates are obtained by
differentiating the attitude.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from aio.geom import exp_so3, log_so3

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_PEAK_SPEED = 3.0
SENSORLOG_FORMAT_VERSION = 1
N_WHISKERS = 4
N_MOTORS = 6
MOTOR_AZIMUTHS = np.deg2rad(30.0 + 60.0 * np.arange(N_MOTORS))
# roll, pitch and yaw effort to per-motor thrust; every column sums to zero
MIXER = np.column_stack([
    np.sin(MOTOR_AZIMUTHS),
    -np.cos(MOTOR_AZIMUTHS),
    np.where(np.arange(N_MOTORS) % 2 == 0, 1.0, -1.0),
])


# ---------------------------------------------------------------------------
# specs


@dataclass
class TrajectorySpec:
    """Parametric description of a flight.

    ``kind`` is one of ``hover``, ``circle``, ``lissajous`` or ``waypoints``.
    ``peak_speed`` is an upper bound checked against the generated velocity.
    ``yaw`` is one of ``fixed``, ``sinusoid`` or ``tracking``.
    """

    kind: str = "hover"
    duration: float = 10.0
    rate: float = 200.0
    peak_speed: float = MAX_PEAK_SPEED
    center: list = field(default_factory=lambda: [0.0, 0.0, 1.5])
    # circle
    radius: float = 1.0
    period: float = 2.0 * np.pi
    # lissajous
    amplitude: list = field(default_factory=lambda: [1.0, 1.0, 0.2])
    frequency: list = field(default_factory=lambda: [0.1, 0.15, 0.2])
    phase: list | None = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # waypoints: min-jerk segments, each ending at rest
    waypoints: list = field(default_factory=list)
    segment_times: list = field(default_factory=list)
    yaw: str = "fixed"
    yaw0: float = 0.0
    yaw_amplitude: float = 0.0
    yaw_frequency: float = 0.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")
        if not self.rate > 0:
            raise ValueError(f"rate must be > 0, got {self.rate}")
        if not 0 <= self.peak_speed <= MAX_PEAK_SPEED:
            raise ValueError(
                f"peak_speed must lie in [0, {MAX_PEAK_SPEED}] m/s, got {self.peak_speed}"
            )
        if self.kind not in ("hover", "circle", "lissajous", "waypoints"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.yaw not in ("fixed", "sinusoid", "tracking"):
            raise ValueError(f"unknown yaw profile {self.yaw!r}")

    @property
    def n_samples(self):
        return int(round(self.duration * self.rate))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Jet:
    origin: list
    direction: list
    core_speed: float
    radial_decay: float
    axial_decay: float

    def __post_init__(self):
        if self.radial_decay <= 0 or self.axial_decay <= 0:
            raise ValueError("jet decay lengths must be > 0")
        if self.core_speed < 0:
            raise ValueError("jet core speed must be >= 0")
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("jet direction must be nonzero")
        self.direction = list(d / n)


@dataclass
class WindFieldSpec:
    """Stationary mean field (sum of jets) plus Ornstein-Uhlenbeck turbulence."""

    jets: list = field(default_factory=list)
    turbulence_intensity: float = 0.0
    turbulence_tau: float = 0.5

    def __post_init__(self):
        self.jets = [j if isinstance(j, Jet) else Jet(**j) for j in self.jets]
        if self.turbulence_intensity < 0:
            raise ValueError("turbulence intensity must be >= 0")
        if self.turbulence_tau <= 0:
            raise ValueError("turbulence correlation time must be > 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SensorNoiseSpec:
    """Noise densities are continuous-time: white noise in unit/sqrt(Hz),
    bias random walks in unit/s/sqrt(Hz). Initial biases are drawn per axis
    with the given standard deviation."""

    accel_noise: float = 0.0
    gyro_noise: float = 0.0
    accel_bias_rw: float = 0.0
    gyro_bias_rw: float = 0.0
    accel_bias_init: float = 0.0
    gyro_bias_init: float = 0.0
    whisker_noise: float = 0.0
    throttle_noise: float = 0.0
    odom_pos_std: float = 0.0
    odom_vel_std: float = 0.0
    odom_att_std: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _mount(rod_axis):
    z = np.asarray(rod_axis, dtype=float)
    z = z / np.linalg.norm(z)
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _default_rods():
    rods = [[0.0, 0.0, 1.0]]
    el = np.deg2rad(30.0)
    for az in np.deg2rad([45.0, 165.0, 285.0]):
        rods.append([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return rods


@dataclass
class WhiskerModel:
    """Synthetic forward model of the four whisker sensors and the motors.

    Each sensor bends about the two axes orthogonal to its rod. The deflection
    is ``s(|q|) * q_perp / |q|`` where ``q`` is the local airflow in the sensor
    frame and ``s(x) = theta_max * x^2 / (x^2 + half_speed^2)``. The local
    airflow is the relative airflow plus a downwash along body -z of
    ``propwash * sum_j w_ij u_j``: a weighted average of the produced motor
    thrusts ``u_j``, favouring motors whose azimuth is close to the rod's
    (``propwash_spread`` is the von Mises concentration; a vertical rod sees
    all motors equally).

    The collective throttle is ``hover_throttle + thrust_gain * (f - g)``
    where ``f`` is the specific-force magnitude. On top of it each motor
    carries a zero-sum differential effort (roll/pitch/yaw OU processes of
    std ``differential_std`` and time constant ``differential_tau`` mixed for
    a hexacopter): the attitude controller rejecting torque disturbances,
    which leaves the rigid-body motion untouched. Produced thrust follows
    the recorded command through a first-order lag of ``motor_tau``. The
    command needed for a given thrust differs between flights (battery and
    payload) by a factor drawn with std ``throttle_scale_std``.

    Rotor drag adds a body-frame specific force ``-rotor_drag * q_xy`` where
    ``q`` is the air-relative velocity seen through a ``drag_tau`` lag. The
    attitude tilts so that thrust plus drag still produce the commanded
    acceleration, which makes the accelerometer sensitive to airspeed.

    The defaults switch the motor-level effects off: the downwash is then
    ``propwash`` times the mean throttle and the throttle is affine in the
    commanded thrust.
    """

    rods: list = field(default_factory=_default_rods)
    theta_max: float = 0.5
    half_speed: float = 3.0
    propwash: float = 2.0
    hover_throttle: float = 0.5
    thrust_gain: float = 0.05
    motor_tau: float = 0.05
    propwash_spread: float = 0.0
    differential_std: float = 0.0
    differential_tau: float = 0.3
    throttle_scale_std: float = 0.0
    rotor_drag: float = 0.0
    drag_tau: float = 0.15

    def __post_init__(self):
        if len(self.rods) != N_WHISKERS:
            raise ValueError(f"expected {N_WHISKERS} whisker mounts")
        for name in ("theta_max", "half_speed", "differential_tau", "drag_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("propwash", "motor_tau", "propwash_spread", "differential_std",
                     "throttle_scale_std", "rotor_drag"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def mounts(self):
        return [_mount(r) for r in self.rods]

    def motor_weights(self):
        """(N_WHISKERS, N_MOTORS) downwash weights, rows summing to one."""
        W = np.empty((N_WHISKERS, N_MOTORS))
        for i, r in enumerate(np.asarray(self.rods, float)):
            r = r / np.linalg.norm(r)
            kappa = self.propwash_spread * np.hypot(r[0], r[1])
            w = np.exp(kappa * np.cos(MOTOR_AZIMUTHS - np.arctan2(r[1], r[0])))
            W[i] = w / w.sum()
        return W

    def deflection(self, airflow_body, motor_thrust):
        """Whisker angles (N, 8) for body-frame relative airflow (N, 3).

        ``motor_thrust`` is (N, N_MOTORS) produced throttle, or a scalar / (N,)
        collective applied to every motor.
        """
        airflow_body = np.atleast_2d(airflow_body)
        n = airflow_body.shape[0]
        u = np.asarray(motor_thrust, float)
        if u.ndim < 2:
            u = np.broadcast_to(u.reshape(-1, 1) if u.ndim == 1 else u, (n, N_MOTORS))
        wash = self.propwash * u @ self.motor_weights().T
        out = np.empty((airflow_body.shape[0], 2 * N_WHISKERS))
        for i, Ri in enumerate(self.mounts):
            q_body = airflow_body.copy()
            q_body[:, 2] -= wash[:, i]
            q = q_body @ Ri
            mag2 = np.sum(q * q, axis=1)
            # s(|q|)/|q| = theta_max |q| / (|q|^2 + h^2), finite at q = 0
            gain = self.theta_max * np.sqrt(mag2) / (mag2 + self.half_speed**2)
            out[:, 2 * i] = gain * q[:, 0]
            out[:, 2 * i + 1] = gain * q[:, 1]
        return out

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Truth:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    rate: float


def _min_jerk(p0, p1, T, tau):
    s = np.clip(tau / T, 0.0, 1.0)[:, None]
    d = (np.asarray(p1) - np.asarray(p0))[None, :]
    pos = p0 + d * (10 * s**3 - 15 * s**4 + 6 * s**5)
    vel = d * (30 * s**2 - 60 * s**3 + 30 * s**4) / T
    acc = d * (60 * s - 180 * s**2 + 120 * s**3) / T**2
    return pos, vel, acc


def _kinematics(spec, t, phase):
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    c = np.asarray(spec.center, dtype=float)
    if spec.kind == "hover":
        return np.tile(c, (n, 1)), np.zeros((n, 3)), np.zeros((n, 3))
    if spec.kind == "circle":
        w = 2.0 * np.pi / spec.period
        r = spec.radius
        cs, sn = np.cos(w * t), np.sin(w * t)
        z = np.zeros(n)
        p = c + r * np.column_stack([cs, sn, z])
        v = r * w * np.column_stack([-sn, cs, z])
        a = -r * w**2 * np.column_stack([cs, sn, z])
        return p, v, a
    if spec.kind == "lissajous":
        A = np.asarray(spec.amplitude, dtype=float)
        w = 2.0 * np.pi * np.asarray(spec.frequency, dtype=float)
        arg = t[:, None] * w + phase
        p = c + A * np.sin(arg)
        v = A * w * np.cos(arg)
        a = -A * w**2 * np.sin(arg)
        return p, v, a
    # waypoints
    pts = np.asarray(spec.waypoints, dtype=float)
    times = np.concatenate([[0.0], np.cumsum(spec.segment_times)])
    p = np.tile(pts[-1], (n, 1))
    v = np.zeros((n, 3))
    a = np.zeros((n, 3))
    for k in range(len(pts) - 1):
        sel = (t >= times[k]) & (t < times[k + 1])
        if np.any(sel):
            p[sel], v[sel], a[sel] = _min_jerk(pts[k], pts[k + 1], spec.segment_times[k], t[sel] - times[k])
    return p, v, a


def _yaw(spec, t, v):
    if spec.yaw == "fixed":
        return np.full(t.shape, spec.yaw0)
    if spec.yaw == "sinusoid":
        return spec.yaw0 + spec.yaw_amplitude * np.sin(2.0 * np.pi * spec.yaw_frequency * t)
    speed = np.hypot(v[:, 0], v[:, 1])
    if np.any(speed < 0.05):
        raise ValueError("tracking yaw requires horizontal speed >= 0.05 m/s at all times")
    return np.arctan2(v[:, 1], v[:, 0])


def _frame(zb, heading):
    """Rotations with body z along ``zb`` and body x in the vertical plane of ``heading``."""
    xc = np.column_stack([np.cos(heading), np.sin(heading), np.zeros_like(heading)])
    yb = np.cross(zb, xc)
    yb /= np.linalg.norm(yb, axis=1, keepdims=True)
    xb = np.cross(yb, zb)
    return np.stack([xb, yb, zb], axis=2)


def _heading(R):
    """Inverse of the heading used by :func:`_frame`."""
    xb, zb = R[:, :, 0], R[:, :, 2]
    xc = xb - (xb[:, 2] / zb[:, 2])[:, None] * zb
    return np.arctan2(xc[:, 1], xc[:, 0])


def _attitude(spec, t, phase):
    _, v, a = _kinematics(spec, t, phase)
    thrust = a - GRAVITY
    zb = thrust / np.linalg.norm(thrust, axis=1, keepdims=True)
    return _frame(zb, _yaw(spec, t, v))


def _validate_waypoints(spec):
    pts = np.asarray(spec.waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ValueError("waypoints must be a list of at least two 3D points")
    if len(spec.segment_times) != len(pts) - 1:
        raise ValueError(
            f"{len(pts)} waypoints need {len(pts) - 1} segment times, got {len(spec.segment_times)}"
        )
    for k, T in enumerate(spec.segment_times):
        if T <= 0:
            raise ValueError(f"segment {k} has non-positive duration {T}")
        dist = np.linalg.norm(pts[k + 1] - pts[k])
        vmax = 1.875 * dist / T
        if vmax > spec.peak_speed + 1e-12:
            raise ValueError(
                f"segment {k} ({dist:.3f} m in {T:.3f} s) needs peak speed "
                f"{vmax:.3f} m/s > limit {spec.peak_speed:.3f} m/s"
            )


def generate_trajectory(spec: TrajectorySpec, seed=None) -> Truth:
    """Sample a ground-truth flight at ``spec.rate``.

    ``seed`` is only used when ``spec.phase`` is None (random Lissajous phases).
    """
    if spec.kind == "waypoints":
        _validate_waypoints(spec)
    if spec.phase is None:
        phase = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, 3)
    else:
        phase = np.asarray(spec.phase, dtype=float)

    n = spec.n_samples
    t = np.arange(n) / spec.rate
    p, v, a = _kinematics(spec, t, phase)
    speed = np.linalg.norm(v, axis=1).max(initial=0.0)
    if speed > spec.peak_speed + 1e-9:
        raise ValueError(f"trajectory reaches {speed:.3f} m/s, above peak_speed {spec.peak_speed}")
    R = _attitude(spec, t, phase)

    # body rates by central differencing the attitude with a small step
    h = 1e-4
    Rm = _attitude(spec, t - h, phase)
    Rp = _attitude(spec, t + h, phase)
    omega = np.array([log_so3(A.T @ B) for A, B in zip(Rm, Rp)]) / (2.0 * h)
    return Truth(t=t, p=p, v=v, a=a, R=R, omega=omega, rate=spec.rate)


# ---------------------------------------------------------------------------
# wind


def wind_at(spec: WindFieldSpec, p):
    """Mean wind (world frame) at ``p`` of shape (3,) or (N, 3)."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    P = np.atleast_2d(p)
    w = np.zeros_like(P)
    for jet in spec.jets:
        d = np.asarray(jet.direction)
        delta = P - np.asarray(jet.origin)
        s = delta @ d
        r2 = np.sum(delta * delta, axis=1) - s**2
        f = np.exp(-0.5 * r2 / jet.radial_decay**2 - 0.5 * s**2 / jet.axial_decay**2)
        w += jet.core_speed * f[:, None] * d
    return w[0] if single else w


def wind_jacobian(spec: WindFieldSpec, p):
    """Analytic 3x3 Jacobian d wind / d position at a single point."""
    p = np.asarray(p, dtype=float)
    J = np.zeros((3, 3))
    for jet in spec.jets:
        d = np.asarray(jet.direction)
        delta = p - np.asarray(jet.origin)
        s = delta @ d
        r2 = delta @ delta - s**2
        f = np.exp(-0.5 * r2 / jet.radial_decay**2 - 0.5 * s**2 / jet.axial_decay**2)
        grad = -f * ((delta - s * d) / jet.radial_decay**2 + s * d / jet.axial_decay**2)
        J += jet.core_speed * np.outer(d, grad)
    return J


def ou_process(n, dt, intensity, tau, rng, dim=3):
    """Stationary Ornstein-Uhlenbeck samples with std ``intensity``."""
    if intensity == 0:
        return np.zeros((n, dim))
    phi = np.exp(-dt / tau)
    scale = intensity * np.sqrt(1.0 - phi**2)
    x0 = intensity * rng.standard_normal(dim)
    noise = rng.standard_normal((n, dim))
    noise[0] = 0.0
    return lfilter([scale], [1.0, -phi], noise, axis=0, zi=x0[None, :])[0]


# ---------------------------------------------------------------------------
# sensor log


_VEC = ("x", "y", "z")


def _cols(prefix, n=3, names=_VEC):
    return [f"{prefix}_{names[i]}" for i in range(n)]


def _rcols(prefix):
    return [f"{prefix}_r{i}{j}" for i in range(3) for j in range(3)]


COLUMNS = (
    ["t"]
    + _cols("acc")
    + _cols("gyro")
    + [f"whisker{i + 1}_{ax}" for i in range(N_WHISKERS) for ax in ("x", "y")]
    + [f"throttle{i + 1}" for i in range(N_MOTORS)]
    + _cols("odom_p")
    + _cols("odom_v")
    + _rcols("odom_R")
    + ["odom_available"]
    + _cols("gt_p")
    + _cols("gt_v")
    + _rcols("gt_R")
    + _cols("gt_wind")
    + _cols("gt_ba")
    + _cols("gt_bg")
)


@dataclass
class SensorLog:
    """Time-indexed synthetic sensor record, one row per IMU sample."""

    t: np.ndarray
    acc: np.ndarray
    gyro: np.ndarray
    whisker: np.ndarray
    throttle: np.ndarray
    odom_p: np.ndarray
    odom_v: np.ndarray
    odom_R: np.ndarray
    odom_available: np.ndarray
    gt_p: np.ndarray
    gt_v: np.ndarray
    gt_R: np.ndarray
    gt_wind: np.ndarray
    gt_ba: np.ndarray
    gt_bg: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    @property
    def rate(self):
        return 1.0 / (self.t[1] - self.t[0])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    def airflow_truth(self):
        """Relative airflow in the body frame, ``R^T (w - v)``."""
        return np.einsum("nji,nj->ni", self.gt_R, self.gt_wind - self.gt_v)

    def with_failure(self, failure_time):
        """Copy with odometry removed from ``failure_time`` onwards."""
        out = dataclasses.replace(self, meta=dict(self.meta))
        avail = self.odom_available & (self.t < failure_time)
        out.odom_available = avail
        for name in ("odom_p", "odom_v", "odom_R"):
            arr = getattr(self, name).copy()
            arr[~avail] = np.nan
            setattr(out, name, arr)
        out.meta["failure_time"] = float(failure_time)
        out.meta["failure_flagged"] = bool(failure_time > self.t[-1])
        return out

    def failure_index(self):
        """Index of the first row without odometry (len(self) if none)."""
        idx = np.flatnonzero(~self.odom_available)
        return int(idx[0]) if idx.size else len(self)

    def to_array(self):
        n = len(self)
        return np.column_stack(
            [
                self.t,
                self.acc,
                self.gyro,
                self.whisker,
                self.throttle,
                self.odom_p,
                self.odom_v,
                self.odom_R.reshape(n, 9),
                self.odom_available.astype(float),
                self.gt_p,
                self.gt_v,
                self.gt_R.reshape(n, 9),
                self.gt_wind,
                self.gt_ba,
                self.gt_bg,
            ]
        )

    def to_csv(self, path):
        meta = {"format": "aio-sensorlog", "format_version": SENSORLOG_FORMAT_VERSION}
        meta.update(self.meta)
        data = self.to_array()
        avail_col = COLUMNS.index("odom_available")
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write(",".join(COLUMNS) + "\n")
            for row in data:
                cells = ["%.17g" % x for x in row]
                cells[avail_col] = "1" if row[avail_col] else "0"
                fh.write(",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            first = fh.readline()
            header = fh.readline().strip().split(",")
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing metadata comment line")
        meta = json.loads(first[1:])
        if meta.get("format_version") != SENSORLOG_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {meta.get('format_version')}")
        if header != COLUMNS:
            raise ValueError(f"{path}: unexpected column layout")
        data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        meta.pop("format", None)
        meta.pop("format_version", None)
        return cls.from_array(data, meta)

    @classmethod
    def from_array(cls, data, meta=None):
        n = data.shape[0]
        idx = {name: i for i, name in enumerate(COLUMNS)}

        def block(name, width):
            i = idx[name]
            return data[:, i : i + width].copy()

        return cls(
            t=data[:, 0].copy(),
            acc=block("acc_x", 3),
            gyro=block("gyro_x", 3),
            whisker=block("whisker1_x", 2 * N_WHISKERS),
            throttle=block("throttle1", N_MOTORS),
            odom_p=block("odom_p_x", 3),
            odom_v=block("odom_v_x", 3),
            odom_R=block("odom_R_r00", 9).reshape(n, 3, 3),
            odom_available=data[:, idx["odom_available"]] > 0.5,
            gt_p=block("gt_p_x", 3),
            gt_v=block("gt_v_x", 3),
            gt_R=block("gt_R_r00", 9).reshape(n, 3, 3),
            gt_wind=block("gt_wind_x", 3),
            gt_ba=block("gt_ba_x", 3),
            gt_bg=block("gt_bg_x", 3),
            meta=dict(meta or {}),
        )


def _first_order_lag(x, dt, tau):
    """Discrete first-order lag along axis 0, starting at the first sample."""
    if tau <= 0:
        return x.copy()
    a = np.exp(-dt / tau)
    return lfilter([1.0 - a], [1.0, -a], x, axis=0, zi=a * x[:1])[0]


def drag_attitude(truth: Truth, wind_total, rotor_drag, drag_tau, iterations=4):
    """Re-solve the attitude for rotor drag.

    Keeps the heading of ``truth.R``. Returns ``(R, omega, thrust)`` with
    ``thrust`` the specific thrust magnitude along body z.
    """
    F = truth.a - GRAVITY
    R = truth.R
    if rotor_drag == 0:
        return R, truth.omega, np.linalg.norm(F, axis=1)
    dt = 1.0 / truth.rate
    rel = truth.v - _first_order_lag(np.asarray(wind_total, float), dt, drag_tau)
    heading = _heading(R)
    for _ in range(iterations):
        drag = -rotor_drag * np.einsum("nji,nj->ni", R, rel)
        drag[:, 2] = 0.0
        zb = F - np.einsum("nij,nj->ni", R, drag)
        zb /= np.linalg.norm(zb, axis=1, keepdims=True)
        R = _frame(zb, heading)
    thrust = np.einsum("ni,ni->n", R[:, :, 2], F)
    n = R.shape[0]
    if n < 3:
        return R, np.zeros((n, 3)), thrust
    lo = np.r_[0, np.arange(n - 2), n - 2]
    hi = np.r_[1, np.arange(2, n), n - 1]
    omega = np.array([log_so3(R[i].T @ R[j]) for i, j in zip(lo, hi)]) / ((hi - lo) * dt)[:, None]
    return R, omega, thrust


def _random_walk(n, dt, density, init_std, rng):
    b0 = init_std * rng.standard_normal(3)
    steps = density * np.sqrt(dt) * rng.standard_normal((n, 3))
    steps[0] = 0.0
    return b0 + np.cumsum(steps, axis=0)


def synthesize_sensors(
    truth: Truth,
    wind: WindFieldSpec,
    noise: SensorNoiseSpec,
    whiskers: WhiskerModel | None = None,
    failure_time=None,
    seed=0,
) -> SensorLog:
    """Produce all sensor streams for a ground-truth flight.

    Odometry is available strictly before ``failure_time``; ``None`` (or a
    time beyond the end of the flight) keeps it available throughout, and
    the latter case is flagged in ``meta``.
    """
    whiskers = whiskers or WhiskerModel()
    n = truth.t.shape[0]
    if any(x.shape[0] != n for x in (truth.p, truth.v, truth.a, truth.R, truth.omega)):
        raise ValueError("truth arrays have inconsistent lengths")
    dt = 1.0 / truth.rate
    rng = np.random.default_rng(seed)
    # fixed draw order keeps each stream reproducible
    r_bias, r_imu, r_wind, r_whisk, r_thr, r_odom = rng.spawn(6)

    ba = _random_walk(n, dt, noise.accel_bias_rw, noise.accel_bias_init, r_bias)
    bg = _random_walk(n, dt, noise.gyro_bias_rw, noise.gyro_bias_init, r_bias)

    w_total = wind_at(wind, truth.p) + ou_process(
        n, dt, wind.turbulence_intensity, wind.turbulence_tau, r_wind
    )
    R, omega, f_mag = drag_attitude(truth, w_total, whiskers.rotor_drag, whiskers.drag_tau)

    RT = np.transpose(R, (0, 2, 1))
    specific = np.einsum("nij,nj->ni", RT, truth.a - GRAVITY)
    acc = specific + ba + noise.accel_noise * np.sqrt(truth.rate) * r_imu.standard_normal((n, 3))
    gyro = omega + bg + noise.gyro_noise * np.sqrt(truth.rate) * r_imu.standard_normal((n, 3))
    airflow = np.einsum("nij,nj->ni", RT, w_total - truth.v)

    g0 = np.linalg.norm(GRAVITY)
    u_actual = whiskers.hover_throttle + whiskers.thrust_gain * (f_mag - g0)
    f_cmd = f_mag + whiskers.motor_tau * np.gradient(f_mag, dt) if n > 1 else f_mag
    u_cmd = whiskers.hover_throttle + whiskers.thrust_gain * (f_cmd - g0)
    effort = ou_process(n, dt, whiskers.differential_std, whiskers.differential_tau, r_thr)
    diff_cmd = effort @ MIXER.T
    diff_actual = _first_order_lag(diff_cmd, dt, whiskers.motor_tau)
    motors = np.clip(u_actual[:, None] + diff_actual, 0.0, 1.0)
    scale = 1.0 + whiskers.throttle_scale_std * r_thr.standard_normal()
    throttle = np.clip(
        scale * (u_cmd[:, None] + diff_cmd) + noise.throttle_noise * r_thr.standard_normal((n, N_MOTORS)), 0.0, 1.0
    )

    angles = whiskers.deflection(airflow, motors)
    angles = angles + noise.whisker_noise * r_whisk.standard_normal(angles.shape)

    flagged = False
    if failure_time is None:
        avail = np.ones(n, dtype=bool)
    else:
        flagged = bool(failure_time > truth.t[-1])
        avail = truth.t < failure_time
    odom_p = truth.p + noise.odom_pos_std * r_odom.standard_normal((n, 3))
    odom_v = truth.v + noise.odom_vel_std * r_odom.standard_normal((n, 3))
    dphi = noise.odom_att_std * r_odom.standard_normal((n, 3))
    odom_R = np.array([exp_so3(d) @ Ri for d, Ri in zip(dphi, R)])
    odom_p[~avail] = np.nan
    odom_v[~avail] = np.nan
    odom_R[~avail] = np.nan

    meta = {
        "rate": float(truth.rate),
        "failure_time": None if failure_time is None else float(failure_time),
        "failure_flagged": flagged,
    }
    return SensorLog(
        t=truth.t.copy(),
        acc=acc,
        gyro=gyro,
        whisker=angles,
        throttle=throttle,
        odom_p=odom_p,
        odom_v=odom_v,
        odom_R=odom_R,
        odom_available=avail,
        gt_p=truth.p.copy(),
        gt_v=truth.v.copy(),
        gt_R=R.copy(),
        gt_wind=w_total,
        gt_ba=ba,
        gt_bg=bg,
        meta=meta,
    )


def simulate(traj: TrajectorySpec, wind: WindFieldSpec, noise: SensorNoiseSpec,
             whiskers: WhiskerModel | None = None, failure_time=None, seed=0) -> SensorLog:
    """Trajectory generation and sensor synthesis from one seed."""
    s_traj, s_sens = np.random.SeedSequence(seed).spawn(2)
    truth = generate_trajectory(traj, seed=s_traj)
    return synthesize_sensors(truth, wind, noise, whiskers, failure_time, seed=s_sens)


__all__ = [
    "GRAVITY",
    "Jet",
    "SensorLog",
    "SensorNoiseSpec",
    "TrajectorySpec",
    "Truth",
    "WhiskerModel",
    "WindFieldSpec",
    "generate_trajectory",
    "ou_process",
    "simulate",
    "synthesize_sensors",
    "wind_at",
    "wind_jacobian",
]
