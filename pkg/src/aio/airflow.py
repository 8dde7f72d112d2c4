"""Relative-airflow regression from whisker, IMU and throttle signals.

A two-layer LSTM (16 units per layer) reads a window of five 50 Hz samples and
a linear head maps the last hidden state to the body-frame relative airflow.
Forward pass, backpropagation through time and ADAM are written out in numpy.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from aio.sim import N_MOTORS, N_WHISKERS

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
SEQ_LEN = 5
HIDDEN = 16
INPUT_RATE = 50.0
OUTPUT_RATE = 25.0

FEATURE_NAMES = (
    [f"whisker{i + 1}_{ax}" for i in range(N_WHISKERS) for ax in ("x", "y")]
    + ["gyro_x", "gyro_y", "gyro_z", "acc_x", "acc_y", "acc_z"]
    + [f"throttle{i + 1}" for i in range(N_MOTORS)]
)
N_FEATURES = len(FEATURE_NAMES)

FEATURE_GROUPS = {
    "airflow": list(range(0, 8)),
    "gyro": list(range(8, 11)),
    "acc": list(range(11, 14)),
    "throttle": list(range(14, 20)),
}

PARAM_NAMES = ("Wx1", "Wh1", "b1", "Wx2", "Wh2", "b2", "Wo", "bo")


def feature_mask(*groups):
    """Boolean mask over the 20 input features selecting the named groups."""
    mask = np.zeros(N_FEATURES, dtype=bool)
    for g in groups:
        mask[FEATURE_GROUPS[g]] = True
    return mask


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_params(n_in, hidden=HIDDEN, n_out=3, rng=None):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget-gate bias +1."""
    rng = rng if rng is not None else np.random.default_rng(0)
    H = hidden

    def U(shape, fan_in):
        k = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-k, k, shape)

    params = {
        "Wx1": U((n_in, 4 * H), n_in + H),
        "Wh1": U((H, 4 * H), n_in + H),
        "b1": np.zeros(4 * H),
        "Wx2": U((H, 4 * H), 2 * H),
        "Wh2": U((H, 4 * H), 2 * H),
        "b2": np.zeros(4 * H),
        "Wo": U((H, n_out), H),
        "bo": np.zeros(n_out),
    }
    params["b1"][H : 2 * H] = 1.0
    params["b2"][H : 2 * H] = 1.0
    return params


def _layer_forward(X, Wx, Wh, b):
    """One LSTM layer over X (B, T, D). Returns hidden states and a cache."""
    B, T, _ = X.shape
    H = Wh.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    cache = []
    for t in range(T):
        z = X[:, t] @ Wx + h @ Wh + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h_prev = h
        h = o * tc
        hs[:, t] = h
        cache.append((h_prev, c_prev, i, f, g, o, tc))
    return hs, cache


def _layer_backward(dhs, X, Wx, Wh, cache):
    """BPTT through one layer given dL/dh_t for every step."""
    B, T, _ = X.shape
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dX = np.empty_like(X)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dz = np.empty((B, 4 * H))
    for t in reversed(range(T)):
        h_prev, c_prev, i, f, g, o, tc = cache[t]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc**2)
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g**2)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dWx += X[:, t].T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dX[:, t] = dz @ Wx.T
        dh_next = dz @ Wh.T
        dc_next = dc * f
    return dX, dWx, dWh, db


def network_forward(params, X):
    """Raw network on normalized windows X (B, T, D) -> (B, 3) and cache."""
    h1, cache1 = _layer_forward(X, params["Wx1"], params["Wh1"], params["b1"])
    h2, cache2 = _layer_forward(h1, params["Wx2"], params["Wh2"], params["b2"])
    y = h2[:, -1] @ params["Wo"] + params["bo"]
    return y, (X, h1, cache1, h2, cache2)


def network_backward(params, dy, cache):
    X, h1, cache1, h2, cache2 = cache
    grads = {"Wo": h2[:, -1].T @ dy, "bo": dy.sum(axis=0)}
    dh2 = np.zeros_like(h2)
    dh2[:, -1] = dy @ params["Wo"].T
    dh1, grads["Wx2"], grads["Wh2"], grads["b2"] = _layer_backward(
        dh2, h1, params["Wx2"], params["Wh2"], cache2
    )
    _, grads["Wx1"], grads["Wh1"], grads["b1"] = _layer_backward(
        dh1, X, params["Wx1"], params["Wh1"], cache1
    )
    return grads


def mse_loss_and_grad(params, X, Y):
    """Mean over samples and outputs of the squared error, with its gradient."""
    pred, cache = network_forward(params, X)
    err = pred - Y
    loss = float(np.mean(err**2))
    dy = 2.0 * err / err.size
    return loss, network_backward(params, dy, cache)


@dataclass
class LstmRegressor:
    """Trained airflow regressor including its input normalisation."""

    params: dict
    mean: np.ndarray
    std: np.ndarray
    mask: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES, dtype=bool))
    seq_len: int = SEQ_LEN

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mask.shape != (N_FEATURES,):
            raise ValueError("feature mask must have 20 entries")
        if np.any(self.std <= 0):
            raise ValueError("normalisation stds must be > 0")
        n_in = int(self.mask.sum())
        if self.params["Wx1"].shape[0] != n_in:
            raise ValueError("first-layer input size does not match the feature mask")

    @property
    def hidden(self):
        return self.params["Wh1"].shape[0]

    def normalize(self, windows):
        return (windows[..., self.mask] - self.mean) / self.std

    def predict(self, windows):
        """Predict airflow for raw windows of shape (B, 5, 20) or (5, 20)."""
        windows = np.asarray(windows, dtype=float)
        single = windows.ndim == 2
        W = windows[None] if single else windows
        if W.shape[1:] != (self.seq_len, N_FEATURES):
            raise ValueError(
                f"expected windows of shape (*, {self.seq_len}, {N_FEATURES}), got {windows.shape}"
            )
        y, _ = network_forward(self.params, self.normalize(W))
        return y[0] if single else y

    def to_dict(self):
        return {
            "format": "aio-lstm",
            "format_version": MODEL_FORMAT_VERSION,
            "seq_len": self.seq_len,
            "hidden": self.hidden,
            "feature_names": FEATURE_NAMES,
            "mask": self.mask.astype(int).tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "params": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        return cls(params=params, mean=d["mean"], std=d["std"], mask=d["mask"], seq_len=d["seq_len"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class AirflowMeasurement:
    t: float
    value: np.ndarray
    cov: np.ndarray


# ---------------------------------------------------------------------------
# dataset construction


def log_features(log, ba=None, bg=None):
    """Per-row 20-dim feature matrix. IMU channels are de-biased with ``ba``/``bg``
    (arrays broadcastable to (N, 3)); by default the logged true biases."""
    ba = log.gt_ba if ba is None else ba
    bg = log.gt_bg if bg is None else bg
    return np.column_stack([log.whisker, log.gyro - bg, log.acc - ba, log.throttle])


def make_windows(features, targets, stride, seq_len=SEQ_LEN):
    """Stride-1 windows over the ``stride``-decimated stream.

    Returns ``(X, Y, rows)`` with X (B, seq_len, 20), Y (B, 3) and the index of
    the last row of every window.
    """
    idx = np.arange(0, features.shape[0], stride)
    if idx.size < seq_len:
        return np.empty((0, seq_len, features.shape[1])), np.empty((0, 3)), np.empty(0, int)
    sub = features[idx]
    n = idx.size - seq_len + 1
    X = np.stack([sub[k : k + n] for k in range(seq_len)], axis=1)
    rows = idx[seq_len - 1 :]
    return X, targets[rows], rows


def training_windows(logs, val_fraction=0.2, input_rate=INPUT_RATE):
    """Build train/validation windows; validation is the tail of every log.

    The target is minus the body-frame ground-truth velocity, i.e. the
    relative airflow under the zero-wind assumption.
    """
    Xtr, Ytr, Xva, Yva = [], [], [], []
    for lg in logs:
        stride = int(round(lg.rate / input_rate))
        target = -np.einsum("nji,nj->ni", lg.gt_R, lg.gt_v)
        X, Y, _ = make_windows(log_features(lg), target, stride)
        n_val = int(round(val_fraction * X.shape[0]))
        Xtr.append(X[: X.shape[0] - n_val])
        Ytr.append(Y[: X.shape[0] - n_val])
        Xva.append(X[X.shape[0] - n_val :])
        Yva.append(Y[X.shape[0] - n_val :])
    return np.concatenate(Xtr), np.concatenate(Ytr), np.concatenate(Xva), np.concatenate(Yva)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingConfig:
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    val_fraction: float = 0.2
    features: list = field(default_factory=lambda: ["airflow", "gyro", "acc", "throttle"])
    lr_decay: float = 0.92
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be > 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must lie in (0, 1)")
        unknown = set(self.features) - set(FEATURE_GROUPS)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")

    @property
    def mask(self):
        return feature_mask(*self.features)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainingResult:
    model: LstmRegressor
    train_loss: list
    val_loss: list
    diverged: bool = False


class _Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


def fit_windows(Xtr, Ytr, Xva, Yva, config: TrainingConfig) -> TrainingResult:
    """Train on pre-built raw windows."""
    if Xtr.shape[0] == 0:
        raise ValueError("empty training set")
    mask = config.mask
    rng = np.random.default_rng(config.seed)
    flat = Xtr[..., mask].reshape(-1, int(mask.sum()))
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < 1e-9] = 1.0
    model = LstmRegressor(
        params=init_params(int(mask.sum()), rng=rng), mean=mean, std=std, mask=mask
    )
    Ntr = model.normalize(Xtr)
    Nva = model.normalize(Xva) if Xva.shape[0] else None
    opt = _Adam(model.params, config)
    train_hist, val_hist = [], []
    last_good = {k: v.copy() for k, v in model.params.items()}
    diverged = False
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(Ntr.shape[0])
        total, count = 0.0, 0
        for s in range(0, order.size, config.batch_size):
            b = order[s : s + config.batch_size]
            loss, grads = mse_loss_and_grad(model.params, Ntr[b], Ytr[b])
            if not np.isfinite(loss):
                diverged = True
                break
            opt.step(model.params, grads, lr)
            total += loss * b.size
            count += b.size
        if diverged or not all(np.all(np.isfinite(v)) for v in model.params.values()):
            diverged = True
            logger.warning("training diverged in epoch %d; restoring last finite weights", epoch)
            model.params = last_good
            break
        last_good = {k: v.copy() for k, v in model.params.items()}
        train_hist.append(total / count)
        if Nva is not None:
            pred, _ = network_forward(model.params, Nva)
            val_hist.append(float(np.mean((pred - Yva) ** 2)))
        lr *= config.lr_decay
        logger.debug("epoch %d train %.5f val %s", epoch, train_hist[-1], val_hist[-1:] or "-")
    return TrainingResult(model=model, train_loss=train_hist, val_loss=val_hist, diverged=diverged)


def lstm_train(logs, config: TrainingConfig) -> TrainingResult:
    """Train the regressor on zero-wind sensor logs."""
    if not logs:
        raise ValueError("empty dataset")
    Xtr, Ytr, Xva, Yva = training_windows(logs, config.val_fraction)
    return fit_windows(Xtr, Ytr, Xva, Yva, config)


def identify_covariance(model, X, Y, floor=1e-6):
    """Empirical covariance of held-out residuals, made positive definite."""
    resid = model.predict(X) - Y
    cov = np.atleast_2d(np.cov(resid, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    return (V * np.maximum(w, floor)) @ V.T


# ---------------------------------------------------------------------------
# streaming inference


class AirflowEstimator:
    """Rolling-buffer inference: push 50 Hz feature rows, get 25 Hz estimates."""

    def __init__(self, model: LstmRegressor, cov, input_rate=INPUT_RATE, output_rate=OUTPUT_RATE):
        cov = np.asarray(cov, dtype=float)
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("airflow covariance must be symmetric positive definite")
        ratio = input_rate / output_rate
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("input rate must be an integer multiple of the output rate")
        self.model = model
        self.cov = cov
        self.decimation = int(round(ratio))
        self._buf = np.zeros((model.seq_len, N_FEATURES))
        self._count = 0

    def push(self, t, features):
        """Add one input sample; returns an AirflowMeasurement when one is due."""
        self._buf = np.roll(self._buf, -1, axis=0)
        self._buf[-1] = features
        self._count += 1
        n = self.model.seq_len
        if self._count < n or (self._count - n) % self.decimation:
            return None
        return AirflowMeasurement(t=t, value=self.model.predict(self._buf), cov=self.cov)


def estimate_airflow(model, cov, log, ba=None, bg=None):
    """Run the streaming estimator over a whole log (offline helper)."""
    stride = int(round(log.rate / INPUT_RATE))
    feats = log_features(log, ba, bg)
    est = AirflowEstimator(model, cov)
    out = []
    for k in range(0, len(log), stride):
        m = est.push(log.t[k], feats[k])
        if m is not None:
            out.append(m)
    return out
