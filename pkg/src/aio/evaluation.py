"""Dead-reckoning error metrics and the randomized failure-injection protocol."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from aio.geom import euler_zyx, wrap_angle

logger = logging.getLogger(__name__)

METRIC_NAMES = ("rmse", "rmse_yaw", "dr", "rte_2s")
RESULT_COLUMNS = ("run", "mode", "failure_t") + METRIC_NAMES
GIMBAL_MARGIN = 1e-6


def _aligned(est, gt):
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"sequences not aligned: {est.shape} vs {gt.shape}")
    if est.shape[0] == 0:
        raise ValueError("empty input")
    return est, gt


def rmse(est, gt):
    """Root of the mean squared Euclidean position error."""
    est, gt = _aligned(est, gt)
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


def yaw_errors(est_R, gt_R):
    """Wrapped ZYX yaw differences and a mask of usable (non gimbal-locked) samples."""
    est_R, gt_R = _aligned(est_R, gt_R)
    ye, pe, _ = euler_zyx(est_R)
    yg, pg, _ = euler_zyx(gt_R)
    limit = np.pi / 2 - GIMBAL_MARGIN
    ok = (np.abs(pe) <= limit) & (np.abs(pg) <= limit)
    return wrap_angle(ye - yg), ok


def yaw_rmse(est_R, gt_R):
    err, ok = yaw_errors(est_R, gt_R)
    if not np.any(ok):
        raise ValueError("all samples are gimbal-locked")
    if not np.all(ok):
        logger.warning("excluded %d gimbal-locked samples from RMSE-yaw", int((~ok).sum()))
    return float(np.sqrt(np.mean(err[ok] ** 2)))


def path_length(p):
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def drift(est, gt):
    """Final position error divided by the ground-truth path length.

    Returns NaN (with a warning) when the ground truth does not move.
    """
    est, gt = _aligned(est, gt)
    if est.shape[0] < 2:
        raise ValueError("drift needs at least two samples")
    length = path_length(gt)
    if length == 0:
        logger.warning("zero ground-truth path length; drift undefined")
        return float("nan")
    return float(np.linalg.norm(est[-1] - gt[-1]) / length)


def rte(est_p, gt_p, est_R, gt_R, window):
    """Relative translation error over ``window`` samples with yaw-drift compensation."""
    est_p, gt_p = _aligned(est_p, gt_p)
    n = est_p.shape[0]
    if window < 1 or n <= window:
        raise ValueError(f"sequence of {n} samples is shorter than the {window}-sample window")
    ye, _, _ = euler_zyx(np.asarray(est_R)[: n - window])
    yg, _, _ = euler_zyx(np.asarray(gt_R)[: n - window])
    d_gt = gt_p[window:] - gt_p[:-window]
    d_est = est_p[window:] - est_p[:-window]
    # R_yaw(gt) R_yaw(est)^T is a rotation about z by the yaw difference
    rel = yg - ye
    c, s = np.cos(rel), np.sin(rel)
    comp = np.column_stack([c * d_est[:, 0] - s * d_est[:, 1], s * d_est[:, 0] + c * d_est[:, 1], d_est[:, 2]])
    return float(np.sqrt(np.mean(np.sum((d_gt - comp) ** 2, axis=1))))


def rte_2s(est_p, gt_p, est_R, gt_R, rate, window_s=2.0):
    return rte(est_p, gt_p, est_R, gt_R, int(np.floor(window_s * rate + 1e-9)))


@dataclass
class Metrics:
    rmse: float
    rmse_yaw: float
    dr: float
    rte_2s: float

    def as_dict(self):
        return dataclasses.asdict(self)


def compute_metrics(est_p, est_R, gt_p, gt_R, rate):
    return Metrics(
        rmse=rmse(est_p, gt_p),
        rmse_yaw=yaw_rmse(est_R, gt_R),
        dr=drift(est_p, gt_p),
        rte_2s=rte_2s(est_p, gt_p, est_R, gt_R, rate),
    )


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentSpec:
    """Randomized failure injection: the failure instant is drawn uniformly in
    ``[failure_start, failure_start + failure_width)`` for every repetition and
    metrics are computed from the failure to ``horizon`` seconds (or the end)."""

    dataset: str = "eval"
    modes: list = field(default_factory=lambda: ["imu-only", "aio-no-map"])
    repetitions: int = 10
    failure_start: float = 20.0
    failure_width: float = 2.0
    horizon: float | None = 30.0
    seed: int | None = 0

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.failure_width < 0 or self.failure_start < 0:
            raise ValueError("failure window must be non-negative")
        if self.horizon is not None and self.horizon <= self.failure_start + self.failure_width:
            raise ValueError("evaluation horizon must end after the failure window")

    def failure_times(self):
        if self.seed is None:
            raise ValueError("experiment seed not set")
        rng = np.random.default_rng(self.seed)
        return self.failure_start + self.failure_width * rng.random(self.repetitions)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ExperimentResult:
    rows: list
    aggregate: dict
    plot_data: dict

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for r in self.rows:
                w.writerow([r["run"], r["mode"], "%.12g" % r["failure_t"]]
                           + ["%.12g" % r[m] for m in METRIC_NAMES])

    def write_aggregate(self, path):
        with open(path, "w") as fh:
            json.dump(self.aggregate, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_plot_data(self, path):
        with open(path, "w") as fh:
            json.dump(self.plot_data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def median(self, mode, metric):
        return self.aggregate["modes"][mode][metric]["median"]


def summarize(values):
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"median": None, "q1": None, "q3": None, "min": None, "max": None, "n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}


def run_experiment(spec: ExperimentSpec, log, runner) -> ExperimentResult:
    """Replay every mode on the same log for each randomized failure time.

    ``runner(log_with_failure, mode, run)`` returns an object with ``p`` (N, 3) and
    ``R`` (N, 3, 3) estimates aligned with the log rows. A runner exception
    marks that run as failed; aggregates use the successful runs only.
    """
    end_idx = len(log) if spec.horizon is None else int(np.searchsorted(log.t, spec.horizon, side="right"))
    if spec.failure_start + spec.failure_width > log.t[-1]:
        raise ValueError("failure window extends beyond the log")
    rows = []
    errors = []
    for run, ft in enumerate(spec.failure_times()):
        lg = log.with_failure(ft)
        k0 = lg.failure_index()
        for mode in spec.modes:
            try:
                est = runner(lg, mode, run)
                m = compute_metrics(est.p[k0:end_idx], est.R[k0:end_idx], lg.gt_p[k0:end_idx],
                                    lg.gt_R[k0:end_idx], lg.rate)
                vals = m.as_dict()
            except Exception as exc:  # recorded per run, aggregation continues
                logger.error("run %d mode %s failed: %s", run, mode, exc)
                errors.append({"run": run, "mode": mode, "error": str(exc)})
                vals = {k: float("nan") for k in METRIC_NAMES}
            rows.append({"run": run, "mode": mode, "failure_t": float(ft), **vals})
    agg = {"dataset": spec.dataset, "repetitions": spec.repetitions, "errors": errors, "modes": {}}
    plot = {"dataset": spec.dataset, "metrics": {}}
    for mode in spec.modes:
        sel = [r for r in rows if r["mode"] == mode]
        agg["modes"][mode] = {m: summarize([r[m] for r in sel]) for m in METRIC_NAMES}
        agg["modes"][mode]["successes"] = int(sum(bool(np.isfinite(r["rmse"])) for r in sel))
    for m in METRIC_NAMES:
        plot["metrics"][m] = {mode: [r[m] if np.isfinite(r[m]) else None for r in rows if r["mode"] == mode]
                              for mode in spec.modes}
    return ExperimentResult(rows=rows, aggregate=agg, plot_data=plot)
