"""``aio`` command line: simulate, train, map, replay and score.

Every stage reads the pipeline configuration (JSON), derives its random
seeds from the root seed, writes its artifacts below ``--out`` and records a
manifest with the exact configuration and the SHA-256 of every input and
output.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import zlib
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from aio import __version__
from aio.airflow import (
    LstmRegressor,
    TrainingConfig,
    identify_covariance,
    lstm_train,
    training_windows,
)
from aio.ekf import MODES, FilterConfig, LstmAirflowSource, estimate_wind, run_filter
from aio.evaluation import ExperimentSpec, run_experiment
from aio.presets import PRESETS, preset
from aio.sim import SensorLog, SensorNoiseSpec, TrajectorySpec, WhiskerModel, WindFieldSpec, simulate
from aio.windmap import KernelParams, WindDataset, WindMap, fit_sparse

logger = logging.getLogger("aio")

CONFIG_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1
STAGES = ("simulate", "train-airflow", "estimate-wind", "fit-map", "run-filter", "evaluate")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def derive_seed(root, *keys):
    """Deterministic 32-bit seed for a named consumer of randomness."""
    words = [int(root)] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    try:
        return cls.from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def validate_config(cfg):
    """Check every sub-configuration; returns the parsed pieces."""
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    if cfg.get("format_version") != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"format_version must be {CONFIG_FORMAT_VERSION}")
    for key in ("seed", "noise", "whiskers", "filter", "training", "evaluations"):
        if key not in cfg:
            raise ConfigError(f"missing required key {key!r}")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = SimpleNamespace(
        noise=_build(SensorNoiseSpec, cfg["noise"], "noise"),
        whiskers=_build(WhiskerModel, cfg["whiskers"], "whiskers"),
        filter=_build(FilterConfig, cfg["filter"], "filter"),
    )
    tr = cfg["training"]
    flights = tr.get("flights") if isinstance(tr, dict) else None
    if not flights:
        raise ConfigError("training.flights must list at least one trajectory")
    out.flights = [_build(TrajectorySpec, f, f"training.flights[{i}]") for i, f in enumerate(flights)]
    out.training = _build(TrainingConfig, tr.get("config", {}), "training.config")
    out.mapping = None
    if cfg.get("mapping") is not None:
        m = cfg["mapping"]
        out.mapping = SimpleNamespace(
            trajectory=_build(TrajectorySpec, m.get("trajectory"), "mapping.trajectory"),
            wind=_build(WindFieldSpec, m.get("wind"), "mapping.wind"),
            burn_in=float(m.get("burn_in", 10.0)),
            sample_rate=float(m.get("sample_rate", 1.0)),
            fit=dict(m.get("fit", {})),
        )
        unknown = set(out.mapping.fit) - {"M", "optimize", "optimize_inducing", "maxiter", "params", "grid"}
        if unknown:
            raise ConfigError(f"mapping.fit: unknown keys {sorted(unknown)}")
    out.evaluations = []
    ids = set()
    for i, ev in enumerate(cfg["evaluations"]):
        where = f"evaluations[{i}]"
        if not isinstance(ev, dict) or "id" not in ev:
            raise ConfigError(f"{where}: needs an id")
        if ev["id"] in ids or not str(ev["id"]).replace("-", "").replace("_", "").isalnum():
            raise ConfigError(f"{where}: id {ev['id']!r} is duplicated or not a plain name")
        ids.add(ev["id"])
        exp = _build(ExperimentSpec, ev.get("experiment", {}), f"{where}.experiment")
        for mode in exp.modes:
            if mode not in MODES:
                raise ConfigError(f"{where}: unknown mode {mode!r}")
        if "aio-with-map" in exp.modes and out.mapping is None:
            raise ConfigError(f"{where}: mode 'aio-with-map' needs a mapping section")
        if exp.seed is None:
            exp.seed = derive_seed(cfg["seed"], "failures", ev["id"])
        out.evaluations.append(SimpleNamespace(
            id=ev["id"],
            trajectory=_build(TrajectorySpec, ev.get("trajectory"), f"{where}.trajectory"),
            wind=_build(WindFieldSpec, ev.get("wind", {}), f"{where}.wind"),
            experiment=exp,
        ))
    if not out.evaluations:
        raise ConfigError("evaluations must not be empty")
    return out


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if seed is not None:
        cfg["seed"] = seed
    return cfg


# ---------------------------------------------------------------------------
# artifacts


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Paths and bookkeeping for one output directory."""

    def __init__(self, out, cfg):
        self.out = Path(out)
        self.cfg = cfg
        self.spec = validate_config(cfg)
        self.seed = cfg["seed"]

    def path(self, *parts):
        return self.out.joinpath(*parts)

    def rel(self, p):
        return Path(p).relative_to(self.out).as_posix()

    def require(self, path, stage):
        if not Path(path).exists():
            raise DependencyError(
                f"missing {self.rel(path)}; it is produced by the '{stage}' stage "
                f"(run `aio {stage} --config ... --out {self.out}` first)"
            )
        return path

    def manifest(self, stage, inputs, outputs, extra=None):
        d = self.path("manifests")
        d.mkdir(parents=True, exist_ok=True)
        doc = {
            "format_version": MANIFEST_FORMAT_VERSION,
            "package_version": __version__,
            "stage": stage,
            "root_seed": self.seed,
            "config": self.cfg,
            "inputs": {self.rel(p): sha256(p) for p in inputs},
            "outputs": {self.rel(p): sha256(p) for p in outputs},
        }
        if extra:
            doc.update(extra)
        _dump_json(doc, d / f"{stage}.json")

    # artifact locations
    def train_log(self, i):
        return self.path("logs", f"train_{i:02d}.csv")

    def eval_log(self, ev_id):
        return self.path("logs", f"eval_{ev_id}.csv")

    @property
    def mapping_log(self):
        return self.path("logs", "mapping.csv")

    @property
    def model_file(self):
        return self.path("model", "airflow_lstm.json")

    @property
    def cov_file(self):
        return self.path("model", "airflow_cov.json")

    @property
    def wind_csv(self):
        return self.path("wind", "estimates.csv")

    @property
    def map_file(self):
        return self.path("wind", "map.json")

    def trajectory_file(self, ev_id, mode):
        return self.path("trajectories", ev_id, f"{mode}.npy")

    def load_airflow(self):
        model = LstmRegressor.load(self.require(self.model_file, "train-airflow"))
        with open(self.require(self.cov_file, "train-airflow")) as fh:
            cov = np.asarray(json.load(fh)["cov"], dtype=float)
        return model, cov


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(run: Run):
    s = run.spec
    run.path("logs").mkdir(parents=True, exist_ok=True)
    jobs = [(run.train_log(i), f, WindFieldSpec(), ("train", i)) for i, f in enumerate(s.flights)]
    if s.mapping is not None:
        jobs.append((run.mapping_log, s.mapping.trajectory, s.mapping.wind, ("mapping",)))
    jobs += [(run.eval_log(ev.id), ev.trajectory, ev.wind, ("eval", ev.id)) for ev in s.evaluations]
    outputs = []
    for path, traj, wind, key in jobs:
        try:
            log = simulate(traj, wind, s.noise, s.whiskers, seed=derive_seed(run.seed, "simulate", *key))
        except ValueError as exc:
            raise ConfigError(f"{'/'.join(map(str, key))}: {exc}") from exc
        log.to_csv(path)
        outputs.append(path)
        logger.info("wrote %s (%d rows)", run.rel(path), len(log))
    run.manifest("simulate", [], outputs)


def cmd_train_airflow(run: Run):
    s = run.spec
    logs = [SensorLog.from_csv(run.require(run.train_log(i), "simulate")) for i in range(len(s.flights))]
    cfg = copy.deepcopy(s.training)
    cfg.seed = derive_seed(run.seed, "train-airflow")
    result = lstm_train(logs, cfg)
    if result.diverged:
        raise RuntimeError("LSTM training diverged (non-finite loss)")
    _, _, Xva, Yva = training_windows(logs, cfg.val_fraction)
    cov = identify_covariance(result.model, Xva, Yva)
    run.path("model").mkdir(parents=True, exist_ok=True)
    result.model.save(run.model_file)
    _dump_json({"format_version": 1, "cov": cov.tolist()}, run.cov_file)
    curve = run.path("model", "training_curve.csv")
    with open(curve, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e, (a, b) in enumerate(zip(result.train_loss, result.val_loss)):
            fh.write(f"{e + 1},{a:.12g},{b:.12g}\n")
    logger.info("validation MSE %.3e after %d epochs", result.val_loss[-1], len(result.val_loss))
    run.manifest("train-airflow", [run.train_log(i) for i in range(len(logs))],
                 [run.model_file, run.cov_file, curve])


def _skip(run, stage, why):
    logger.info("%s: skipped (%s)", stage, why)
    run.manifest(stage, [], [], {"skipped": why})


def cmd_estimate_wind(run: Run):
    s = run.spec
    if s.mapping is None:
        return _skip(run, "estimate-wind", "no mapping section in the configuration")
    model, cov = run.load_airflow()
    log = SensorLog.from_csv(run.require(run.mapping_log, "simulate"))
    try:
        t, p, w = estimate_wind(log, LstmAirflowSource(model, cov, s.filter.airflow_cov_scale), s.filter,
                                burn_in=s.mapping.burn_in, sample_rate=s.mapping.sample_rate)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run.path("wind").mkdir(parents=True, exist_ok=True)
    with open(run.wind_csv, "w") as fh:
        fh.write("# aio-wind-estimates format_version=1\n")
        fh.write("t,p_x,p_y,p_z,w_x,w_y,w_z\n")
        for row in np.column_stack([t, p, w]):
            fh.write(",".join("%.17g" % x for x in row) + "\n")
    logger.info("wrote %d wind samples", len(t))
    run.manifest("estimate-wind", [run.mapping_log, run.model_file, run.cov_file], [run.wind_csv])


def _map_grid(dataset, shape):
    lo, hi = dataset.positions.min(axis=0), dataset.positions.max(axis=0)
    axes = [np.linspace(a, b, n) if n > 1 else np.array([(a + b) / 2]) for a, b, n in zip(lo, hi, shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def cmd_fit_map(run: Run):
    s = run.spec
    if s.mapping is None:
        return _skip(run, "fit-map", "no mapping section in the configuration")
    ds = WindDataset.from_csv(run.require(run.wind_csv, "estimate-wind"))
    fit = dict(s.mapping.fit)
    grid_shape = fit.pop("grid", [11, 11, 3])
    params = fit.pop("params", None)
    if params is not None:
        params = [KernelParams(**p) for p in params] if isinstance(params, list) else KernelParams(**params)
    wmap = fit_sparse(ds, params=params, seed=derive_seed(run.seed, "fit-map"), **fit)
    wmap.save(run.map_file)
    grid = _map_grid(ds, grid_shape)
    mean, var = wmap.query_many(grid)
    grid_csv = run.path("wind", "map_grid.csv")
    with open(grid_csv, "w") as fh:
        fh.write("x,y,z,w_x,w_y,w_z,var_x,var_y,var_z\n")
        for row in np.column_stack([grid, mean, var]):
            fh.write(",".join("%.12g" % x for x in row) + "\n")
    run.manifest("fit-map", [run.wind_csv], [run.map_file, grid_csv])


def _filter_runner(run: Run, modes):
    s = run.spec
    airflow = wmap = None
    inputs = []
    if any(m != "imu-only" for m in modes):
        model, cov = run.load_airflow()
        airflow = LstmAirflowSource(model, cov, s.filter.airflow_cov_scale)
        inputs += [run.model_file, run.cov_file]
    if "aio-with-map" in modes:
        wmap = WindMap.load(run.require(run.map_file, "fit-map"))
        inputs.append(run.map_file)

    def runner(log, mode, _run=None):
        return run_filter(log, mode, s.filter, airflow=airflow, wind_map=wmap)

    return runner, inputs


def cmd_run_filter(run: Run):
    """Replay every evaluation log for each mode and randomized failure time."""
    s = run.spec
    all_modes = sorted({m for ev in s.evaluations for m in ev.experiment.modes})
    runner, inputs = _filter_runner(run, all_modes)
    outputs = []
    for ev in s.evaluations:
        log = SensorLog.from_csv(run.require(run.eval_log(ev.id), "simulate"))
        inputs.append(run.eval_log(ev.id))
        run.path("trajectories", ev.id).mkdir(parents=True, exist_ok=True)
        times = ev.experiment.failure_times()
        for mode in ev.experiment.modes:
            stack = np.full((len(times), len(log), 12), np.nan)
            for r, ft in enumerate(times):
                try:
                    out = runner(log.with_failure(ft), mode)
                except Exception as exc:  # recorded as a failed run, scored as NaN
                    logger.error("%s/%s run %d failed: %s", ev.id, mode, r, exc)
                    continue
                stack[r] = np.column_stack([out.p, out.R.reshape(-1, 9)])
                if r == 0:
                    csv_path = run.path("trajectories", ev.id, f"{mode}_run00.csv")
                    out.to_csv(csv_path)
                    outputs.append(csv_path)
            path = run.trajectory_file(ev.id, mode)
            np.save(path, stack)
            outputs.append(path)
            logger.info("%s/%s: %d runs", ev.id, mode, len(times))
    run.manifest("run-filter", inputs, outputs)


def cmd_evaluate(run: Run):
    s = run.spec
    run.path("results").mkdir(parents=True, exist_ok=True)
    inputs, outputs, summary = [], [], {}
    for ev in s.evaluations:
        stacks = {m: np.load(run.require(run.trajectory_file(ev.id, m), "run-filter")) for m in ev.experiment.modes}
        log = SensorLog.from_csv(run.require(run.eval_log(ev.id), "simulate"))
        inputs += [run.eval_log(ev.id)] + [run.trajectory_file(ev.id, m) for m in ev.experiment.modes]
        for m, st in stacks.items():
            if st.shape[:2] != (ev.experiment.repetitions, len(log)):
                raise DependencyError(
                    f"{run.rel(run.trajectory_file(ev.id, m))} does not match the configuration; "
                    "rerun the 'run-filter' stage"
                )

        def stored(lg, mode, r, stacks=stacks):
            a = stacks[mode][r]
            if not np.all(np.isfinite(a)):
                raise RuntimeError("no filter output stored for this run")
            return SimpleNamespace(p=a[:, :3], R=a[:, 3:].reshape(-1, 3, 3))

        res = run_experiment(ev.experiment, log, stored)
        paths = [run.path("results", f"{ev.id}_{name}") for name in ("results.csv", "aggregate.json", "plot.json")]
        res.write_csv(paths[0])
        res.write_aggregate(paths[1])
        res.write_plot_data(paths[2])
        outputs += paths
        summary[ev.id] = {m: {k: res.aggregate["modes"][m][k]["median"] for k in ("rmse", "rmse_yaw", "dr", "rte_2s")}
                          for m in ev.experiment.modes}
    run.manifest("evaluate", inputs, outputs)
    for ev_id, modes in summary.items():
        for m, vals in modes.items():
            print(f"{ev_id:>10s} {m:>13s}  " + "  ".join(f"{k}={_fmt(v)}" for k, v in vals.items()))


def _fmt(v):
    return "nan" if v is None else f"{v:.4g}"


STAGE_FUNCS = {
    "simulate": cmd_simulate,
    "train-airflow": cmd_train_airflow,
    "estimate-wind": cmd_estimate_wind,
    "fit-map": cmd_fit_map,
    "run-filter": cmd_run_filter,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", metavar="PATH", required=True, help="pipeline configuration (JSON)")
    p.add_argument("--out", metavar="DIR", default="aio-run", help="output directory (default: aio-run)")
    p.add_argument("--seed", metavar="N", type=int, help="root seed, overrides the configuration")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = _Parser(prog="aio", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aio {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "simulate": "synthesize training, mapping and evaluation logs",
        "train-airflow": "train the LSTM airflow regressor and identify its covariance",
        "estimate-wind": "run the filter in mapping mode and sample wind estimates at 1 Hz",
        "fit-map": "fit the sparse GP wind map and export a query grid",
        "run-filter": "replay evaluation logs in every mode with randomized odometry failures",
        "evaluate": "score stored trajectories and aggregate the metrics",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text, description=text))
    p = sub.add_parser("run", help="run all stages in order, or one with --stage",
                       description="run all stages in order, or only the one named by --stage")
    _common(p)
    p.add_argument("--stage", metavar="NAME", choices=STAGES, help=f"one of: {', '.join(STAGES)}")
    p = sub.add_parser("preset", help="write a ready-made configuration", description="write a ready-made configuration")
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--out", metavar="PATH", help="file to write (default: stdout)")
    p.add_argument("--seed", metavar="N", type=int, help="root seed to store in the configuration")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "preset":
            cfg = preset(args.name)
            if args.seed is not None:
                cfg["seed"] = args.seed
            text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        run = Run(args.out, load_config(args.config, args.seed))
        run.out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            stages = [args.stage] if args.stage else list(STAGES)
        else:
            stages = [args.command]
        for stage in stages:
            logger.info("stage %s", stage)
            STAGE_FUNCS[stage](run)
    except ConfigError as exc:
        print(f"aio: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as exc:
        print(f"aio: missing dependency: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"aio: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.debug("stage failed", exc_info=True)
        print(f"aio: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
