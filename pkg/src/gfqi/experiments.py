"""Seeded replication sweeps, CSV results and SVG regret curves.

Every (cell, replication) pair draws its randomness from
``derive_stream(seed, [cell, replication, stage])`` with stages
simulate / select-degree / evaluate, so rows do not depend on the order
or the process in which they are computed. All learners in a pair share
the dataset and the evaluation stream, and the oracle policy is rolled
out on that same stream (common random numbers).
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .core import ConfigurationError, ExperimentConfig, GfqiError, InputError, RngStream, derive_stream
from .envs import SemiSyntheticEnvParams, env_from_dict, simulate
from .evaluation import (
    EvalProtocol,
    GridSpec,
    OracleSolution,
    grid_for_env,
    mc_evaluate,
    oracle_cache_key,
    regret,
    select_degree,
    value_iteration_oracle,
)
from .features import FeatureMap
from .learners import LEARNERS, FitControls, QEstimate, fit

__all__ = [
    "AXES",
    "SCHEMA_VERSION",
    "CSV_COLUMNS",
    "SweepSpec",
    "ResultRow",
    "run_experiment",
    "run_sweep",
    "read_results",
    "plot_results",
    "ResultsParseError",
]

AXES = ("n_clusters", "cluster_size", "horizon", "psi")
SCHEMA_VERSION = 1
STAGE_SIMULATE, STAGE_SELECT, STAGE_EVALUATE = 0, 1, 2

CSV_COLUMNS = (
    "schema", "axis", "axis_value", "cell", "replication", "learner", "seed", "degree",
    "regret_discounted", "regret_average", "value_discounted", "oracle_value_discounted",
    "rho_hat", "iterations", "converged", "beta", "error",
)


class ResultsParseError(GfqiError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SweepSpec:
    """One axis of ``base`` varied over ``values``; everything else fixed.

    ``degrees`` switches on cross-validated degree selection; when it is
    None every fit uses ``base.degree``.
    """

    base: ExperimentConfig
    axis: str
    values: tuple
    learners: tuple = LEARNERS
    replications: int | None = None
    env: dict = field(default_factory=lambda: {"kind": "synthetic"})
    protocol: EvalProtocol = EvalProtocol()
    degrees: tuple | None = None
    grid: GridSpec | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigurationError(f"axis must be one of {AXES}, got {self.axis!r}")
        values = tuple(self.values)
        if not values:
            raise ConfigurationError("sweep needs at least one axis value")
        if len(set(values)) != len(values):
            raise ConfigurationError("axis values must be distinct")
        object.__setattr__(self, "values", values)
        learners = tuple(self.learners)
        bad = [name for name in learners if name not in LEARNERS]
        if bad or not learners or len(set(learners)) != len(learners):
            raise ConfigurationError(f"learners must be distinct names from {LEARNERS}, got {learners}")
        object.__setattr__(self, "learners", learners)
        if self.replications is not None and self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        env = env_from_dict(self.env)  # validates the section
        if self.axis == "psi" and not isinstance(env, SemiSyntheticEnvParams):
            raise ConfigurationError("a psi axis needs the semi_synthetic environment")
        for cfg in self.configs():
            self.environment(cfg)
        if self.degrees is not None:
            object.__setattr__(self, "degrees", tuple(int(g) for g in self.degrees))

    @property
    def n_replications(self) -> int:
        return self.replications if self.replications is not None else self.base.replications

    def configs(self) -> list[ExperimentConfig]:
        out = []
        for v in self.values:
            v = float(v) if self.axis == "psi" else _as_int(v, self.axis)
            out.append(replace(self.base, **{self.axis: v}))
        return out

    def environment(self, config: ExperimentConfig):
        env = env_from_dict(self.env)
        if isinstance(env, SemiSyntheticEnvParams):
            env = replace(env, psi=config.psi)
        return env

    def keys(self):
        for cell in range(len(self.values)):
            for rep in range(self.n_replications):
                for learner in self.learners:
                    yield (cell, rep, learner)

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "SweepSpec":
        """Build from a JSON document with sections env, sweep, learners, eval."""
        unknown = set(d) - {"env", "sweep", "learners", "eval"}
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
        sweep = dict(d.get("sweep", {}))
        base = dict(sweep.pop("base", {}))
        if seed is not None:
            base["seed"] = seed
        axis = sweep.pop("axis", "n_clusters")
        values = sweep.pop("values", None)
        replications = sweep.pop("replications", None)
        if sweep:
            raise ConfigurationError(f"unknown sweep keys {sorted(sweep)}")
        config = ExperimentConfig.from_dict(base)
        if values is None:
            values = [getattr(config, axis)] if axis in AXES else []
        ev = dict(d.get("eval", {}))
        degrees = ev.pop("degrees", None)
        grid = ev.pop("grid", None)
        try:
            protocol = EvalProtocol(**ev)
            grid = None if grid is None else GridSpec(**grid)
        except TypeError as exc:
            raise ConfigurationError(f"bad eval section: {exc}") from None
        return cls(config, axis, tuple(values), tuple(d.get("learners", LEARNERS)), replications,
                   dict(d.get("env", {"kind": "synthetic"})), protocol, degrees, grid)


def _as_int(v, axis):
    if float(v) != int(v):
        raise ConfigurationError(f"{axis} values must be integers, got {v!r}")
    return int(v)


@dataclass
class ResultRow:
    learner: str
    axis: str
    axis_value: float
    cell: int
    replication: int
    seed: int
    degree: int
    regret_discounted: float = float("nan")
    regret_average: float = float("nan")
    value_discounted: float = float("nan")
    oracle_value_discounted: float = float("nan")
    rho_hat: float = float("nan")
    iterations: int = 0
    converged: bool = False
    beta: tuple = ()
    error: str = ""
    wall_time_ms: float = 0.0  # written to the timing sidecar, not the results CSV

    @property
    def key(self) -> tuple:
        return (self.cell, self.replication, self.learner)

    def to_record(self) -> dict:
        return {
            "schema": str(SCHEMA_VERSION),
            "axis": self.axis,
            "axis_value": _fmt(self.axis_value),
            "cell": str(self.cell),
            "replication": str(self.replication),
            "learner": self.learner,
            "seed": str(self.seed),
            "degree": str(self.degree),
            "regret_discounted": _fmt(self.regret_discounted),
            "regret_average": _fmt(self.regret_average),
            "value_discounted": _fmt(self.value_discounted),
            "oracle_value_discounted": _fmt(self.oracle_value_discounted),
            "rho_hat": _fmt(self.rho_hat),
            "iterations": str(self.iterations),
            "converged": "1" if self.converged else "0",
            "beta": " ".join(_fmt(b) for b in self.beta),
            "error": self.error,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ResultRow":
        if rec.get("schema") != str(SCHEMA_VERSION):
            raise ValueError(f"unsupported schema {rec.get('schema')!r}")
        return cls(
            learner=rec["learner"],
            axis=rec["axis"],
            axis_value=float(rec["axis_value"]),
            cell=int(rec["cell"]),
            replication=int(rec["replication"]),
            seed=int(rec["seed"]),
            degree=int(rec["degree"]),
            regret_discounted=float(rec["regret_discounted"]),
            regret_average=float(rec["regret_average"]),
            value_discounted=float(rec["value_discounted"]),
            oracle_value_discounted=float(rec["oracle_value_discounted"]),
            rho_hat=float(rec["rho_hat"]),
            iterations=int(rec["iterations"]),
            converged=rec["converged"] == "1",
            beta=tuple(float(b) for b in rec["beta"].split()),
            error=rec["error"],
        )


def _fmt(x) -> str:
    return format(float(x), ".17g")


# --- single experiments ----------------------------------------------------------------------

def _oracle_for(env, gamma: float, grid: GridSpec | None, cache: dict) -> OracleSolution:
    spec = grid if grid is not None else grid_for_env(env)
    key = oracle_cache_key(env, gamma, spec, None, None)
    if key not in cache:
        cache[key] = value_iteration_oracle(env, gamma, spec, protocol=None)
    return cache[key]


def run_experiment(config: ExperimentConfig, learner, rng: RngStream, *, env=None,
                   protocol: EvalProtocol = EvalProtocol(), degrees=None, oracle: OracleSolution | None = None,
                   grid: GridSpec | None = None, axis: str = "n_clusters", cell: int = 0,
                   replication: int = 0, _cache: dict | None = None) -> ResultRow | list[ResultRow]:
    """Simulate, optionally select the degree, fit, evaluate and score one replication.

    ``rng`` is the (seed, [cell, replication]) stream. ``learner`` may be a
    name or a sequence of names; the latter returns one row per learner,
    all fitted to the same dataset and evaluated on the same stream.
    A learner that raises is recorded with an ``error`` tag.
    """
    names = [learner] if isinstance(learner, str) else list(learner)
    env = env if env is not None else env_from_dict({"kind": "synthetic"})
    gamma = config.gamma
    oracle = oracle if oracle is not None else _oracle_for(env, gamma, grid, _cache if _cache is not None else {})
    horizon = protocol.resolve_horizon(gamma)
    eval_rng = rng.child(STAGE_EVALUATE)
    ref = mc_evaluate(env, oracle.policy(), gamma, protocol.n_traj, horizon, eval_rng,
                      protocol.omit_reward_residuals, protocol.r_max)
    data = simulate(env, config, rng.child(STAGE_SIMULATE))
    controls = FitControls(max_iters=config.max_iters, tol=config.tol)
    rows = []
    for name in names:
        t0 = time.perf_counter()
        row = ResultRow(name, axis, float(getattr(config, axis)), cell, replication, config.seed, config.degree,
                        oracle_value_discounted=ref.mean_discounted)
        try:
            if degrees is not None:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    row.degree = select_degree(data, name, degrees, rng=rng.child(STAGE_SELECT),
                                               gamma=gamma, controls=controls)
            fmap = FeatureMap(data.action_count, data.state_dim, row.degree)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                rep = fit(name, data, fmap, gamma, controls)
            q = QEstimate(rep.beta, fmap, gamma)
            value = mc_evaluate(env, q.policy(), gamma, protocol.n_traj, horizon, eval_rng,
                                protocol.omit_reward_residuals, protocol.r_max)
            row.regret_discounted = regret(ref, value, "discounted")
            row.regret_average = regret(ref, value, "average")
            row.value_discounted = value.mean_discounted
            row.rho_hat = rep.rho_hat
            row.iterations = rep.iterations
            row.converged = rep.converged
            row.beta = tuple(float(b) for b in rep.beta)
            tags = sorted({type(w.message).__name__ for w in caught} | set(rep.warnings))
            row.error = ("warn:" + "|".join(tags)) if tags else ""
        except (GfqiError, np.linalg.LinAlgError, FloatingPointError) as exc:
            row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        row.wall_time_ms = 1000 * (time.perf_counter() - t0)
        rows.append(row)
    return rows[0] if isinstance(learner, str) else rows


# --- sweeps ----------------------------------------------------------------------------------

_WORKER_CACHE: dict = {}


def _task(spec: SweepSpec, cell: int, rep: int, learners: tuple) -> list[ResultRow]:
    config = spec.configs()[cell]
    env = spec.environment(config)
    with threadpool_limits(limits=1):
        return run_experiment(config, learners, derive_stream(config.seed, [cell, rep]), env=env,
                              protocol=spec.protocol, degrees=spec.degrees, grid=spec.grid,
                              axis=spec.axis, cell=cell, replication=rep, _cache=_WORKER_CACHE)


def _check_writable(path: Path) -> None:
    if path.is_dir():
        raise IsADirectoryError(f"{path} is a directory")
    existed = path.exists()
    with open(path, "a", encoding="utf-8"):
        pass
    if not existed:
        path.unlink()


def timing_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".timing.csv")


def _row_sort_key(spec: SweepSpec):
    order = {name: i for i, name in enumerate(spec.learners)}
    return lambda row: (row.cell, row.replication, order.get(row.learner, len(order)), row.learner)


def _write_rows(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_record())
    os.replace(tmp, path)


def run_sweep(spec: SweepSpec, path: str | Path, threads: int = 1, resume: bool = False,
              progress=None) -> list[ResultRow]:
    """Run every (cell, replication, learner) key and write the sorted CSV.

    Finished rows are appended to the output as they arrive, so an
    interrupted sweep can be resumed; the final file is rewritten in key
    order and is byte-identical however it was produced. Wall times go
    to ``<path>.timing.csv``.
    """
    path = Path(path)
    _check_writable(path)
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    done: dict[tuple, ResultRow] = {}
    if resume and path.exists() and path.stat().st_size > 0:
        text = path.read_text(encoding="utf-8")
        if not text.endswith("\n"):
            # drop a row cut short by an interruption
            path.write_text(text[: text.rfind("\n") + 1], encoding="utf-8")
        for row in read_results(path):
            done[row.key] = row
    wanted = set(spec.keys())
    pending: dict[tuple, list[str]] = {}
    for cell, rep, learner in spec.keys():
        if (cell, rep, learner) not in done:
            pending.setdefault((cell, rep), []).append(learner)

    timings: dict[tuple, float] = {}
    if resume and timing_path(path).exists():
        with open(timing_path(path), newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                timings[(int(rec["cell"]), int(rec["replication"]), rec["learner"])] = float(rec["wall_time_ms"])

    # partial results: unsorted, appended as tasks finish
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in done.values():
            writer.writerow(row.to_record())
        fh.flush()

        def collect(rows):
            for row in rows:
                done[row.key] = row
                timings[row.key] = row.wall_time_ms
                writer.writerow(row.to_record())
            fh.flush()
            if progress is not None:
                progress(len(done), len(wanted))

        tasks = [(cell, rep, tuple(names)) for (cell, rep), names in sorted(pending.items())]
        if threads == 1 or len(tasks) <= 1:
            for cell, rep, names in tasks:
                collect(_task(spec, cell, rep, names))
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(_task, spec, cell, rep, names) for cell, rep, names in tasks]
                for fut in concurrent.futures.as_completed(futures):
                    collect(fut.result())

    rows = sorted((done[k] for k in wanted), key=_row_sort_key(spec))
    _write_rows(path, rows)
    with open(timing_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "replication", "learner", "wall_time_ms"])
        for row in rows:
            w.writerow([row.cell, row.replication, row.learner, f"{timings.get(row.key, float('nan')):.3f}"])
    return rows


def read_results(path: str | Path) -> list[ResultRow]:
    """Parse a results CSV, reporting the offending line on failure."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ResultsParseError("empty results file", 1) from None
        if tuple(header) != CSV_COLUMNS:
            raise ResultsParseError(f"header does not match schema {SCHEMA_VERSION}", 1)
        rows = []
        for fields in reader:
            line = reader.line_num
            if len(fields) != len(CSV_COLUMNS):
                raise ResultsParseError(f"expected {len(CSV_COLUMNS)} fields, found {len(fields)}", line)
            try:
                rows.append(ResultRow.from_record(dict(zip(CSV_COLUMNS, fields))))
            except (ValueError, KeyError) as exc:
                raise ResultsParseError(str(exc), line) from None
    return rows


# --- plotting --------------------------------------------------------------------------------

def plot_results(csv_path: str | Path, out_path: str | Path, metric: str = "regret_discounted",
                 title: str | None = None) -> Path:
    """Mean regret per learner against the swept axis, with +-1 SE bands.

    One panel per axis found in the file. Rows with an error tag other
    than warnings are left out.
    """
    if metric not in ("regret_discounted", "regret_average", "value_discounted"):
        raise InputError(f"unknown metric {metric!r}")
    rows = read_results(csv_path)
    if not rows:
        raise ResultsParseError("results file has no data rows", 2)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    axes_found = sorted({r.axis for r in rows})
    plt.rcParams["svg.hashsalt"] = "gfqi"
    fig, panels = plt.subplots(1, len(axes_found), figsize=(5.5 * len(axes_found), 4), squeeze=False)
    for panel, axis in zip(panels[0], axes_found):
        sub = [r for r in rows if r.axis == axis and not (r.error and not r.error.startswith("warn:"))]
        learners = list(dict.fromkeys(r.learner for r in sub))
        for name in learners:
            xs = sorted({r.axis_value for r in sub if r.learner == name})
            mean, se = [], []
            for x in xs:
                vals = np.array([getattr(r, metric) for r in sub if r.learner == name and r.axis_value == x])
                vals = vals[np.isfinite(vals)]
                mean.append(vals.mean() if vals.size else np.nan)
                se.append(vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else 0.0)
            mean, se = np.array(mean), np.array(se)
            if len(xs) == 1:
                panel.errorbar(xs, mean, yerr=se, fmt="o", capsize=4, label=name)
            else:
                line, = panel.plot(xs, mean, marker="o", label=name)
                panel.fill_between(xs, mean - se, mean + se, alpha=0.2, color=line.get_color())
        panel.set_xlabel(axis)
        panel.set_ylabel(metric.replace("_", " "))
        panel.axhline(0.0, color="grey", lw=0.5)
        panel.legend(frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
