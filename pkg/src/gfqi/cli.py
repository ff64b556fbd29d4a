"""Command-line entry point: ``gfqi <subcommand> [options]``.

A run is described by one JSON document with sections ``env``, ``sweep``,
``learners`` and ``eval``; see ``demos/configs`` for examples.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import GfqiError, derive_stream, read_dataset_csv, write_dataset_csv
from .envs import UniformPolicy, simulate
from .evaluation import grid_for_env, load_or_build_oracle, mc_evaluate, regret
from .experiments import SweepSpec, plot_results, run_sweep
from .features import FeatureMap
from .learners import LEARNERS, FitControls, FitReport, QEstimate, fit

EXIT_OK, EXIT_FAILURE = 0, 1


def _load_spec(args) -> SweepSpec:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise GfqiError(f"{args.config}: invalid JSON ({exc})") from None
    return SweepSpec.from_dict(doc, seed=args.seed)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text + "\n")
    else:
        Path(out).write_text(text + "\n", encoding="utf-8")


def cmd_simulate(args) -> int:
    spec = _load_spec(args)
    config = spec.base
    env = spec.environment(config)
    data = simulate(env, config, derive_stream(config.seed, [args.replication]), UniformPolicy(env.action_count))
    if args.out is None:
        raise GfqiError("simulate needs --out")
    write_dataset_csv(data, args.out)
    print(f"wrote {data.n_blocks} blocks x {data.cluster_size} members to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    spec = _load_spec(args)
    config = spec.base
    data = read_dataset_csv(args.data, action_count=args.actions)
    if data.n_clusters * data.horizon != data.n_blocks:
        raise GfqiError("dataset is not a complete cluster x time grid")
    degree = args.degree if args.degree is not None else config.degree
    gamma = args.gamma if args.gamma is not None else config.gamma
    fmap = FeatureMap(data.action_count, data.state_dim, degree)
    report = fit(args.learner, data, fmap, gamma, FitControls(config.max_iters, config.tol))
    _emit(report.to_json(degree=degree, gamma=gamma, action_count=data.action_count,
                         state_dim=data.state_dim), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec = _load_spec(args)
    config = spec.base
    doc = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    report = FitReport.from_dict(doc)
    gamma = doc.get("gamma", config.gamma)
    fmap = FeatureMap(doc.get("action_count", 2), doc.get("state_dim", 1), doc.get("degree", config.degree))
    env = spec.environment(config)
    protocol = spec.protocol
    rng = derive_stream(config.seed, [args.replication, 2])
    horizon = protocol.resolve_horizon(gamma)
    value = mc_evaluate(env, QEstimate(report.beta, fmap, gamma).policy(), gamma, protocol.n_traj, horizon,
                        rng, protocol.omit_reward_residuals, protocol.r_max)
    out = value.to_dict()
    if args.regret:
        oracle = load_or_build_oracle(env, gamma, args.cache_dir, spec.grid or grid_for_env(env), protocol=None)
        ref = mc_evaluate(env, oracle.policy(), gamma, protocol.n_traj, horizon, rng,
                          protocol.omit_reward_residuals, protocol.r_max)
        out["oracle_value_discounted"] = ref.mean_discounted
        out["regret_discounted"] = regret(ref, value, "discounted")
        out["regret_average"] = regret(ref, value, "average")
    _emit(json.dumps(out, indent=2), args.out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    spec = _load_spec(args)
    config = spec.base
    env = spec.environment(config)
    cache = args.out if args.out is not None else args.cache_dir
    grid = spec.grid or grid_for_env(env)
    sol = load_or_build_oracle(env, config.gamma, cache, grid, spec.protocol,
                               derive_stream(config.seed, [0x0AC1E]))
    summary = {
        "gamma": sol.gamma,
        "grid_value": sol.grid_value,
        "mc_value": sol.value,
        "mc_std_error": None if sol.evaluation is None else sol.evaluation.std_error,
        "bellman_residual": sol.bellman_residual,
        "sweeps": sol.sweeps,
        "grid": [float(sol.grid[0]), float(sol.grid[-1]), len(sol.grid)],
        "cache_dir": str(cache),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    if args.out is None:
        raise GfqiError("sweep needs --out")
    total = len(spec.values) * spec.n_replications * len(spec.learners)

    def progress(done, wanted):
        if args.verbose:
            print(f"\r{done}/{wanted} rows", end="", file=sys.stderr, flush=True)

    rows = run_sweep(spec, args.out, threads=args.threads, resume=args.resume, progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    failed = sum(1 for r in rows if r.error and not r.error.startswith("warn:"))
    print(f"wrote {len(rows)} of {total} rows to {args.out} ({failed} failed fits)")
    return EXIT_OK


def cmd_plot(args) -> int:
    if args.out is None:
        raise GfqiError("plot needs --out")
    plot_results(args.data, args.out, metric=args.metric, title=args.title)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run description with sections env, sweep, learners, eval")
    common.add_argument("--seed", type=int, help="override sweep.base.seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--out", help="output path")
    common.add_argument("--resume", action="store_true", help="keep rows already in --out")

    parser = argparse.ArgumentParser(prog="gfqi", description="Policy learning for clustered MDPs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="environment -> dataset CSV")
    p.add_argument("--replication", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="dataset CSV -> FitReport JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--learner", choices=LEARNERS, default="gfqi-exchangeable")
    p.add_argument("--degree", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--actions", type=int, help="action count (default: inferred from the data)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", parents=[common], help="FitReport JSON -> ValueEstimate JSON")
    p.add_argument("--fit", required=True)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--regret", action="store_true", help="also report regret against the oracle")
    p.add_argument("--cache-dir", default=".gfqi-cache")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", parents=[common], help="environment -> cached oracle (--out is the cache dir)")
    p.add_argument("--cache-dir", default=".gfqi-cache")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", parents=[common], help="sweep spec -> results CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", parents=[common], help="results CSV -> SVG")
    p.add_argument("--data", required=True)
    p.add_argument("--metric", default="regret_discounted",
                   choices=("regret_discounted", "regret_average", "value_discounted"))
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must be an unsigned 64-bit integer")
    try:
        return args.func(args)
    except (GfqiError, OSError, ValueError) as exc:
        print(f"gfqi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
