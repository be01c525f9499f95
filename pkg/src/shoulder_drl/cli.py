"""Command line entry point: ``shoulder-drl <subcommand>``.

Exit codes: 0 success, 1 configuration error, 2 worker connectivity error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import harness, kvfile
from .distrib.server import serve_env
from .harness import CheckpointError, RunConfig
from .kvfile import ConfigError
from .plant import PlantConfig, reference_config
from .trajectory import TEST_SET_SEED, TEST_SET_SIZE, TEST_TRAJ_T, frozen_test_set, from_waypoints

EXIT_OK, EXIT_CONFIG, EXIT_WORKERS = 0, 1, 2


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for flag, key in (("agent", "agent"), ("muscles", "n_muscles"), ("frames", "frames"), ("seed", "seed"),
                      ("workers", "workers"), ("out", "output_dir"), ("experiment", "experiment"), ("plant", "plant")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _pool_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, help="local env-server subprocesses to start")
    p.add_argument("--connect", help="comma-separated host:port list of running env servers")
    p.add_argument("--in-process", action="store_true", help="simulate in this process instead of over TCP")


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, _overrides(args))


def cmd_train(args) -> int:
    cfg = _config(args)
    connect = args.connect.split(",") if args.connect else None
    with harness.open_pool(cfg, connect, args.in_process) as pool:
        result = harness.train(cfg, pool, progress=print if args.verbose else None)
        print(f"checkpoint {result.checkpoint}")
        print(f"stats {result.stats_path}  ({result.updates} updates, {result.frames} frames)")
        if args.plot:
            from . import plotting

            print(f"figure {plotting.training_curve(result.episodes_path, cfg.run_dir / 'training.png')}")
        if args.evaluate:
            policy, _ = harness.load_policy(result.checkpoint, cfg.n_muscles)
            report = harness.evaluate(pool, policy, cfg.reward_params(), cfg.test_seed, cfg.test_count, cfg.eval_T)
            _report(report, cfg.run_dir / "eval.csv", args.plot)
    return EXIT_OK


def _checkpoint_config(args) -> RunConfig:
    meta_path = Path(args.checkpoint + ".meta")
    if not meta_path.exists():
        raise CheckpointError(f"missing sidecar {meta_path}")
    meta = kvfile.load(meta_path)
    run_cfg = Path(args.checkpoint).parent / "run.cfg"
    values = kvfile.load(args.config) if args.config else (kvfile.load(run_cfg) if run_cfg.exists() else {})
    values.setdefault("agent", meta["agent"])
    values.setdefault("n_muscles", meta["n_muscles"])
    values.update(_overrides(args))
    return RunConfig.from_kv(values)


def cmd_evaluate(args) -> int:
    cfg = _checkpoint_config(args)
    policy, _ = harness.load_policy(args.checkpoint, cfg.n_muscles)
    connect = args.connect.split(",") if args.connect else None
    seed = cfg.test_seed if args.test_seed is None else args.test_seed
    count = cfg.test_count if args.count is None else args.count
    with harness.open_pool(cfg, connect, args.in_process) as pool:
        report = harness.evaluate(pool, policy, cfg.reward_params(), seed, count, cfg.eval_T)
    _report(report, Path(args.report), args.plot)
    return EXIT_OK


def _report(report: harness.EvalReport, path: Path, plot: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    per_traj, summary = report.write(path)
    s = report.summary()
    print(f"report {per_traj}  summary {summary}")
    print(f"MAE {s['mae_mean']:.3f} deg  RMSE {s['rmse_mean']:.3f} deg  crashed {s['crashed']}/{s['trajectories']}")
    if plot:
        from . import plotting

        print(f"figure {plotting.error_boxplot(per_traj, path.with_suffix('.png'))}")


def cmd_trace(args) -> int:
    cfg = _checkpoint_config(args)
    policy, _ = harness.load_policy(args.checkpoint, cfg.n_muscles)
    if args.waypoints:
        traj = from_waypoints(kvfile.floats(args.waypoints))
        index = 0
    else:
        seed = cfg.test_seed if args.test_seed is None else args.test_seed
        index = args.test_index
        tests = frozen_test_set(seed, index + 1, cfg.eval_T)
        traj = tests[index]
    out = Path(args.trace)
    out.parent.mkdir(parents=True, exist_ok=True)
    ep = harness.emit_trace(policy, cfg.plant_config(), traj, out, cfg.reward_params(), index)
    print(f"trace {out}  ({len(ep)} frames{', crashed' if ep.crashed else ''})")
    if args.plot:
        from . import plotting

        print(f"figure {plotting.trace_figure(out, out.with_suffix('.png'))}")
    return EXIT_OK


def cmd_serve_env(args) -> int:
    cfg = PlantConfig.load(args.plant) if args.plant else reference_config()
    if args.muscles is not None:
        cfg = cfg.first(args.muscles)

    def ready(addr):
        print(f"LISTENING {addr[0]}:{addr[1]}", flush=True)

    serve_env(args.listen, cfg, on_ready=ready)
    return EXIT_OK


def cmd_gen_testset(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trajs = frozen_test_set(args.seed, args.count, args.duration)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "t", "phi_hat", "phi_dot_hat"])
        for k, traj in enumerate(trajs):
            for t, pos, vel in traj.sample_grid(args.dt):
                w.writerow([k, repr(float(t)), repr(float(pos)), repr(float(vel))])
    wp = out.with_name(out.stem + "_waypoints.csv")
    with wp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "waypoints"])
        for k, traj in enumerate(trajs):
            w.writerow([k, " ".join(repr(float(p)) for p in traj.waypoints)])
    print(f"test set {out}  waypoints {wp}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # Usage errors are configuration errors; argparse's own code 2 is reserved for connectivity.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shoulder-drl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="flat key = value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("train", parents=[common], help="train an agent for a frame budget")
    config_args(p)
    p.add_argument("--agent", choices=["ppo", "dql"])
    p.add_argument("--muscles", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--experiment")
    p.add_argument("--plant", help="plant config file")
    p.add_argument("--evaluate", action="store_true", help="evaluate the final checkpoint on the test set")
    p.add_argument("--plot", action="store_true", help="also render PNG figures next to the CSVs")
    _pool_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the frozen test set")
    config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--report", default="eval.csv", help="per-trajectory CSV path")
    p.add_argument("--plant")
    p.add_argument("--plot", action="store_true")
    _pool_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("trace", parents=[common], help="dump one deterministic rollout as CSV")
    config_args(p)
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--test-index", type=int, default=0, help="trajectory from the frozen test set")
    group.add_argument("--waypoints", help="comma-separated rest angles, one section each")
    p.add_argument("--test-seed", type=int)
    p.add_argument("--trace", default="trace.csv", help="output CSV path")
    p.add_argument("--plant")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("serve-env", parents=[common], help="run one environment server")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 picks a free one)")
    p.add_argument("--plant", help="plant config file")
    p.add_argument("--muscles", type=int, help="keep only the first N muscles")
    p.set_defaults(func=cmd_serve_env)

    p = sub.add_parser("gen-testset", parents=[common], help="write the frozen test trajectories as CSV")
    p.add_argument("--seed", type=int, default=TEST_SET_SEED)
    p.add_argument("--count", type=int, default=TEST_SET_SIZE)
    p.add_argument("--duration", type=float, default=TEST_TRAJ_T)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--out", default="testset.csv")
    p.set_defaults(func=cmd_gen_testset)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConnectionError as exc:
        print(f"error: worker connectivity: {exc}", file=sys.stderr)
        return EXIT_WORKERS
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
