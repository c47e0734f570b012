"""Command-line entry point: ``livemap {run,train,sweep,validate-config}``."""
import argparse
import logging
import os
import sys

from . import experiment
from .config import ConfigError, ScenarioConfig, load_config
from .experiment import ALGORITHMS, POLICY_MODE, SWEEP_PARAMS, UsageError, make_policy
from .rl import write_state_schema

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4

log = logging.getLogger("livemap")


def _config(path) -> ScenarioConfig:
    return ScenarioConfig().validate() if path is None else load_config(path)


def _policy(cfg, algo, seed, checkpoint):
    mode = POLICY_MODE.get(algo)
    if mode is None:
        return None
    policy = make_policy(cfg, mode, seed)
    if checkpoint is None:
        log.warning("%s without --checkpoint runs an untrained policy", algo)
    else:
        policy.load(checkpoint)
    return policy


def cmd_run(args):
    cfg = _config(args.config)
    if args.algo not in ALGORITHMS:
        raise UsageError(f"unknown algorithm {args.algo!r}; choose from {', '.join(ALGORITHMS)}")
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out or "out"
    metrics = experiment.run(cfg, args.algo, seed, out, policy=_policy(cfg, args.algo, seed, args.checkpoint))
    write_state_schema(os.path.join(out, "state_schema.json"), cfg.measurement.n_partitions)
    print(f"{args.algo}: mean latency {metrics.mean_latency:.4f} s, "
          f"fulfillment {metrics.fulfillment_rate:.3f}, {len(metrics.tasks)} tasks -> {out}")


def cmd_train(args):
    cfg = _config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    steps = cfg.training.steps if args.steps is None else args.steps
    checkpoint = args.checkpoint or f"{args.mode}.bin"
    policy, history = experiment.train(cfg, args.mode, steps, seed, checkpoint)
    print(f"trained {args.mode} policy to step {policy.steps} over {len(history)} episode(s) -> {checkpoint}")


def cmd_sweep(args):
    cfg = _config(args.config)
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if not args.values:
        raise UsageError("--values needs at least one value")
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers ({exc})") from exc
    algos = args.algo.split(",")
    seed = cfg.seed if args.seed is None else args.seed
    policies = {}
    if args.checkpoint:
        for a in algos:
            mode = POLICY_MODE.get(a)
            if mode is not None and mode not in policies:
                policies[mode] = _policy(cfg, a, seed, args.checkpoint)
    out = args.out or "sweep.csv"
    rows = experiment.sweep(cfg, args.param, values, algos, seed, out, policies, args.steps)
    for p, v, a, mean, p95, ful in rows:
        print(f"{p}={v:g} {a}: mean {mean:.4f} s, p95 {p95:.4f} s, fulfillment {ful:.3f}")


def cmd_validate(args):
    if args.config is None:
        raise UsageError("validate-config needs --config")
    load_config(args.config)
    print(f"{args.config}: ok")


def build_parser():
    p = argparse.ArgumentParser(prog="livemap", description="Edge live-map offloading experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run one algorithm and write tasks/coverage/summary CSVs")
    r.add_argument("--config")
    r.add_argument("--algo", required=True, help=", ".join(ALGORITHMS))
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (default: out)")
    r.add_argument("--checkpoint", help="trained policy for livemap, livemap-dist and livemap-lite")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("train", help="train the shared offloading policy")
    t.add_argument("--config")
    t.add_argument("--mode", choices=("central", "distributed"), default="central")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint", help="checkpoint path; resumed if it exists")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="compare algorithms across one parameter")
    s.add_argument("--config")
    s.add_argument("--param", required=True, help=", ".join(SWEEP_PARAMS))
    s.add_argument("--values", required=True, help="comma-separated values, e.g. 25,50,100")
    s.add_argument("--algo", default="eo", help="comma-separated algorithms")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="training steps per cell when no checkpoint is given")
    s.add_argument("--checkpoint")
    s.add_argument("--out", help="CSV path (default: sweep.csv)")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate-config", help="check a configuration file")
    v.add_argument("--config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - surface anything else as a non-zero exit
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
