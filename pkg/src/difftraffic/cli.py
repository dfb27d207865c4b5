"""Command-line entry point: ``difftraffic <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .gradients import jacobian_benchmark, write_benchmark_csv
from .harness import check_gradients, dump_json, evaluate, simulate
from .network import GaussianPolicy
from .ppo import SEED_FIELDS, PerturbationConfig, train, write_rows

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
DELTA_SWEEP = (0.1, 0.2, 0.4)

log = logging.getLogger("difftraffic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(path):
    if path is None:
        return config_mod.ExperimentConfig()
    try:
        return config_mod.load(path)
    except OSError as exc:
        raise config_mod.ConfigError(f"cannot read config {path}: {exc}") from exc


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, msg):
    if not args.quiet:
        print(msg)


def cmd_simulate(args) -> int:
    cfg = _load(args.config)
    actions = None
    if args.actions:
        actions = np.loadtxt(args.actions, ndmin=1)
        if actions.size == 0:
            raise UsageError("action file is empty")
    seed = cfg.seeds[0] + args.seed_offset
    summary = simulate(cfg.scenario, args.steps, seed, _out_dir(args, cfg), actions)
    _say(args, f"mean_flow={summary['mean_flow']:.6f} total_fuel_gal={summary['total_fuel_gal']:.6f} "
               f"collisions={summary['collision_count']}")
    return EXIT_OK


def _run_training(args, cfg, out: Path, algo: str, pert: PerturbationConfig, tag: str) -> bool:
    seeds = tuple(s + args.seed_offset for s in cfg.seeds)
    tcfg = cfg.train_config(algorithm=algo, seeds=seeds)
    if args.iterations is not None:
        tcfg = dataclasses.replace(tcfg, iterations=args.iterations)
    result = train(cfg.scenario, tcfg, pert, jobs=args.jobs)
    ok = True
    finals = []
    for res in result.seeds:
        write_rows(res.rows, out / f"{tag}_seed{res.seed}.csv", SEED_FIELDS)
        if res.policy is not None:
            (out / f"{tag}_seed{res.seed}_policy.bin").write_bytes(res.policy.to_bytes())
        if res.error:
            ok = False
            log.error("seed %d failed: %s", res.seed, res.error)
        elif res.rows:
            finals.append((np.mean([r["mean_reward"] for r in res.rows[-10:]]), res.seed, res.policy))
    agg = result.aggregate()
    write_rows(agg, out / f"{tag}_aggregate.csv")
    if finals:
        best = max(finals, key=lambda t: t[0])
        (out / f"{tag}_policy.bin").write_bytes(best[2].to_bytes())
    errors = {str(r.seed): r.error for r in result.seeds if r.error}
    if errors:
        dump_json(errors, out / f"{tag}_errors.json")
    if agg:
        _say(args, f"{tag}: final mean_reward over seeds {agg[-1]['mean_over_seeds']:.4f}")
    return ok


def cmd_train(args) -> int:
    cfg = _load(args.config)
    out = _out_dir(args, cfg)
    pert = cfg.perturbation
    if args.eta is not None:
        pert = dataclasses.replace(pert, eta=args.eta)
    if args.preset == "delta-sweep":
        ok = True
        for d in DELTA_SWEEP:
            ok &= _run_training(args, cfg, out, "diffppo", dataclasses.replace(pert, delta=d), f"diffppo_delta{d}")
        return EXIT_OK if ok else EXIT_VERIFY
    if args.delta is not None:
        pert = dataclasses.replace(pert, delta=args.delta)
    ok = _run_training(args, cfg, out, args.algo, pert, args.algo)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_evaluate(args) -> int:
    cfg = _load(args.config)
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    sc = cfg.scenario
    policy = None
    if args.policy:
        try:
            policy = GaussianPolicy.from_bytes(Path(args.policy).read_bytes(), sc.step.alpha_min, sc.step.alpha_max)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load policy: {exc}") from exc
        if policy.net.sizes[0] != 2 * sc.n_vehicles:
            raise UsageError(f"policy expects {policy.net.sizes[0]} inputs, scenario gives {2 * sc.n_vehicles}")
    elif not args.uncontrolled:
        raise UsageError("give --policy or --uncontrolled")
    metrics = evaluate(sc, policy, args.episodes, cfg.seeds[0] + args.seed_offset)
    out = _out_dir(args, cfg)
    dump_json(metrics, out / (args.name or "evaluation.json"))
    _say(args, " ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_check_gradients(args) -> int:
    cfg = _load(args.config)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = check_gradients(cfg.scenario, args.trials, cfg.seeds[0] + args.seed_offset, corrupt=args.corrupt_jacobian)
    for name, c in report["checks"].items():
        _say(args, f"{name:20s} max_error={c['max_error']:.3e} tol={c['tolerance']:.0e} "
                   f"{'PASS' if c['passed'] else 'FAIL'}")
    if args.out:
        dump_json(report, _out_dir(args, cfg) / "gradient_check.json")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_bench_jacobian(args) -> int:
    cfg = _load(args.config)
    if any(n < 2 for n in args.n):
        raise UsageError("--n must be >= 2")
    reports = []
    for n in args.n:
        rep = jacobian_benchmark(n, args.iters, seed=args.seed_offset, params=cfg.scenario.idm, cfg=cfg.scenario.step)
        reports.append(rep)
        _say(args, f"n={n} analytical={rep.analytical_s:.4f}s fd={rep.fd_s:.4f}s speedup={rep.speedup:.1f}x")
    write_benchmark_csv(reports, _out_dir(args, cfg) / "bench_jacobian.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(with_defaults):
        # subcommands repeat the flags with suppressed defaults so they don't clobber top-level values
        def d(value):
            return value if with_defaults else argparse.SUPPRESS

        parser = argparse.ArgumentParser(add_help=False)
        parser.add_argument("--seed-offset", type=int, default=d(0), help="added to every configured seed")
        parser.add_argument("--jobs", type=int, default=d(None), help="parallel seed workers (default: CPU count)")
        parser.add_argument("--quiet", action="store_true", default=d(False))
        return parser

    common = global_flags(False)
    p = _Parser(prog="difftraffic", description="Differentiable IDM traffic simulation and RL training.",
                parents=[global_flags(True)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="all-IDM or replayed-action rollout")
    s.add_argument("config", nargs="?")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--out")
    s.add_argument("--actions", help="text file with one controlled-vehicle action per line (cycled)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train PPO or DiffPPO over the configured seeds")
    t.add_argument("config", nargs="?")
    t.add_argument("--algo", choices=["ppo", "diffppo"], default="ppo")
    t.add_argument("--delta", type=float)
    t.add_argument("--eta", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--preset", choices=["delta-sweep"])
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="mean-action evaluation of a saved policy")
    e.add_argument("config", nargs="?")
    e.add_argument("--policy")
    e.add_argument("--uncontrolled", action="store_true", help="evaluate the all-IDM baseline instead")
    e.add_argument("--episodes", type=int, default=5)
    e.add_argument("--out")
    e.add_argument("--name", help="output file name (default evaluation.json)")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("check-gradients", parents=[common], help="analytical vs finite-difference gradients")
    g.add_argument("config", nargs="?")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--out")
    g.add_argument("--corrupt-jacobian", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_check_gradients)

    b = sub.add_parser("bench-jacobian", parents=[common], help="time analytical vs finite-difference Jacobians")
    b.add_argument("config", nargs="?")
    b.add_argument("--n", type=int, action="append", help="platoon size (repeatable, default 100)")
    b.add_argument("--iters", type=int, default=1000)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_jacobian)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "n", None) is None and args.command == "bench-jacobian":
        args.n = [100]
    if args.jobs is None:
        args.jobs = os.cpu_count() or 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (config_mod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
