"""Command line entry point: ``rrmdp <subcommand> ...``.

Exit codes: 0 success, 1 invariant violation, 2 invalid config or arguments.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .environments import build_environment, read_descriptor, write_descriptor
from .evaluation import exact_value, mc_return, robust_regularized_value
from .experiments import (ConfigError, _row, behavior_policy, load_config, parse_algorithm, perturbed_env,
                          run_dualcheck, run_experiment, write_rows)
from .mdp_core import DivergenceSpec, InvalidEnvironmentError, OfflineDataset, Policy, collect_dataset, meta_path
from .solvers import solve

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2
log = logging.getLogger("rrmdp")


def _parse_sets(pairs):
    spec = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        spec[key] = [float(v) for v in value.split(",")] if key == "xi" else value
    return spec


def _env_from_args(args):
    if args.env:
        return read_descriptor(args.env)
    if args.builder:
        return build_environment({"builder": args.builder, **_parse_sets(args.set)})
    raise ConfigError("give --env DESCRIPTOR or --builder NAME")


def _add_env_args(p):
    p.add_argument("--env", help="environment descriptor (key=value file)")
    p.add_argument("--builder", choices=["simulated_linear_mdp", "american_put", "hard_instance"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="builder parameter (repeatable)")


def _add_algo_args(p):
    p.add_argument("--algo", required=True, choices=["PEVI", "R2PVI", "DRPVI", "DRVI-L"])
    p.add_argument("--divergence", choices=["TV", "KL", "Chi2"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.1)


def cmd_collect(args):
    env = _env_from_args(args)
    data = collect_dataset(env, behavior_policy(env, args.behavior), args.K, args.seed)
    out = Path(args.out)
    data.to_csv(out)
    write_descriptor(env, out.with_name(out.stem + ".env"))
    print(f"wrote {data.K} trajectories to {out} (sidecar {meta_path(out)})")
    return EXIT_OK


def cmd_solve(args):
    env = _env_from_args(args)
    data = OfflineDataset.from_csv(args.data)
    algo = parse_algorithm({"name": args.algo, "beta": args.beta, "gamma": args.gamma,
                            "divergence": args.divergence, "lambda": args.lam, "rho": args.rho})
    out = solve(algo.name, data, env, algo.beta, algo.gamma, algo.divergence_spec(), algo.rho)
    paths = out.to_csv(args.out_dir, args.prefix)
    ok = _check_solver_output(out, env)
    print(f"{algo.label}: V1 = {env.initial_dist @ out.v_tables[0]:.6f}, "
          f"{out.wallclock_ms:.1f} ms; wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK if ok else EXIT_INVARIANT


def _check_solver_output(out, env) -> bool:
    caps = env.H - np.arange(env.H)
    ok = bool(np.all(out.q_tables >= 0) and np.all(out.q_tables <= caps[:, None, None] + 1e-12))
    ok &= bool(np.array_equal(out.v_tables, out.q_tables.max(axis=2)))
    if not ok:
        log.error("solver output violates the clipping or greedy invariants")
    return ok


def _read_q_policy(path, H, S, A) -> Policy:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    Q = np.full((H, S, A), -np.inf)
    Q[table[:, 0].astype(int) - 1, table[:, 1].astype(int), table[:, 2].astype(int)] = table[:, 3]
    return Policy.deterministic(Q.argmax(axis=2), A)


def cmd_eval(args):
    env = _env_from_args(args)
    policy = _read_q_policy(args.q_table, env.H, env.n_states, env.n_actions)
    test_env = perturbed_env(env, args.perturbation) if args.perturbation is not None else env
    algo = parse_algorithm({"name": args.algo, "beta": 0.0, "gamma": 1.0, "divergence": args.divergence,
                            "lambda": args.lam, "rho": args.rho}) if args.algo else None
    rows = []
    if args.mode == "mc":
        value, stderr = mc_return(test_env, policy, args.n_episodes, args.seed)
        metric = "return"
    elif args.robust:
        value = robust_regularized_value(test_env, policy, DivergenceSpec(args.robust, args.robust_lambda)) \
            .initial(test_env.initial_dist)
        stderr, metric = 0.0, f"robust_value_{args.robust}"
    else:
        value = exact_value(test_env, policy).initial(test_env.initial_dist) * test_env.reward_scale
        stderr, metric = 0.0, "return"
    if algo is None:
        algo = parse_algorithm({"name": "PEVI"})
    rows.append(_row(metric, env.name, algo, "", args.seed, args.perturbation or 0.0, value, stderr))
    if args.out:
        write_rows(args.out, rows)
    print(f"{metric} = {value:.6f} (stderr {stderr:.3g})")
    return EXIT_OK


def cmd_run(args):
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.workers:
        cfg.workers = args.workers
    if cfg.kind == "dualcheck":
        return _report_dualcheck(run_dualcheck(cfg.trials, cfg.seeds[0]))
    rows = run_experiment(cfg)
    print(f"{cfg.kind}: {len(rows)} rows written to {Path(cfg.output_dir) / 'results.csv'}")
    return EXIT_OK


def cmd_bench(args):
    cfg = load_config(args.config)
    if cfg.kind not in ("timing-vs-N", "timing-vs-d"):
        raise ConfigError(f"bench needs a timing config, got kind {cfg.kind!r}")
    return cmd_run(args)


def cmd_hardness(args):
    cfg = load_config(args.config)
    if cfg.kind != "hardness":
        raise ConfigError(f"hardness needs a hardness config, got kind {cfg.kind!r}")
    return cmd_run(args)


def _report_dualcheck(report):
    print(report.table())
    return EXIT_OK if report.passed else EXIT_INVARIANT


def cmd_dualcheck(args):
    return _report_dualcheck(run_dualcheck(args.trials, args.seed, corrupt_lambda=args.corrupt_lambda))


def build_parser():
    parser = argparse.ArgumentParser(prog="rrmdp", description="Robust regularized offline RL toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect an offline dataset")
    _add_env_args(p)
    p.add_argument("--behavior", default="uniform", choices=["uniform", "exercise"])
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("solve", help="run one solver on a dataset")
    _add_env_args(p)
    _add_algo_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--prefix", default="solver")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("eval", help="evaluate the greedy policy of a q_hat table")
    _add_env_args(p)
    p.add_argument("--q-table", required=True)
    p.add_argument("--perturbation", type=float)
    p.add_argument("--mode", choices=["exact-dp", "mc"], default="exact-dp")
    p.add_argument("--n-episodes", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--robust", choices=["TV", "KL", "Chi2"], help="report the robust regularized value instead")
    p.add_argument("--robust-lambda", type=float, default=1.0)
    p.add_argument("--algo", choices=["PEVI", "R2PVI", "DRPVI", "DRVI-L"], help="label for the output row")
    p.add_argument("--divergence", choices=["TV", "KL", "Chi2"])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    for name, fn, text in (("run", cmd_run, "run a full experiment from a config"),
                           ("bench", cmd_bench, "run a timing benchmark config"),
                           ("hardness", cmd_hardness, "run a hard-instance suboptimality config")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("--output-dir")
        p.add_argument("--workers", type=int)
        p.set_defaults(fn=fn)

    p = sub.add_parser("dualcheck", help="certify the duals against the primal oracle")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-lambda", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_dualcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except InvalidEnvironmentError as err:
        print(f"invalid environment: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
