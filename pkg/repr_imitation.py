import argparse
import logging
import os
import sys

from pydantic import ValidationError

import harness
from behavior_cloning import lift
from bounds import SUITES, BoundViolation
from env_gen import make_counterexample, verify_counterexample
from mdp_core import MdpError, perf_diff

logger = logging.getLogger("repr_imitation")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ASSERT = 2


def _config(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = harness.validate_config(dict(cfg.model_dump(), seed=args.seed))
    return cfg


def _stages(cfg, args, upto):
    """Replication 0 of cfg, run as far as `upto` (env, data, repr, bc)."""
    seed = harness.replication_seed(cfg, 0)
    problem = harness.build_problem(cfg, seed)
    harness.save_problem(problem, args.out)
    logger.info(f"env: {problem.mdp.n_states} states, fingerprint {problem.mdp.fingerprint()}")
    if upto == "env":
        return
    offline, demos = harness.sample_data(cfg, problem, seed)
    harness.save_datasets(offline, demos, args.out)
    logger.info(f"data: {0 if offline is None else len(offline)} offline transitions, {len(demos)} demo pairs")
    if upto == "data":
        return
    rep = harness.train_representation(cfg, problem, offline, seed, progress=args.progress)
    harness.save_representation(rep, args.out)
    logger.info(f"representation: {rep.variant}, latent dim {rep.latent_dim}")
    if upto == "repr":
        return
    history = []
    policy = harness.train_policy(cfg, demos, rep, seed, history=history, progress=args.progress)
    harness.save_policy(policy, history, args.out)
    lifted = lift(policy, rep)
    logger.info(
        f"policy: mean per-step reward {problem.per_step_reward(lifted):.4f} "
        f"(target {problem.per_step_reward(problem.target):.4f}), "
        f"perf diff {perf_diff(problem.mdp, lifted, problem.target):.4f}"
    )


def cmd_gen_env(args):
    _stages(_config(args), args, "env")
    return EXIT_OK


def cmd_gen_data(args):
    _stages(_config(args), args, "data")
    return EXIT_OK


def cmd_train_repr(args):
    _stages(_config(args), args, "repr")
    return EXIT_OK


def cmd_train_bc(args):
    _stages(_config(args), args, "bc")
    return EXIT_OK


def cmd_eval_bounds(args):
    cfg = _config(args)
    suites = SUITES if args.suite == "all" else [args.suite]
    summaries = harness.bound_suites(suites, args.instances, cfg.seed, jobs=args.jobs, out=args.out)
    failed = [s.suite for s in summaries if s.violations]

    report_path = harness.emit_figure_data(None, "fig1", os.path.join(args.out, "figures"))
    logger.info(f"counterexample report: {report_path}")
    mdp, phi, target = make_counterexample()
    if not verify_counterexample(mdp, phi, target).passed:
        failed.append("counterexample")

    if args.monte_carlo:
        curve, tv_curve, _ = harness.monte_carlo_checks(cfg, trials=args.trials, seed=cfg.seed, out=args.out)
        if not all(p.holds for p in curve):
            failed.append("thm3")
        if not all(p.holds for p in tv_curve):
            failed.append("empirical-tv")

    if failed:
        logger.error(f"failed checks: {', '.join(failed)}")
        if args.assert_:
            return EXIT_ASSERT
    else:
        logger.info("all bound checks passed")
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    harness.run_experiment(cfg, out=args.out, jobs=args.jobs, assert_bounds=args.assert_)
    logger.info(f"results written to {os.path.join(args.out, 'results.csv')}")
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    values = [int(v) for v in args.values.split(",") if v]
    methods = [m for m in args.methods.split(",") if m]
    harness.sweep(cfg, args.axis, values, methods, out=args.out, jobs=args.jobs, assert_bounds=args.assert_)
    logger.info(f"sweep written to {os.path.join(args.out, 'results.csv')}")
    return EXIT_OK


def cmd_figures(args):
    results = args.results or os.path.join(args.out, "results.csv")
    out_dir = os.path.join(args.out, "figures")
    for figure in harness.FIGURES if args.figure == "all" else [args.figure]:
        if figure != "fig1" and not os.path.exists(results):
            logger.warning(f"skipping {figure}: no results at {results}")
            continue
        path = harness.emit_figure_data(results, figure, out_dir, render=args.render)
        logger.info(f"{figure}: {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description="Representation learning for imitation: tabular experiments and bound checks"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="defaults", help="JSON config file, or 'defaults'")
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides the config)")
    common.add_argument("--out", default="results", help="Output directory")
    common.add_argument("--jobs", type=int, default=1, help="Concurrent replications / sweep cells")
    common.add_argument("--assert", dest="assert_", action="store_true",
                        help="Exit with code 2 when a certified bound or a verification check fails")
    common.add_argument("--progress", action="store_true", help="Show training progress bars")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-env", parents=[common], help="Build the environment and target policy").set_defaults(func=cmd_gen_env)
    sub.add_parser("gen-data", parents=[common], help="Sample offline and demo datasets").set_defaults(func=cmd_gen_data)
    sub.add_parser("train-repr", parents=[common], help="Train the representation").set_defaults(func=cmd_train_repr)
    sub.add_parser("train-bc", parents=[common], help="Train BC on top of the representation").set_defaults(func=cmd_train_bc)

    bounds_p = sub.add_parser("eval-bounds", parents=[common], help="Property suites and counterexample check")
    bounds_p.add_argument("--suite", default="all", choices=["all", *SUITES])
    bounds_p.add_argument("--instances", type=int, default=100)
    bounds_p.add_argument("--monte-carlo", action="store_true", help="Also run the sample-efficiency and TV checks")
    bounds_p.add_argument("--trials", type=int, default=200)
    bounds_p.set_defaults(func=cmd_eval_bounds)

    sub.add_parser("run", parents=[common], help="Run every replication of the config").set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", parents=[common], help="Sweep one axis across method presets")
    sweep_p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    sweep_p.add_argument("--values", required=True, help="Comma-separated axis values, e.g. 6,15,30,150")
    sweep_p.add_argument("--methods", default="vanilla,fourier,svd",
                         help=f"Comma-separated presets from {', '.join(harness.METHODS)}")
    sweep_p.set_defaults(func=cmd_sweep)

    fig_p = sub.add_parser("figures", parents=[common], help="Aggregate results into plot data")
    fig_p.add_argument("--figure", default="all", choices=["all", *harness.FIGURES])
    fig_p.add_argument("--results", default=None, help="results.csv (default: <out>/results.csv)")
    fig_p.add_argument("--render", action="store_true", help="Also draw PNGs with matplotlib")
    fig_p.set_defaults(func=cmd_figures)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="[%(levelname)s] %(message)s",
    )
    try:
        return args.func(args)
    except harness.ConfigError as e:
        logger.error(f"invalid config: {e}")
        return EXIT_CONFIG
    except ValidationError as e:
        path, msg = harness.error_path(e)
        logger.error(f"invalid config: {path}: {msg}")
        return EXIT_CONFIG
    except BoundViolation as e:
        logger.error(str(e))
        return EXIT_ASSERT
    except MdpError as e:
        logger.error(str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
