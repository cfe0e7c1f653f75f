"""Command line entry point: ``marl-reach {train,eval,scenarios,plot}``."""
from __future__ import annotations

import argparse
import logging
import sys

from marl_reach import kernels
from marl_reach.env import EnvConfig
from marl_reach.errors import CheckpointError, ConfigurationError, ScenarioParseError
from marl_reach.metrics import DEFAULT_WINDOW, emit_plot_data
from marl_reach.numerics import RngStream
from marl_reach.orchestrator import (
    STREAM_EVAL,
    TrainingConfig,
    checkpoint_load,
    evaluate,
    train,
)
from marl_reach.perturbation import SCENARIO_CODES, scenario_from_code


def _training_config(args) -> TrainingConfig:
    base = TrainingConfig.paper_scale() if args.paper_scale else TrainingConfig()
    env = EnvConfig.load(args.env_config) if args.env_config else base.env
    fields = {
        "n_agents": args.agents if args.agents is not None else base.n_agents,
        "total_env_steps": args.steps if args.steps is not None else base.total_env_steps,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "eval_episodes": args.eval_episodes,
        "checkpoint_every": args.checkpoint_every,
    }
    return TrainingConfig(**fields, ppo=base.ppo, env=env)


def cmd_train(args) -> int:
    training = _training_config(args)
    scenario = scenario_from_code(args.scenario, training.n_agents)
    result = train(scenario, training, args.out, resume=args.resume)
    run = result.run
    print(f"scenario {scenario.code}: {run.version} updates, {run.steps_done} env steps "
          f"[{kernels.BACKEND} kernels] -> {result.out_dir}")
    if result.final_eval is not None:
        ev = result.final_eval
        print(f"eval: success_rate={ev.success_rate:.3f} mean_score={ev.mean_score:.2f} "
              f"mean_length={ev.mean_episode_length:.1f}")
    return 0


def cmd_eval(args) -> int:
    run = checkpoint_load(args.checkpoint)
    seed = run.training.seed if args.seed is None else args.seed
    res = evaluate(run.policy, run.training.env, args.episodes, RngStream(seed, STREAM_EVAL))
    print(f"success_rate={res.success_rate:.3f} mean_score={res.mean_score:.2f} "
          f"mean_length={res.mean_episode_length:.1f}")
    return 0


def cmd_scenarios(args) -> int:
    for code in SCENARIO_CODES:
        print(code)
    return 0


def cmd_plot(args) -> int:
    warnings = emit_plot_data(args.runs, args.out, window=args.window)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marl-reach", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one scenario")
    p.add_argument("--scenario", default="base")
    p.add_argument("--agents", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--paper-scale", action="store_true",
                   help="30 agents and 4M steps unless overridden")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--env-config", default=None, help="key = value environment config file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with mean actions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scenarios", help="list scenario codes")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("plot", help="write a plot-ready table of smoothed scores")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ScenarioParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
