"""Command-line entry point: ``cderail {train,eval,oracle,selftest,experiment}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from cderail.agents import AgentConfig, load_policy
from cderail.curriculum import EVAL_SPEC, KINDS, PROBE_SPECS, RunConfig, builtin_curriculum, load_curriculum, permute
from cderail.dqn import DqnConfig
from cderail.errors import CdeRailError
from cderail.railsim import Family

ALGO_CHOICES = ("dqn", "dqn-ewc", "dqn-pau", "dqn-pau-ewc", "cde")
CURRICULUM_CHOICES = tuple(k.replace("_", "-") for k in KINDS)


def _hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"hidden sizes must be comma-separated integers, got {text!r}") from None
    if any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("hidden sizes must be positive")
    return sizes


def _scale(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"scale must be in (0, 1], got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cderail", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train one algorithm through a curriculum")
    tr.add_argument("--algo", choices=ALGO_CHOICES, required=True)
    tr.add_argument("--curriculum", default="custom", help=f"one of {', '.join(CURRICULUM_CHOICES)} or a file path")
    tr.add_argument("--order", choices=("PMD", "MPD", "MDP"), default=None)
    tr.add_argument("--scale", type=_scale, default=0.05, help="multiplier on every stage's step budget")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", type=Path, required=True, help="metrics file (JSON lines)")
    tr.add_argument("--cde-act", choices=("rotation", "random"), default="rotation")
    tr.add_argument("--eps-threshold", type=float, default=1.0, help="expansion acceptance factor")
    tr.add_argument("--n-anchors", type=int, default=2)
    tr.add_argument("--hidden", type=_hidden, default=(1024, 1024))
    tr.add_argument("--reset-buffer", choices=("family", "row"), default="family")
    tr.add_argument("--probe-every", type=float, default=0.1, help="probe interval as a fraction of a stage (0 = off)")
    tr.add_argument("--probe-episodes", type=int, default=10)
    tr.add_argument("--eval-episodes", type=int, default=50)
    tr.add_argument("--epsilon-time-scale", type=float, default=None,
                    help="factor applied to env steps in the exploration schedule (default 1/scale)")
    tr.add_argument("--target-tau", type=float, default=None,
                    help="target-network blend per update (default 1e-3/scale, capped at 1)")
    tr.add_argument("--checkpoint", type=Path, default=None, help="save the trained model here (.npz)")

    ev = sub.add_parser("eval", help="greedy evaluation of a saved model")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--episodes", type=int, default=50)
    ev.add_argument("--seed", type=int, default=1_000_000)
    ev.add_argument("--env", choices=("eval", "pathfinding", "malfunction", "deadlock"), default="eval")

    orc = sub.add_parser("oracle", help="exact optimum of a tiny scheduling instance")
    orc.add_argument("--instance", type=Path, required=True)

    sub.add_parser("selftest", help="run the built-in gradient, EWC and simulator checks")

    ex = sub.add_parser("experiment", help="desk-scale comparison runs (cached per arm and seed)")
    ex.add_argument("--arms", nargs="*", default=None, help="arm names (default: all)")
    ex.add_argument("--seeds", type=int, nargs="*", default=[0, 1, 2, 3, 4])
    ex.add_argument("--results", type=Path, default=Path("results"))
    ex.add_argument("--scale", type=_scale, default=0.05)
    ex.add_argument("--recompute", action="store_true")
    return parser


def _curriculum(args, parser):
    name = args.curriculum.replace("-", "_")
    if name in KINDS:
        cur = builtin_curriculum(name, args.scale)
    elif Path(args.curriculum).is_file():
        cur = load_curriculum(args.curriculum)
        cur.stages = [s.scaled(args.scale) for s in cur.stages]
    else:
        parser.error(f"--curriculum must be one of {', '.join(CURRICULUM_CHOICES)} or an existing file")
    if args.order is not None:
        if name in ("none", "naive", "custom_rehearsal"):
            parser.error(f"--order needs a Pathfinding/Malfunction/Deadlock curriculum, not {args.curriculum}")
        cur = permute(cur, args.order)
    return cur


def cmd_train(args, parser) -> int:
    from cderail.curriculum import run_curriculum
    from cderail.harness.metrics import MetricsWriter

    if args.n_anchors < 1:
        parser.error("--n-anchors must be at least 1")
    curriculum = _curriculum(args, parser)
    algo = args.algo.replace("-", "_")
    agent = AgentConfig(
        algo=algo,
        hidden=args.hidden,
        n_anchors=args.n_anchors,
        epsilon_threshold=args.eps_threshold,
        cde_act=args.cde_act,
        epsilon_time_scale=args.epsilon_time_scale or 1.0 / args.scale,
    )
    tau = args.target_tau if args.target_tau is not None else min(1.0, DqnConfig().target_tau / args.scale)
    run = RunConfig(
        agent=agent,
        dqn=DqnConfig(target_tau=tau),
        reset_buffer=args.reset_buffer,
        probe_every=args.probe_every,
        probe_episodes=args.probe_episodes,
        eval_episodes=args.eval_episodes,
    )
    with MetricsWriter(args.out) as sink:
        result = run_curriculum(algo, curriculum, args.seed, sink, run)
    if args.checkpoint is not None:
        result.agent.save(args.checkpoint)
    print(json.dumps({k: v for k, v in result.final.items() if k != "type"}))
    return 0


def cmd_eval(args, parser) -> int:
    from cderail.harness.evaluation import evaluate

    if args.episodes < 1:
        parser.error("--episodes must be at least 1")
    if not args.checkpoint.is_file():
        parser.error(f"no checkpoint at {args.checkpoint}")
    spec = EVAL_SPEC if args.env == "eval" else PROBE_SPECS[Family(args.env)]
    res = evaluate(load_policy(args.checkpoint), spec, args.episodes, args.seed)
    print(json.dumps(res.as_dict()))
    return 0


def cmd_oracle(args, parser) -> int:
    from cderail.harness.oracles import load_tiny_instance, tiny_exact_scheduler

    if not args.instance.is_file():
        parser.error(f"no instance file at {args.instance}")
    objective, routes = tiny_exact_scheduler(load_tiny_instance(args.instance))
    print(json.dumps({"objective": objective, "routes": routes}))
    return 0


def cmd_selftest(args, parser) -> int:
    from cderail.harness.selftest import run_selftest

    ok = True
    for name, passed, detail in run_selftest():
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


def cmd_experiment(args, parser) -> int:
    from cderail.harness.experiments import ARMS, desk_run_config, final_table, format_table, run_arm

    names = args.arms or list(ARMS)
    unknown = [n for n in names if n not in ARMS]
    if unknown:
        parser.error(f"unknown arms {unknown}; choose from {list(ARMS)}")
    run = desk_run_config(args.scale)
    results = {}
    for name in names:
        results[name] = [run_arm(ARMS[name], s, args.results, args.scale, run, args.recompute) for s in args.seeds]
        logging.getLogger(__name__).info("arm %s finished", name)
    print(format_table(final_table(results)))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "selftest": cmd_selftest,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args, parser)
    except CdeRailError as exc:
        print(f"cderail: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
