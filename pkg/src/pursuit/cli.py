"""Command-line entry point.

    pursuit train --config run.ini --out runs/a
    pursuit eval --config run.ini --checkpoint runs/a/final --out runs/a/eval
    pursuit simulate --checkpoint runs/a/final --seed 3 --out traj.jsonl --dump-attention
    pursuit inspect-state --seed 3 --steps 20 --agent 0
    pursuit compare --config run.ini --run gqrl_iese=runs/a/final --run dqn=runs/b/final --out cmp
    pursuit selfcheck

Every subcommand accepts ``--set section.key=value`` overrides. Exit codes:
0 success, 2 configuration or missing-file error, 3 runtime/numeric error,
4 self-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import harness, report, selfcheck
from .config import RunConfig, load_config, to_ini
from .errors import ConfigError, ContractError, NumericError
from .nn_core import CheckpointError
from .road_network import build_grid
from .state_codec import encode_agent_state, encode_env_info, format_matrix
from .traffic_sim import reset, step

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 2, 3, 4

log = logging.getLogger("pursuit")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run configuration (INI)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value; repeatable")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pursuit", description="Multi-vehicle pursuit on a signalized grid.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant and write checkpoints + metrics")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.add_argument("--step-log", action="store_true", help="also write per-step records to steps.jsonl")
    p.add_argument("--svg", action="store_true", help="write reward_curve.svg")

    p = sub.add_parser("eval", help="greedy evaluation; writes summary.csv and episodes.jsonl")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--policy", choices=("model", "random", "chaser"), default="model")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("simulate", help="play one episode and dump the trajectory as JSON lines")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--policy", choices=("model", "random", "chaser"), default="model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-attention", action="store_true", help="include per-agent attention weights")

    p = sub.add_parser("inspect-state", help="print SF/SP/SE/BN for a simulator snapshot")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=0, help="advance this many steps with random valid actions")
    p.add_argument("--agent", type=int, default=0)

    p = sub.add_parser("compare", help="evaluate several checkpoints and write a metric x variant CSV")
    _common(p)
    p.add_argument("--run", action="append", required=True, metavar="VARIANT=CHECKPOINT")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("selfcheck", help="gradient checks and invariant suite")
    _common(p)
    p.add_argument("--quick", action="store_true", help="reduced trial counts")
    return parser


def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def _echo(config: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_ini(config))


def _require_dir(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not path.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {path}")
    return path


def _policy_setup(args, config: RunConfig):
    if args.policy == "model":
        return harness.load_model(_require_dir(args.checkpoint, "--checkpoint"), config), None
    if args.policy == "random":
        return None, lambda i: harness.random_policy(harness.stream(config.train.eval_seed, "random", i))
    return None, lambda i: harness.chaser_policy


def cmd_train(args) -> int:
    config = _config(args)
    _echo(config, args.out)

    def progress(k, m):
        log.info("episode %d/%d  steps %d  reward %.2f", k + 1, config.train.episodes, m.total_timestep, m.total_reward)

    result = harness.train(config, args.out, resume_from=args.resume, step_log=args.step_log or args.verbose >= 2,
                           progress=progress)
    if args.svg:
        rewards = []
        with (args.out / "metrics.jsonl").open() as fh:
            rewards = [json.loads(line)["total_reward"] for line in fh]
        (args.out / "reward_curve.svg").write_text(report.reward_curve_svg(rewards, f"{config.variant} training reward"))
    print(f"trained {len(result.history)} episodes -> {args.out / 'final'}")
    return EXIT_OK


def _evaluate(config: RunConfig, model, factory, episodes, seed):
    return harness.evaluate(config, model, episodes, seed, policy_factory=factory)


def cmd_eval(args) -> int:
    config = _config(args)
    model, factory = _policy_setup(args, config)
    summary, eps = _evaluate(config, model, factory, args.episodes, args.seed)
    _echo(config, args.out)
    with (args.out / "episodes.jsonl").open("w") as fh:
        for e in eps:
            fh.write(json.dumps(e.to_json()) + "\n")
    label = config.variant if args.policy == "model" else args.policy
    report.write_summary_csv(args.out / "summary.csv", label, summary)
    print(f"{label}: " + ", ".join(f"{n} {summary[k]['mean']:.3f}" for n, k in report.METRIC_ROWS))
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _config(args)
    model, factory = _policy_setup(args, config)
    if args.dump_attention and (model is None or not model.dqn_spec.use_iese):
        raise ConfigError("--dump-attention needs a checkpoint of an encoder variant (gqrl_iese or iese_dqn)")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    grid = build_grid(config.grid)
    with args.out.open("w") as fh:
        def write(rec):
            if not args.dump_attention:
                rec.pop("attention", None)
            fh.write(json.dumps(rec) + "\n")

        policy = factory(args.seed) if factory is not None else None
        m = harness.run_episode(config, model, "eval", args.seed, policy=policy, grid=grid, on_step=write)
    print(f"{m.total_timestep} steps, total reward {m.total_reward:.3f}, captures {len(m.captures)} -> {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    config = _config(args)
    if not 0 <= args.agent < config.sim.M:
        raise ConfigError(f"--agent must lie in [0, {config.sim.M})")
    grid = build_grid(config.grid)
    state = reset(config.sim, grid, args.seed)
    policy = harness.random_policy(np.random.default_rng(args.seed))
    for _ in range(args.steps):
        if state.done:
            break
        state, _ = step(state, policy(state))
    s = encode_agent_state(state, grid, args.agent)
    env = encode_env_info(state, grid)
    print(f"clock {state.clock}, agent {args.agent}, alive evaders {len(state.alive_evaders)}")
    for name, mat in (("SF", s.SF), ("SP", s.SP), ("SE", s.SE)):
        print(f"{name}:\n{format_matrix(mat)}")
    print(f"BN (vehicles per lane):\n{format_matrix(env.BN[None, :])}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _config(args)
    summaries = {}
    for item in args.run:
        variant, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--run {item!r} is not of the form VARIANT=CHECKPOINT")
        config = load_config(args.config, [*args.overrides, f"train.variant={variant}"])
        model = harness.load_model(_require_dir(Path(path), "--run"), config)
        summaries[variant], _ = _evaluate(config, model, None, args.episodes, args.seed)
    _echo(base, args.out)
    report.write_compare_csv(args.out / "compare.csv", summaries)
    print((args.out / "compare.csv").read_text(), end="")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    _config(args)  # reject bad overrides consistently with the other subcommands
    results = selfcheck.run_all(quick=args.quick)
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFCHECK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "inspect-state": cmd_inspect,
    "compare": cmd_compare,
    "selfcheck": cmd_selfcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ContractError, CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
