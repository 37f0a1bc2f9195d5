"""Train a pursuit model on a 3x3 grid and set it against the scripted baselines.

On a 2x2 grid every intersection arrival has a single legal exit, so the turn
policy cannot matter there; 3x3 is the smallest grid where it does.

    python3 demos/policies_on_3x3.py --variant gqrl_iese --episodes 60
"""
import argparse
import time

from pursuit import harness
from pursuit.config import load_config

SCENE = [
    "grid.W=3", "grid.scene_side=600", "grid.K=4",
    "sim.M=2", "sim.N=1", "sim.B=4", "sim.d_capture=30", "sim.episode_cap=300",
    "model.channels=4,4", "model.d_att=16", "model.d_out=32", "model.head_hidden=32", "model.coord_hidden=32,16",
    "train.eps_decay=true", "train.eval_episodes=20",
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="gqrl_iese", choices=("gqrl_iese", "gqrl", "iese_dqn", "dqn"))
    ap.add_argument("--episodes", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(None, [*SCENE, f"train.variant={args.variant}", f"train.episodes={args.episodes}",
                             f"train.seed={args.seed}"])
    seed = cfg.train.eval_seed
    rows = {
        "random": harness.evaluate(cfg, None, policy_factory=lambda i: harness.random_policy(
            harness.stream(seed, "random", i)))[0],
        "chaser": harness.evaluate(cfg, None, policy_factory=lambda i: harness.chaser_policy)[0],
        "untrained": harness.evaluate(cfg, harness.PursuitModel.create(cfg))[0],
    }
    t0 = time.perf_counter()

    def progress(k, m):
        if (k + 1) % 10 == 0:
            print(f"  episode {k + 1:4d}: {m.total_timestep:3d} steps, reward {m.total_reward:8.1f}", flush=True)

    print(f"training {args.variant} for {args.episodes} episodes")
    model = harness.train(cfg, progress=progress).model
    print(f"  done in {time.perf_counter() - t0:.0f}s")
    rows[args.variant] = harness.evaluate(cfg, model)[0]

    print(f"\n{'policy':<12}{'timestep':>10}{'reward':>10}{'avg reward':>12}   (means over {cfg.train.eval_episodes} seeds)")
    for name, agg in rows.items():
        print(f"{name:<12}{agg['total_timestep']['mean']:>10.1f}{agg['total_reward']['mean']:>10.1f}"
              f"{agg['average_reward']['mean']:>12.3f}")


if __name__ == "__main__":
    main()
