"""Sinkhorn distance to the demonstrations: AQuaGAIL (no env reward) against BC.

    python scripts/aquagail_vs_bc.py --seeds 0 1 2
"""

import argparse

import numpy as np

from aquadem.envs import DiscretizedEnv, GridDemonstrator, GridWorld, generate_demos
from aquadem.imitation import BcConfig, GailConfig, train_aquagail, train_bc
from aquadem.metrics import demo_holdout_distance, evaluate, sinkhorn_distance, subsample
from aquadem.quantizer import TrainConfig, train_quantizer
from aquadem.rl import MdqnConfig


def distance(policy, env, demos, seed):
    res = evaluate(policy, env, 30, seed + 10_000)
    rng = np.random.default_rng([seed + 10_000, 1])
    return sinkhorn_distance(subsample(res.states, 2000, rng),
                             subsample(demos.all_states(), 2000, rng), 1e-2).value


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--steps", type=int, default=20_000)
    parser.add_argument("--holdout", action="store_true", help="also report the demo-vs-demo floor")
    args = parser.parse_args()

    env = GridWorld()
    bounds = (env.action_low, env.action_high)
    learner = MdqnConfig(learning_rate=3e-5, batch_size=64, n_step=1, epsilon=0.01, demo_ratio=0.0,
                         demo_min_reward=None, total_steps=args.steps, eval_every=args.steps)
    for seed in args.seeds:
        demos = generate_demos(env, GridDemonstrator(), 25, seed)
        gen = train_quantizer(demos, TrainConfig(K=3, temperature=0.01, batch_size=64,
                                                 gradient_steps=5_000, seed=seed),
                              action_bounds=bounds).model
        bc, _ = train_bc(demos, BcConfig(hidden=(64,), gradient_steps=5_000, seed=seed), bounds)
        gail, _ = train_aquagail(DiscretizedEnv(env, gen), demos, GailConfig(learner=learner), seed)
        line = (f"seed {seed}  aquagail {distance(gail, env, demos, seed):.5f}  "
                f"bc {distance(bc, env, demos, seed):.5f}")
        if args.holdout:
            floor = demo_holdout_distance(demos, n_repeats=20, seed=seed)
            line += f"  holdout median {floor.median:.5f}"
        print(line, flush=True)


if __name__ == "__main__":
    main()
