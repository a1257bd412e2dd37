"""AQuaDQN with learned candidates against the untrained-network ablation.

    python scripts/aquadqn_vs_random.py --seeds 0 1 2 3 4
"""

import argparse
import time

import numpy as np

from aquadem.envs import DiscretizedEnv, GridDemonstrator, GridWorld, generate_demos
from aquadem.quantizer import TrainConfig, random_candidates, train_quantizer
from aquadem.rl import MdqnConfig, train_aquadqn


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--steps", type=int, default=20_000)
    parser.add_argument("--lr", type=float, default=3e-5)
    args = parser.parse_args()

    env = GridWorld()
    bounds = (env.action_low, env.action_high)
    cfg = MdqnConfig(batch_size=64, learning_rate=args.lr, total_steps=args.steps,
                     eval_every=max(1, args.steps // 10))
    finals = {"aquadem": [], "random": []}
    for seed in args.seeds:
        demos = generate_demos(env, GridDemonstrator(), 25, seed)
        learned = train_quantizer(demos, TrainConfig(K=3, temperature=0.01, batch_size=64,
                                                     gradient_steps=5_000, seed=seed),
                                  action_bounds=bounds).model
        generators = {"aquadem": learned, "random": random_candidates(2, 2, 3, bounds, seed)}
        for name, gen in generators.items():
            start = time.perf_counter()
            _, trace = train_aquadqn(DiscretizedEnv(env, gen), demos, cfg, seed)
            finals[name].append(trace[-1].success_rate)
            curve = " ".join(f"{row.success_rate:.2f}" for row in trace)
            print(f"seed {seed} {name:8s} {time.perf_counter() - start:5.0f}s  {curve}", flush=True)
    for name, values in finals.items():
        print(f"{name:8s} median final success {np.median(values):.2f}  {values}")


if __name__ == "__main__":
    main()
