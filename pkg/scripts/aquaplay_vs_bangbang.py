"""Per-task success on the play gridworld: candidates learned from play data
against a state-independent bang-bang grid.

    python scripts/aquaplay_vs_bangbang.py --seed 0 --bins 3
"""

import argparse
from dataclasses import replace

from aquadem.envs import PlayGridWorld, bang_bang_candidates, generate_play_demos
from aquadem.imitation import PlayConfig, train_aquaplay
from aquadem.quantizer import train_quantizer


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bins", type=int, default=3)
    parser.add_argument("--steps", type=int, default=20_000)
    parser.add_argument("--episodes", type=int, default=50)
    args = parser.parse_args()

    env = PlayGridWorld()
    play = generate_play_demos(env, args.episodes, args.seed)
    cfg = PlayConfig()
    cfg = replace(cfg, learner=replace(cfg.learner, total_steps=args.steps, eval_every=args.steps // 5))
    learned = train_quantizer(play, replace(cfg.quantizer, seed=args.seed),
                              action_bounds=(env.action_low, env.action_high)).model
    grid = bang_bang_candidates(args.bins, env.action_dim)
    for task in range(env.n_tasks):
        for name, gen in (("aquaplay", learned), (f"bb-{args.bins}", grid)):
            _, trace = train_aquaplay(env, play, task, cfg, args.seed, generator=gen)
            curve = " ".join(f"{row.success_rate:.2f}" for row in trace)
            print(f"task {task} {name:9s} {curve}", flush=True)


if __name__ == "__main__":
    main()
