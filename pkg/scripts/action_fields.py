"""Candidate action fields for a series of (K, T) settings, as CSV and SVG.

    python scripts/action_fields.py --out runs/fields
"""

import argparse

from aquadem.cli import run_command


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/fields")
    parser.add_argument("--config", default="desk", help="preset name or config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()
    summary = run_command("visualize", args.config, seed=args.seed, out=args.out, force=args.force)
    print(summary)


if __name__ == "__main__":
    main()
