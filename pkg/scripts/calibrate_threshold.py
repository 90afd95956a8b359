"""Exact best-of-n distribution on LatticeTune and the win-fraction floor derived from it."""

import argparse
import json
import math

import numpy as np

from execforge.environments import LatticeTuneSpec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=220)
    ap.add_argument("--seeds", type=int, default=50)
    args = ap.parse_args()

    rewards = np.round(LatticeTuneSpec().all_rewards(), 12)
    levels, counts = np.unique(rewards, return_counts=True)
    n = rewards.size
    table = []
    for v, c in zip(levels[::-1][:6], counts[::-1][:6]):
        below = np.sum(rewards < v) / n
        table.append({"reward": float(v), "points": int(c), "p_best_below": float(below ** args.samples)})
    p = table[1]["p_best_below"]
    floor = p - 3 * math.sqrt(p * (1 - p) / args.seeds)
    cdf = [(float(v), float((np.sum(rewards <= v) / n) ** args.samples)) for v in levels]
    bon_median = next(v for v, c in cdf if c >= 0.5)
    print(json.dumps({"top_levels": table, "best_of_n_median": bon_median, "win_fraction_floor": floor}, indent=1))


if __name__ == "__main__":
    main()
