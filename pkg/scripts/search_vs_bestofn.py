"""Execution-guided search against best-of-N on LatticeTune over many seeds."""

import argparse
import json
import logging
from statistics import median

from execforge.environments import lattice_environment
from execforge.mocks import MutationIdeator
from execforge.search import SearchConfig, SyntheticExecutor, best_of_n, epoch_best, run_search


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, default=20)
    ap.add_argument("--T", type=int, default=10)
    ap.add_argument("--seeds", type=int, default=50)
    ap.add_argument("--budget", type=int, nargs="+", default=[400], help="context budgets (chars) to sweep")
    ap.add_argument("--out", help="write per-seed results as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    env = lattice_environment()
    total = args.N * (args.T + 1)
    bon = [max(t.reward for t in best_of_n(MutationIdeator(seed=10_000 + s), env, total, seed=10_000 + s))
           for s in range(args.seeds)]
    results = {"best_of_n": bon, "search": {}}
    for budget in args.budget:
        rows = []
        for s in range(args.seeds):
            cfg = SearchConfig(args.N, args.T, context_budget_chars=budget, seed=s)
            res = run_search(cfg, MutationIdeator(seed=s), SyntheticExecutor(env, s), env)
            rows.append([b for _, b in epoch_best(res.trajectories)])
        finals = [r[-1] for r in rows]
        wins = sum(f > b for f, b in zip(finals, bon)) / args.seeds
        results["search"][budget] = rows
        logging.info("budget %5d: median search %.4f  median best-of-%d %.4f  win fraction %.2f",
                     budget, median(finals), total, median(bon), wins)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
