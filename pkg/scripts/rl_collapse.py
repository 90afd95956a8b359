"""Train the tabular policy on TwoMode and print the per-epoch collapse diagnostics."""

import argparse
import json

from execforge.rlsim import RLConfig, Shaping, train_rl


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--group-size", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=68)
    ap.add_argument("--lr", type=float, default=1.0)
    ap.add_argument("--shaping", choices=["none", "length", "diversity_penalty", "dynamic_prompt"], default="none")
    ap.add_argument("--weight", type=float, default=0.5)
    ap.add_argument("--jsonl", help="also write the dynamics here")
    args = ap.parse_args()

    cfg = RLConfig(group_size=args.group_size, epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                   shaping=Shaping(args.shaping, args.weight if args.shaping != "none" else 0.0))
    run = train_rl(cfg)
    print(f"{'epoch':>5} {'avg':>6} {'max':>5} {'E[r]':>6} {'think':>6} {'conv':>4} {'top30':>6} {'bot30':>6}")
    for d in run.dynamics:
        print(f"{d.epoch:>5} {d.avg_reward:6.3f} {d.max_reward:5.2f} {d.expected_reward:6.3f} {d.avg_thinking_len:6.1f} "
              f"{d.converged_idea_count:>4} {d.execution_rate_top30_thinking:6.2f} {d.execution_rate_bottom30_thinking:6.2f}")
    if args.jsonl:
        with open(args.jsonl, "w") as fh:
            fh.writelines(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in run.dynamics)


if __name__ == "__main__":
    main()
