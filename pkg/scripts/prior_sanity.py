"""Train the graph network prior and compare it with zero-acceleration extrapolation."""

import argparse
from pathlib import Path

from _common import report

from clothtrack.experiments import PriorSanityConfig, prior_sanity


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("results") / "prior_sanity.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=PriorSanityConfig.n_train)
    args = p.parse_args()
    stats = prior_sanity(PriorSanityConfig(seed=args.seed, n_train=args.n_train))
    for key, value in stats.items():
        print(f"{key}: {value:.6g}")
    report(args.out, [stats])


if __name__ == "__main__":
    main()
