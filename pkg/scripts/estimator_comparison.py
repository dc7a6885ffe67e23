"""Multi-scale U-Net noise estimator vs a five-conv FCN of matched size on the heteroscedastic grid."""

import argparse

from aindnet.evaluate import format_table
from aindnet.experiments import EstimatorSetup, estimator_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    r = estimator_comparison(EstimatorSetup(steps=args.steps, seed=args.seed))
    for kind in ("unet", "fcn"):
        print(f"{kind}: {r[kind]['params']} params")
        print(format_table(r[kind]["rows"]), end="")


if __name__ == "__main__":
    main()
