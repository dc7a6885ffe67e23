"""Source training on the camera-pipeline domain, then the few-shot table on the shifted domain."""

import argparse

from aindnet.checkpoint import Checkpoint
from aindnet.evaluate import fewshot_table
from aindnet.experiments import FewshotSetup, fewshot_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source-steps", type=int, default=1000)
    ap.add_argument("--finetune-steps", type=int, default=200)
    ap.add_argument("--ks", type=int, nargs="+", default=[0, 1, 4])
    ap.add_argument("--source", help="reuse a trained source checkpoint")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    setup = FewshotSetup(source_steps=args.source_steps, finetune_steps=args.finetune_steps,
                         ks=tuple(args.ks), target_pairs=max(1, *args.ks), seed=args.seed)
    source = Checkpoint.load(args.source) if args.source else None
    result = fewshot_trend(setup, source_ckpt=source,
                           model_cfg=source.model_config if source else None)
    print(fewshot_table(result["rows"]), end="")


if __name__ == "__main__":
    main()
