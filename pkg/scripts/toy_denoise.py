"""Train the micro model on AWGN sigma=25 and compare held-out PSNR with the noisy input."""

import argparse
import sys

from aindnet.experiments import ToyDenoiseSetup, toy_denoise
from aindnet.train import MetricsLog


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--save", help="write the trained checkpoint here")
    args = ap.parse_args()
    r = toy_denoise(ToyDenoiseSetup(steps=args.steps, lr=args.lr, seed=args.seed),
                    metrics=MetricsLog(sys.stdout))
    print(f"params={r['params']} noisy={r['noisy_psnr']:.2f}dB denoised={r['denoised_psnr']:.2f}dB "
          f"gain={r['denoised_psnr'] - r['noisy_psnr']:.2f}dB train={r['train_seconds']:.0f}s")
    if args.save:
        r["checkpoint"].save(args.save)


if __name__ == "__main__":
    main()
