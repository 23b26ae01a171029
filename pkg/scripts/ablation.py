"""Train full, no_gating and dot_product under one recipe and compare held-out pixel MCC.

    python scripts/ablation.py --out runs/ablation [--config my.json]
"""
import argparse
import logging
from dataclasses import replace

from monet.cli import RunConfig, cmd_ablate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--modes", nargs="+", default=["full", "no_gating", "dot_product"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run = replace(RunConfig.load(args.config) if args.config else RunConfig(), out=args.out)
    for row in cmd_ablate(run, args.modes):
        print(f"{row['variant']:>12}  pixel {row['pixel_mcc']:.3f}  image {row['image_mcc']:.3f}")


if __name__ == "__main__":
    main()
