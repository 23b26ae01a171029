"""Comparison budget at full size (N=256, five scales), checked against a real detect run.

    python scripts/budget.py [--image-size 256] [--top-scale 5]

Builds an untrained model at the requested scale, runs detect on two
procedural images and prints the budget table with the executed counts.
"""
import argparse
import tempfile
from pathlib import Path

import numpy as np

from monet.cli import cmd_detect
from monet.network import MONet
from monet.pyramid import ScaleConfig
from monet.synth import procedural_image, write_png


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--image-size", type=int, default=256)
    ap.add_argument("--top-scale", type=int, default=5)
    args = ap.parse_args()
    cfg = ScaleConfig(image_size=args.image_size, top_scale=args.top_scale)
    rng = np.random.default_rng(0)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for k in (1, 2):
            write_png(tmp / f"{k}.png", procedural_image(rng, cfg.image_size))
        MONet(cfg, seed=0).save(tmp / "m.npz")
        res = cmd_detect(str(tmp / "m.npz"), str(tmp / "1.png"), str(tmp / "2.png"), str(tmp / "out"))
    print(res["budget"].to_text())
    raise SystemExit(0 if res["budget"].ok else 1)


if __name__ == "__main__":
    main()
