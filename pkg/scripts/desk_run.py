"""Full two-phase desk run: templates, pretraining, end-to-end training, held-out scores.

    python scripts/desk_run.py --out runs/desk [--config my.json] [--mode full]

Prints the pretraining separation (held-out positive vs negative detector
score) and the held-out pixel and image MCC of the final model.
"""
import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from monet.cli import (RunConfig, cmd_gen_templates, cmd_pretrain, cmd_train, evaluate_model, held_out_samples,
                       read_metrics, write_text)
from monet.network import MONet
from monet.synth import sample_triplets
from monet.training import TripletItem, triplet_scores


def separation(model, run, per_scale=8):
    """Mean score of full-overlap positives minus zero-overlap negatives, on held-out templates."""
    rng = np.random.default_rng(run.seed + 99)
    items = []
    for smp in held_out_samples(run):
        if smp.template is None:
            continue
        trips = {}
        for s in run.scale.scales:
            draws = sample_triplets(smp.template, run.scale, s, 4 * per_scale, rng, min_overlap_frac=1.0)
            trips[s] = [t for t in draws if t.o_plus == run.scale.patch_dim(s) ** 2 and t.o_minus == 0][:per_scale]
        items.append(TripletItem(smp, trips))
    _, pos, neg = triplet_scores(model, items, run.train)
    return float(pos.mean()), float(neg.mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--mode", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run = RunConfig.load(args.config) if args.config else RunConfig()
    run = replace(run, out=args.out, **{k: v for k, v in (("mode", args.mode), ("seed", args.seed)) if v is not None})
    Path(run.out).mkdir(parents=True, exist_ok=True)
    write_text(Path(run.out) / "config.json", run.to_json())
    if not (run.template_path / "manifest.json").exists():
        cmd_gen_templates(run)

    t0 = time.process_time()
    pre = cmd_pretrain(run)
    pre_cpu = time.process_time() - t0
    val = [r["val_rank_loss"] for r in read_metrics(Path(run.out) / "metrics.csv").rows]
    pos, neg = separation(MONet.load(pre)[0], run)
    print(f"pretrain: val rank loss {val[0]:.3f} -> {val[-1]:.3f}, held-out pos {pos:.3f} neg {neg:.3f} "
          f"(gap {pos - neg:.3f}), {pre_cpu / 60:.1f} CPU-min")

    model_path = cmd_train(replace(run, checkpoint=str(pre)))
    report = evaluate_model(MONet.load(model_path)[0], held_out_samples(run), run.threshold)
    write_text(Path(run.out) / "report.json", report.to_json())
    print(f"held-out: pixel MCC {report.pixel_mcc:.3f}, image MCC {report.image_mcc:.3f}")


if __name__ == "__main__":
    main()
