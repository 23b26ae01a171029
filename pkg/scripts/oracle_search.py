"""Hierarchical search with the exact overlap in place of the detector, against exhaustive search.

    python scripts/oracle_search.py [--count 100] [--align 8] [--seed 0]

With ``--align 1`` (unaligned copies) some full-overlap bottom pairs sit
under a parent whose best partner is another patch and are missed; the
script reports how many.
"""
import argparse

from monet.pyramid import DESK_CONFIG
from monet.search import exhaustive_full_overlaps, hierarchical_search, oracle_scorer
from monet.synth import make_templates


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=100)
    ap.add_argument("--align", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = DESK_CONFIG
    exact = missed = total = 0
    for t in make_templates(cfg, args.count, seed=args.seed, align=args.align):
        score = oracle_scorer(t.correspondence, cfg)
        _, used = hierarchical_search(cfg, score)
        cand = used[cfg.min_scale]
        hit = score(cand) == 1.0
        found = set(zip(cand.idx1[hit].tolist(), cand.idx2[hit].tolist()))
        truth = exhaustive_full_overlaps(t.correspondence, cfg, cfg.min_scale)
        exact += found == truth
        missed += len(truth - found)
        total += len(truth)
    print(f"{exact}/{args.count} templates exact; {missed}/{total} full-overlap bottom pairs missed")


if __name__ == "__main__":
    main()
