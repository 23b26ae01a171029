"""Structured hierarchical search and the full forward/backward pipeline."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import (
    CandidateSet,
    MONet,
    OverlapScoreMap,
    build_score_maps,
    reduce_scores,
    score_maps_backward,
)
from .pyramid import (
    ComparisonLedger,
    DuplicationCorrespondence,
    ScaleConfig,
    naive_budget,
    ours_budget,
    overlap_tables,
)
from .tensor import ShapeError


def top_scale_candidates(cfg: ScaleConfig) -> CandidateSet:
    g = cfg.grid_size(cfg.top_scale)
    n = g * g
    idx1, idx2 = np.divmod(np.arange(n * n, dtype=np.int64), n)
    return CandidateSet(cfg.top_scale, idx1, idx2)


def _child_indices(flat: np.ndarray, g: int) -> np.ndarray:
    """``(len(flat), 4)`` flat child indices on the ``2g`` grid."""
    r, c = np.divmod(flat, g)
    r2, c2 = 2 * r, 2 * c
    cg = 2 * g
    return np.stack([r2 * cg + c2, r2 * cg + c2 + 1, (r2 + 1) * cg + c2, (r2 + 1) * cg + c2 + 1], axis=1)


def expand_pair(p1: np.ndarray, p2: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    """All 16 child pairs of each parent pair, parent-major."""
    k1 = _child_indices(np.asarray(p1, dtype=np.int64), g)
    k2 = _child_indices(np.asarray(p2, dtype=np.int64), g)
    a = np.repeat(k1, 4, axis=1).reshape(-1)
    b = np.tile(k2, (1, 4)).reshape(-1)
    return a, b


def propagate(smap: OverlapScoreMap, cfg: ScaleConfig) -> CandidateSet:
    """Children of every per-image argmax pair at scale ``s``, for scale ``s - 1``.

    Image-1 direction first, then image-2 direction; pairs chosen by both
    directions are emitted twice.
    """
    s = smap.scale
    if s <= cfg.min_scale:
        raise ValueError(f"cannot propagate below min scale {cfg.min_scale}")
    g = cfg.grid_size(s)
    if np.any(smap.partner1 < 0) or np.any(smap.partner2 < 0):
        raise ValueError(f"scale {s}: patch without an argmax partner; search coverage broken")
    own = np.arange(g * g, dtype=np.int64)
    a1, b1 = expand_pair(own, smap.partner1, g)
    a2, b2 = expand_pair(smap.partner2, own, g)
    return CandidateSet(s - 1, np.concatenate([a1, a2]), np.concatenate([b1, b2]))


def hierarchical_search(cfg: ScaleConfig, score_fn: Callable[[CandidateSet], np.ndarray],
                        ledger: ComparisonLedger | None = None):
    """Run the coarse-to-fine search with an arbitrary pair scorer.

    ``score_fn(candidates)`` returns one score per candidate pair. Returns
    ``(maps, candidates)`` keyed by scale.
    """
    maps: dict[int, OverlapScoreMap] = {}
    used: dict[int, CandidateSet] = {}
    for s in cfg.scales:
        cand = top_scale_candidates(cfg) if s == cfg.top_scale else propagate(maps[s + 1], cfg)
        if ledger is not None:
            ledger.record(s, len(cand))
        used[s] = cand
        maps[s] = reduce_scores(cand, score_fn(cand), cfg.grid_size(s))
    return maps, used


def oracle_scorer(corr: DuplicationCorrespondence, cfg: ScaleConfig) -> Callable[[CandidateSet], np.ndarray]:
    """Exact overlap fraction ``o / d^2`` in place of the learned detector."""
    tables = {s: overlap_tables(corr, cfg, s) for s in cfg.scales}

    def score(cand: CandidateSet) -> np.ndarray:
        s = cand.scale
        g, d = cfg.grid_size(s), cfg.patch_dim(s)
        ox, oy = tables[s]
        r1, c1 = np.divmod(cand.idx1, g)
        r2, c2 = np.divmod(cand.idx2, g)
        return ox[c1, c2] * oy[r1, r2] / float(d * d)

    return score


def exhaustive_full_overlaps(corr: DuplicationCorrespondence, cfg: ScaleConfig, s: int) -> set[tuple[int, int]]:
    """All (image-1, image-2) flat index pairs at scale ``s`` whose overlap is a whole patch."""
    g, d = cfg.grid_size(s), cfg.patch_dim(s)
    ox, oy = overlap_tables(corr, cfg, s)
    full = np.multiply.outer(oy, ox) == d * d  # indexed [r1, r2, c1, c2]
    r1, r2, c1, c2 = np.nonzero(full)
    return set(zip((r1 * g + c1).tolist(), (r2 * g + c2).tolist()))


@dataclass
class PipelineOutput:
    score_maps: dict[int, OverlapScoreMap]
    prob1: np.ndarray  # N x N
    prob2: np.ndarray
    ledger: ComparisonLedger
    features: dict[int, np.ndarray] = field(repr=False)  # {s: (2, C, G, G)}
    candidates: dict[int, CandidateSet] = field(repr=False)
    trace: tuple = field(repr=False, default=None)


def _as_chw(image: np.ndarray, n: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (n, n, 3):
        raise ShapeError(f"expected {n}x{n}x3 image, got {image.shape}")
    return image.transpose(2, 0, 1)


def run_pipeline(model: MONet, image1: np.ndarray, image2: np.ndarray,
                 candidates: dict[int, CandidateSet] | None = None) -> PipelineOutput:
    """encode -> top-scale all-pairs -> {propagate, score} per scale -> decode.

    ``candidates`` freezes the candidate set per scale (used by gradient
    checks); by default the search decides them.
    """
    cfg = model.cfg
    if set(model.detectors) != set(cfg.scales):
        raise ValueError("model detectors do not match its scale config")
    images = np.stack([_as_chw(image1, cfg.image_size), _as_chw(image2, cfg.image_size)])
    feats, enc_cache = model.encoder.forward(images)
    ledger = ComparisonLedger()
    maps: dict[int, OverlapScoreMap] = {}
    map_caches = {}
    used: dict[int, CandidateSet] = {}
    for s in cfg.scales:
        if candidates:
            cand = candidates[s]
        else:
            cand = top_scale_candidates(cfg) if s == cfg.top_scale else propagate(maps[s + 1], cfg)
        used[s] = cand
        maps[s], map_caches[s] = build_score_maps(model.detectors[s], feats[s][0], feats[s][1], cand, ledger)
    batch = {s: np.stack([m.o1, m.o2])[:, None] for s, m in maps.items()}
    probs, dec_cache = model.decoder.forward(batch)
    return PipelineOutput(maps, probs[0, 0], probs[1, 0], ledger, feats, used,
                          trace=(enc_cache, map_caches, dec_cache))


def pipeline_backward(model: MONet, out: PipelineOutput, dprob1: np.ndarray | None, dprob2: np.ndarray | None,
                      dfeats: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Accumulate parameter gradients for upstream grads on the probability maps.

    ``dfeats`` adds extra gradients on the ``(2, C, G, G)`` feature maps
    (the ranking loss during end-to-end training). Returns the gradient
    on the stacked ``(2, 3, N, N)`` input images.
    """
    enc_cache, map_caches, dec_cache = out.trace
    n = model.cfg.image_size
    dprobs = np.zeros((2, 1, n, n))
    if dprob1 is not None:
        dprobs[0, 0] = dprob1
    if dprob2 is not None:
        dprobs[1, 0] = dprob2
    dmaps = model.decoder.backward(dec_cache, dprobs)
    dF = {s: np.array(v, copy=True) for s, v in (dfeats or {}).items()}
    for s, smap in out.score_maps.items():
        d = dmaps[s]
        d1, d2 = score_maps_backward(model.detectors[s], smap, map_caches[s], d[0, 0], d[1, 0])
        g = np.stack([d1, d2])
        dF[s] = dF[s] + g if s in dF else g
    return model.encoder.backward(enc_cache, dF)


# -------------------------------------------------------------------- budget

@dataclass
class BudgetRow:
    scale: int
    patch_dim: int
    naive: int
    ours: int
    executed: int | None = None

    @property
    def ok(self) -> bool:
        return self.executed is None or self.executed == self.ours


@dataclass
class BudgetReport:
    rows: list[BudgetRow]

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def failures(self) -> list[int]:
        return [r.scale for r in self.rows if not r.ok]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        has_exec = any(r.executed is not None for r in self.rows)
        w.writerow(["scale", "patch_dim", "naive", "ours"] + (["executed", "status"] if has_exec else []))
        for r in self.rows:
            row = [r.scale, f"{r.patch_dim}x{r.patch_dim}", r.naive, r.ours]
            if has_exec:
                row += [r.executed, "pass" if r.ok else "FAIL"]
            w.writerow(row)
        return buf.getvalue()

    def to_text(self) -> str:
        has_exec = any(r.executed is not None for r in self.rows)
        head = f"{'scale':>5}  {'patch':>7}  {'naive':>13}  {'ours':>9}"
        if has_exec:
            head += f"  {'executed':>9}  status"
        lines = [head]
        for r in self.rows:
            line = f"{r.scale:>5}  {f'{r.patch_dim}x{r.patch_dim}':>7}  {r.naive:>13,}  {r.ours:>9,}"
            if has_exec:
                line += f"  {r.executed:>9,}  {'pass' if r.ok else 'FAIL'}"
            lines.append(line)
        return "\n".join(lines)


def budget_table(cfg: ScaleConfig) -> BudgetReport:
    return BudgetReport([BudgetRow(s, cfg.patch_dim(s), naive_budget(cfg, s), ours_budget(cfg, s))
                         for s in cfg.scales])


def verify_budget(ledger: ComparisonLedger, cfg: ScaleConfig) -> BudgetReport:
    report = budget_table(cfg)
    for r in report.rows:
        r.executed = ledger[r.scale]
    return report


def parse_budget_csv(text: str) -> list[dict[str, int]]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({k: int(rec[k]) for k in ("scale", "naive", "ours")})
    return rows
