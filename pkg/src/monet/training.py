"""Ranking and mask losses, triplet pretraining and end-to-end training."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .evaluation import evaluate_pixel
from .network import MONet, binarize
from .pyramid import ScaleConfig, overlap_tables
from .search import pipeline_backward, run_pipeline
from .synth import AnnotationTemplate, SyntheticSample, Triplet, sample_triplets
from .tensor import Adam

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


# -------------------------------------------------------------------- losses

def margin_rank_loss(x1, x2, m):
    """``max(0, (x2 - x1) + m)``, elementwise."""
    return np.maximum(0.0, (np.asarray(x2, dtype=np.float64) - x1) + m)


def margin_rank_grad(x1, x2, m):
    """Subgradients ``(d/dx1, d/dx2)``; zero on the flat side including the kink."""
    active = ((np.asarray(x2, dtype=np.float64) - x1) + m > 0).astype(np.float64)
    return -active, active


def flexible_margin(o_plus, o_minus, d):
    """``(o_plus - o_minus) / d^2``."""
    o_plus = np.asarray(o_plus)
    o_minus = np.asarray(o_minus)
    if np.any(o_plus <= o_minus):
        raise ValueError("flexible margin needs o_plus > o_minus")
    if np.any(o_minus < 0) or np.any(o_plus > np.asarray(d) ** 2):
        raise ValueError("overlaps must lie in [0, d^2]")
    out = (o_plus - o_minus) / (np.asarray(d, dtype=np.float64) ** 2)
    return float(out) if out.ndim == 0 else out


def flexible_margin_loss(x1, x2, o_plus, o_minus, d):
    return margin_rank_loss(x1, x2, flexible_margin(o_plus, o_minus, d))


def bce_loss(prob, target, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    prob = np.asarray(prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prob.shape != target.shape:
        raise ValueError(f"probability shape {prob.shape} != target shape {target.shape}")
    p = np.clip(prob, eps, 1.0 - eps)
    return float(np.mean(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))))


def bce_grad(prob, target, eps: float = BCE_EPS) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = np.clip(prob, eps, 1.0 - eps)
    g = (-(target / p) + (1.0 - target) / (1.0 - p)) / prob.size
    g[(prob < eps) | (prob > 1.0 - eps)] = 0.0
    return g


# -------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    margin: float = 0.5
    margin_mode: str = "regular"
    pretrain_epochs: int = 25
    e2e_epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    bce_weight: float = 1.0
    rank_weight: float = 1.0
    triplets_per_sample: int = 8
    min_overlap_frac: float = 0.25
    e2e_lr: float | None = None  # None: same as lr
    e2e_decoder_lr: float | None = None  # the decoder starts untrained; None: same as e2e_lr
    pretrain_negatives: int = 1  # >1 keeps the hardest of that many uniform negative draws
    e2e_negatives: int = 1

    def __post_init__(self):
        if self.margin_mode not in ("regular", "flexible"):
            raise ValueError(f"margin_mode must be regular or flexible, got {self.margin_mode}")
        if self.pretrain_epochs < 0 or self.e2e_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("e2e_lr", "e2e_decoder_lr"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.pretrain_negatives < 1 or self.e2e_negatives < 1:
            raise ValueError("negative draws per triplet must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# ------------------------------------------------------------------- metrics

METRIC_COLUMNS = ("epoch", "phase", "rank_loss", "bce_loss", "val_rank_loss", "val_pixel_mcc")


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k) for k in METRIC_COLUMNS})

    def column(self, name: str, phase: str | None = None) -> list:
        return [r[name] for r in self.rows if phase is None or r["phase"] == phase]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if v is None else (f"{v:.8g}" if isinstance(v, float) else v)) for k, v in r.items()})
        return buf.getvalue()


# ------------------------------------------------------------------ triplets

@dataclass
class TripletItem:
    """One sample together with its triplets per scale."""

    sample: SyntheticSample
    triplets: dict[int, list[Triplet]]


def make_triplet_items(samples: Sequence[SyntheticSample], cfg: ScaleConfig, per_sample: int,
                       seed: int, min_overlap_frac: float = 0.25) -> list[TripletItem]:
    rng = np.random.default_rng(seed)
    items = []
    for smp in samples:
        if smp.template is None:
            continue
        trip = {s: sample_triplets(smp.template, cfg, s, per_sample, rng, min_overlap_frac) for s in cfg.scales}
        items.append(TripletItem(smp, trip))
    if not items:
        raise ValueError("no manipulated samples to draw triplets from")
    return items


def _triplet_pairs(trips: list[Triplet]):
    """Detector index pairs (image-1 index, image-2 index) for positives and negatives."""
    t = np.array([(x.anchor_image, x.anchor, x.positive, x.negative) for x in trips], dtype=np.int64)
    img, a, p, n = t.T
    from1 = img == 1
    i_pos = np.where(from1, a, p)
    j_pos = np.where(from1, p, a)
    i_neg = np.where(from1, a, n)
    j_neg = np.where(from1, n, a)
    return np.concatenate([i_pos, i_neg]), np.concatenate([j_pos, j_neg])


def _margins(trips: list[Triplet], cfg: ScaleConfig, tc: TrainConfig) -> np.ndarray:
    if tc.margin_mode == "regular":
        return np.full(len(trips), tc.margin)
    s = trips[0].scale
    return flexible_margin([t.o_plus for t in trips], [t.o_minus for t in trips], cfg.patch_dim(s))


def ranking_terms(model: MONet, feats: dict[int, np.ndarray], triplets: dict[int, list[Triplet]],
                  tc: TrainConfig, with_grad: bool = True, grad_scale: float = 1.0):
    """Mean ranking loss per scale (summed over scales) and feature gradients.

    ``feats[s]`` is the ``(2, C, G, G)`` pair of feature maps. Detector
    parameter grads are accumulated in place, scaled by ``grad_scale``.
    """
    total = 0.0
    dfeats = {}
    scores = {}
    for s, trips in triplets.items():
        if not trips:
            continue
        f = feats[s]
        c = f.shape[1]
        f1 = f[0].reshape(c, -1).T
        f2 = f[1].reshape(c, -1).T
        i, j = _triplet_pairs(trips)
        det = model.detectors[s]
        out, cache = det.score_pairs(f1, f2, i, j)
        k = len(trips)
        x1, x2 = out[:k], out[k:]
        m = _margins(trips, model.cfg, tc)
        total += float(np.mean(margin_rank_loss(x1, x2, m)))
        scores[s] = (x1, x2)
        if with_grad:
            g1, g2 = margin_rank_grad(x1, x2, m)
            d1, d2 = det.backward(cache, np.concatenate([g1, g2]) * (grad_scale / k))
            dfeats[s] = np.stack([d1.T.reshape(f[0].shape), d2.T.reshape(f[1].shape)])
    return total, dfeats, scores


def mine_negatives(model: MONet, feats: dict[int, np.ndarray], template: AnnotationTemplate,
                   triplets: dict[int, list[Triplet]], k: int, rng: np.random.Generator) -> dict[int, list[Triplet]]:
    """Swap each negative for the highest-scoring of ``k`` uniform draws from its pool.

    The pool is the same as for uniform sampling (other-image patches with
    less overlap than the positive), so the triplet invariant is kept. Score
    maps take a max over many candidates, and uniform negatives rarely probe
    the high-scoring tail that this max picks up.
    """
    if k <= 1:
        return triplets
    cfg = model.cfg
    out = {}
    for s, trips in triplets.items():
        if not trips:
            out[s] = trips
            continue
        g = cfg.grid_size(s)
        ox, oy = overlap_tables(template.correspondence, cfg, s)
        f = feats[s]
        c = f.shape[1]
        f1, f2 = f[0].reshape(c, -1).T, f[1].reshape(c, -1).T
        draws = []
        for t in trips:
            r, col = divmod(t.anchor, g)
            ov = np.outer(oy[r], ox[col]) if t.anchor_image == 1 else np.outer(oy[:, r], ox[:, col])
            ov = ov.ravel()
            pool = np.flatnonzero(ov < t.o_plus)
            pick = pool if pool.size <= k else rng.choice(pool, size=k, replace=False)
            draws.append((pick, ov[pick]))
        anchors = np.concatenate([np.full(p.size, t.anchor) for t, (p, _) in zip(trips, draws)])
        others = np.concatenate([p for p, _ in draws])
        first = np.concatenate([np.full(p.size, t.anchor_image == 1) for t, (p, _) in zip(trips, draws)])
        scores, _ = model.detectors[s].score_pairs(f1, f2, np.where(first, anchors, others),
                                                   np.where(first, others, anchors))
        mined, at = [], 0
        for t, (pick, ov) in zip(trips, draws):
            best = at + int(np.argmax(scores[at:at + pick.size]))
            mined.append(t._replace(negative=int(others[best]), o_minus=int(ov[best - at])))
            at += pick.size
        out[s] = mined
    return out


def _encode_pair(model: MONet, smp: SyntheticSample):
    images = np.stack([smp.image1.transpose(2, 0, 1), smp.image2.transpose(2, 0, 1)])
    return model.encoder.forward(images)


def triplet_scores(model: MONet, items: Sequence[TripletItem], tc: TrainConfig):
    """Held-out ranking loss and all (positive, negative) detector scores."""
    losses, pos, neg = [], [], []
    for it in items:
        feats, _ = _encode_pair(model, it.sample)
        loss, _, sc = ranking_terms(model, feats, it.triplets, tc, with_grad=False)
        losses.append(loss)
        for x1, x2 in sc.values():
            pos.append(x1)
            neg.append(x2)
    return float(np.mean(losses)), np.concatenate(pos), np.concatenate(neg)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[k:k + size] for k in range(0, n, size)]


def pretrain(model: MONet, items: Sequence[TripletItem], tc: TrainConfig,
             val_items: Sequence[TripletItem] | None = None, log_: MetricsLog | None = None,
             start_epoch: int = 0, on_epoch: Callable[[int, MetricsLog], None] | None = None) -> MetricsLog:
    """Train encoder and detectors jointly on triplets with the ranking loss."""
    if not items:
        raise ValueError("empty triplet stream")
    log_ = log_ if log_ is not None else MetricsLog()
    params = {k: t for k, t in model.params().items() if not k.startswith("decoder.")}
    opt = Adam(params, lr=tc.lr)
    rng = np.random.default_rng(tc.seed)
    for epoch in range(start_epoch + 1, start_epoch + tc.pretrain_epochs + 1):
        losses = []
        for batch in _batches(len(items), tc.batch_size, rng):
            opt.zero_grad()
            for idx in batch:
                it = items[idx]
                feats, caches = _encode_pair(model, it.sample)
                trips = mine_negatives(model, feats, it.sample.template, it.triplets, tc.pretrain_negatives, rng)
                loss, dfeats, _ = ranking_terms(model, feats, trips, tc, grad_scale=1.0 / len(batch))
                model.encoder.backward(caches, dfeats)
                losses.append(loss)
            opt.step()
        val = triplet_scores(model, val_items, tc)[0] if val_items else None
        log_.add(epoch=epoch, phase="pretrain", rank_loss=float(np.mean(losses)), val_rank_loss=val)
        log.info("pretrain epoch %d rank %.4f val %s", epoch, np.mean(losses), val)
        if on_epoch:
            on_epoch(epoch, log_)
    return log_


# ---------------------------------------------------------------- end to end

def predict(model: MONet, smp: SyntheticSample, threshold: float = 0.5):
    out = run_pipeline(model, smp.image1, smp.image2)
    return binarize(out.prob1, threshold), binarize(out.prob2, threshold), out


def pixel_mcc(model: MONet, samples: Sequence[SyntheticSample], threshold: float = 0.5) -> float:
    preds, gts = [], []
    for smp in samples:
        m1, m2, _ = predict(model, smp, threshold)
        preds += [m1, m2]
        gts += [smp.mask1, smp.mask2]
    return evaluate_pixel(preds, gts)[1]


def train_end_to_end(model: MONet, samples: Sequence[SyntheticSample] | Callable[[int], Sequence[SyntheticSample]],
                     tc: TrainConfig,
                     val_samples: Sequence[SyntheticSample] | None = None, log_: MetricsLog | None = None,
                     pretrained: bool = True, start_epoch: int = 0,
                     on_epoch: Callable[[int, MetricsLog], None] | None = None) -> MetricsLog:
    """BCE on both masks plus the ranking loss on triplets from each manipulated pair.

    ``samples`` is either a fixed list or a function of the epoch number that
    returns that epoch's pairs (fresh synthetic pairs every epoch).
    """
    stream = samples if callable(samples) else (lambda epoch: samples)
    if not callable(samples) and not samples:
        raise ValueError("empty sample stream")
    if not pretrained:
        log.warning("end-to-end training from an unpretrained model")
    log_ = log_ if log_ is not None else MetricsLog()
    cfg = model.cfg
    lr = tc.lr if tc.e2e_lr is None else tc.e2e_lr
    params = model.params()
    opts = [Adam({k: t for k, t in params.items() if not k.startswith("decoder.")}, lr=lr),
            Adam({k: t for k, t in params.items() if k.startswith("decoder.")},
                 lr=lr if tc.e2e_decoder_lr is None else tc.e2e_decoder_lr)]
    rng = np.random.default_rng(tc.seed + 1)
    for epoch in range(start_epoch + 1, start_epoch + tc.e2e_epochs + 1):
        bces, ranks = [], []
        samples = stream(epoch)
        if not samples:
            raise ValueError(f"empty sample stream at epoch {epoch}")
        for batch in _batches(len(samples), tc.batch_size, rng):
            model.zero_grad()
            for idx in batch:
                smp = samples[idx]
                out = run_pipeline(model, smp.image1, smp.image2)
                bce = 0.5 * (bce_loss(out.prob1, smp.mask1) + bce_loss(out.prob2, smp.mask2))
                w = tc.bce_weight * 0.5 / len(batch)
                dfeats = None
                rank = 0.0
                if smp.template is not None and tc.rank_weight:
                    trips = {s: sample_triplets(smp.template, cfg, s, tc.triplets_per_sample, rng,
                                                tc.min_overlap_frac) for s in cfg.scales}
                    trips = mine_negatives(model, out.features, smp.template, trips, tc.e2e_negatives, rng)
                    rank, dfeats, _ = ranking_terms(model, out.features, trips, tc,
                                                    grad_scale=tc.rank_weight / len(batch))
                pipeline_backward(model, out, w * bce_grad(out.prob1, smp.mask1),
                                  w * bce_grad(out.prob2, smp.mask2), dfeats)
                bces.append(bce)
                ranks.append(rank)
            for opt in opts:
                opt.step()
        val = pixel_mcc(model, val_samples) if val_samples else None
        log_.add(epoch=epoch, phase="e2e", rank_loss=float(np.mean(ranks)), bce_loss=float(np.mean(bces)),
                 val_pixel_mcc=val)
        log.info("e2e epoch %d bce %.4f rank %.4f val mcc %s", epoch, np.mean(bces), np.mean(ranks), val)
        if on_epoch:
            on_epoch(epoch, log_)
    return log_
