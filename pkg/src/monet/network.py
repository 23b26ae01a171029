"""Learned parts of MONet: encoder, overlap detectors, score maps, gated decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse

from .pyramid import ComparisonLedger, ScaleConfig
from .tensor import (
    ConcatChannels,
    Conv2d,
    Dense,
    ReLU,
    Sequential,
    ShapeError,
    Sigmoid,
    Tensor,
    Upsample2x,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)


class Mode(str, Enum):
    FULL = "full"
    NO_GATING = "no_gating"
    DOT_PRODUCT = "dot_product"


# ------------------------------------------------------------------- encoder

class Encoder:
    """Per scale: stride-2 3x3 conv + ReLU, then 3x3 conv + ReLU."""

    def __init__(self, cfg: ScaleConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stages: dict[int, Sequential] = {}
        cin = 3
        for s in range(1, cfg.top_scale + 1):
            c = cfg.channels(s)
            self.stages[s] = Sequential([
                (f"scale{s}.conv1", Conv2d(cin, c, 3, stride=2, rng=rng)),
                (f"scale{s}.relu1", ReLU()),
                (f"scale{s}.conv2", Conv2d(c, c, 3, stride=1, rng=rng)),
                (f"scale{s}.relu2", ReLU()),
            ])
            cin = c

    def params(self) -> dict[str, Tensor]:
        out = {}
        for stage in self.stages.values():
            out.update(stage.params())
        return out

    def forward(self, images: np.ndarray):
        """``images`` is ``(B, 3, N, N)``; returns ``({s: (B, C_s, G_s, G_s)}, caches)``."""
        n = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (3, n, n):
            raise ShapeError(f"encoder expects (B, 3, {n}, {n}) images, got {images.shape}")
        feats, caches = {}, {}
        x = images
        for s, stage in self.stages.items():
            x, caches[s] = stage.forward(x)
            feats[s] = x
        return feats, caches

    def backward(self, caches, dfeats: dict[int, np.ndarray]) -> np.ndarray:
        g = None
        for s in sorted(self.stages, reverse=True):
            d = dfeats.get(s)
            if d is not None:
                g = d if g is None else g + d
            if g is None:
                continue
            g = self.stages[s].backward(caches[s], g)
        return g


def encode(encoder: Encoder, image: np.ndarray) -> dict[int, np.ndarray]:
    """Feature maps ``{s: (G_s, G_s, C_s)}`` for one ``N x N x 3`` image."""
    image = np.asarray(image, dtype=np.float64)
    feats, _ = encoder.forward(image.transpose(2, 0, 1)[None])
    return {s: f[0].transpose(1, 2, 0) for s, f in feats.items()}


# ------------------------------------------------------------------ detector

def scatter_rows(index: np.ndarray, rows: np.ndarray, size: int) -> np.ndarray:
    """``out[index[k]] += rows[k]``, done as a sparse matmul."""
    sel = sparse.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(size, index.size))
    return np.asarray(sel @ rows)


class OverlapDetector:
    """``sigmoid(W2 relu(W1 [f1; f2] + b1) + b2)`` evaluated over index pairs.

    ``W1`` is split into the halves acting on ``f1`` and ``f2`` so the first
    layer costs one matmul per patch instead of one per pair.
    """

    kind = "mlp"

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.channels = channels
        self.fc1 = Dense(2 * channels, hidden, rng=rng)
        self.fc2 = Dense(hidden, 1, rng=rng)

    def params(self) -> dict[str, Tensor]:
        return {"fc1.weight": self.fc1.weight, "fc1.bias": self.fc1.bias,
                "fc2.weight": self.fc2.weight, "fc2.bias": self.fc2.bias}

    def score_pairs(self, f1: np.ndarray, f2: np.ndarray, i: np.ndarray, j: np.ndarray):
        c = self.channels
        if f1.shape[1] != c or f2.shape[1] != c:
            raise ShapeError(f"detector expects {c}-dim features, got {f1.shape[1]} and {f2.shape[1]}")
        w1 = self.fc1.weight.data
        a = f1 @ w1[:, :c].T
        b = f2 @ w1[:, c:].T
        z = a[i] + b[j] + self.fc1.bias.data
        h = np.maximum(z, 0.0)
        y = h @ self.fc2.weight.data[0] + self.fc2.bias.data[0]
        s = sigmoid(y)
        return s, (f1, f2, i, j, z, h, s)

    def backward(self, cache, dscores: np.ndarray):
        f1, f2, i, j, z, h, s = cache
        c = self.channels
        dy = dscores * s * (1.0 - s)
        self.fc2.weight.grad[0] += dy @ h
        self.fc2.bias.grad[0] += dy.sum()
        dz = np.outer(dy, self.fc2.weight.data[0]) * (z > 0)
        self.fc1.bias.grad += dz.sum(axis=0)
        da = scatter_rows(i, dz, f1.shape[0])
        db = scatter_rows(j, dz, f2.shape[0])
        w1 = self.fc1.weight.data
        self.fc1.weight.grad[:, :c] += da.T @ f1
        self.fc1.weight.grad[:, c:] += db.T @ f2
        return da @ w1[:, :c], db @ w1[:, c:]


class DotProductDetector:
    """Ablation: ``sigmoid(f1 . f2)``, no parameters."""

    kind = "dot_product"

    def __init__(self, channels: int):
        self.channels = channels

    def params(self) -> dict[str, Tensor]:
        return {}

    def score_pairs(self, f1, f2, i, j):
        if f1.shape[1] != self.channels or f2.shape[1] != self.channels:
            raise ShapeError(f"detector expects {self.channels}-dim features, got {f1.shape[1]} and {f2.shape[1]}")
        s = sigmoid(np.einsum("pc,pc->p", f1[i], f2[j]))
        return s, (f1, f2, i, j, s)

    def backward(self, cache, dscores):
        f1, f2, i, j, s = cache
        dy = (dscores * s * (1.0 - s))[:, None]
        return scatter_rows(i, dy * f2[j], f1.shape[0]), scatter_rows(j, dy * f1[i], f2.shape[0])


def detect_overlap(detector, f1: np.ndarray, f2: np.ndarray) -> float:
    f1 = np.asarray(f1, dtype=np.float64).reshape(1, -1)
    f2 = np.asarray(f2, dtype=np.float64).reshape(1, -1)
    if f1.shape != f2.shape:
        raise ShapeError(f"feature length mismatch: {f1.shape[1]} vs {f2.shape[1]}")
    s, _ = detector.score_pairs(f1, f2, np.array([0]), np.array([0]))
    return float(s[0])


# ---------------------------------------------------------------- score maps

@dataclass
class CandidateSet:
    """Pairs of flat patch indices (image 1, image 2) at one scale."""

    scale: int
    idx1: np.ndarray
    idx2: np.ndarray

    def __post_init__(self):
        self.idx1 = np.asarray(self.idx1, dtype=np.int64)
        self.idx2 = np.asarray(self.idx2, dtype=np.int64)
        if self.idx1.shape != self.idx2.shape:
            raise ValueError("candidate index arrays differ in length")

    def __len__(self) -> int:
        return int(self.idx1.size)

    def pairs(self, grid: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [((int(a) // grid, int(a) % grid), (int(b) // grid, int(b) % grid))
                for a, b in zip(self.idx1, self.idx2)]


@dataclass
class OverlapScoreMap:
    scale: int
    o1: np.ndarray
    o2: np.ndarray
    partner1: np.ndarray  # flat partner index in image 2 per image-1 patch, -1 if never compared
    partner2: np.ndarray
    arg1: np.ndarray = field(repr=False)  # index into the candidate list of the winning pair
    arg2: np.ndarray = field(repr=False)


def _reduce_max(keys: np.ndarray, partners: np.ndarray, scores: np.ndarray, size: int):
    """Per key: max score, winning partner (lowest index on ties), and winning pair position."""
    best = np.zeros(size)
    partner = np.full(size, -1, dtype=np.int64)
    arg = np.full(size, -1, dtype=np.int64)
    if keys.size == 0:
        return best, partner, arg
    order = np.lexsort((partners, -scores, keys))
    ks = keys[order]
    first = np.ones(ks.size, dtype=bool)
    first[1:] = ks[1:] != ks[:-1]
    win = order[first]
    best[keys[win]] = scores[win]
    partner[keys[win]] = partners[win]
    arg[keys[win]] = win
    return best, partner, arg


def build_score_maps(detector, f1: np.ndarray, f2: np.ndarray, candidates: CandidateSet,
                     ledger: ComparisonLedger | None = None):
    """Score every candidate pair once and max-reduce per patch.

    ``f1``/``f2`` are ``(C, G, G)`` feature maps. Returns ``(map, cache)``.
    """
    c, g, _ = f1.shape
    if f2.shape != f1.shape:
        raise ShapeError(f"feature maps differ: {f1.shape} vs {f2.shape}")
    if candidates.idx1.size and (candidates.idx1.max() >= g * g or candidates.idx2.max() >= g * g
                                 or min(candidates.idx1.min(), candidates.idx2.min()) < 0):
        raise IndexError(f"candidate index outside {g}x{g} grid at scale {candidates.scale}")
    flat1 = f1.reshape(c, -1).T
    flat2 = f2.reshape(c, -1).T
    scores, det_cache = detector.score_pairs(flat1, flat2, candidates.idx1, candidates.idx2)
    if ledger is not None:
        ledger.record(candidates.scale, len(candidates))
    return reduce_scores(candidates, scores, g), (det_cache, scores.size, (c, g))


def reduce_scores(candidates: CandidateSet, scores: np.ndarray, g: int) -> OverlapScoreMap:
    """Max-reduce one score per candidate pair into the two per-image maps."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != candidates.idx1.shape:
        raise ShapeError(f"{scores.size} scores for {len(candidates)} candidate pairs")
    o1, p1, a1 = _reduce_max(candidates.idx1, candidates.idx2, scores, g * g)
    o2, p2, a2 = _reduce_max(candidates.idx2, candidates.idx1, scores, g * g)
    return OverlapScoreMap(candidates.scale, o1.reshape(g, g), o2.reshape(g, g), p1, p2, a1, a2)


def score_maps_backward(detector, smap: OverlapScoreMap, cache, do1: np.ndarray, do2: np.ndarray):
    """Route map gradients to the winning pairs only; returns ``(df1, df2)`` as ``(C, G, G)``."""
    det_cache, n, (c, g) = cache
    dscores = np.zeros(n)
    m1 = smap.arg1 >= 0
    np.add.at(dscores, smap.arg1[m1], do1.reshape(-1)[m1])
    m2 = smap.arg2 >= 0
    np.add.at(dscores, smap.arg2[m2], do2.reshape(-1)[m2])
    d1, d2 = detector.backward(det_cache, dscores)
    return d1.T.reshape(c, g, g), d2.T.reshape(c, g, g)


# ------------------------------------------------------------------- decoder

class GateUnit:
    """``sigmoid(conv1x1(prev_up))``: one gate value per pixel."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.net = Sequential([("conv", Conv2d(channels, 1, 1, rng=rng)), ("sigmoid", Sigmoid())])

    def params(self) -> dict[str, Tensor]:
        return self.net.params()


_concat = ConcatChannels()


def gated_fuse(gate: GateUnit | None, prev_up: np.ndarray, current: np.ndarray):
    """``concat(prev_up, g * current)``, or a plain concat when ``gate`` is None.

    Returns ``(fused, cache)``.
    """
    if prev_up.shape[0] != current.shape[0] or prev_up.shape[2:] != current.shape[2:]:
        raise ShapeError(f"gated_fuse: spatial mismatch {prev_up.shape} vs {current.shape}")
    if gate is None:
        fused, _ = _concat.forward([prev_up, current])
        return fused, (None, None, prev_up.shape[1])
    g, gcache = gate.net.forward(prev_up)
    fused, _ = _concat.forward([prev_up, g * current])
    return fused, ((g, gcache), current, prev_up.shape[1])


def gated_fuse_backward(gate: GateUnit | None, cache, dfused: np.ndarray):
    gate_state, current, w = cache
    dprev = dfused[:, :w]
    dcur = dfused[:, w:]
    if gate is None:
        return dprev, dcur
    g, gcache = gate_state
    dg = np.sum(dcur * current, axis=1, keepdims=True)
    dprev = dprev + gate.net.backward(gcache, dg)
    return dprev, dcur * g


class Decoder:
    """Upsamples per-image score maps into a full-resolution probability map.

    Both images run through the same weights as a batch of two; each image's
    branch only ever sees its own score maps.
    """

    def __init__(self, cfg: ScaleConfig, width: int, gating: bool, rng: np.random.Generator):
        self.cfg = cfg
        self.width = width
        self.gating = gating
        self.stem = Sequential([("stem.conv", Conv2d(1, width, 3, rng=rng)), ("stem.relu", ReLU())])
        self.up: dict[int, Sequential] = {}
        self.gates: dict[int, GateUnit] = {}
        self.blocks: dict[int, Sequential] = {}
        for s in cfg.scales[1:]:
            self.up[s] = Sequential([
                (f"scale{s}.up", Upsample2x()),
                (f"scale{s}.deconv", Conv2d(width, width, 3, rng=rng)),
                (f"scale{s}.deconv_relu", ReLU()),
            ])
            if gating:
                self.gates[s] = GateUnit(width, rng)
            self.blocks[s] = Sequential([
                (f"scale{s}.conv", Conv2d(width + 1, width, 3, rng=rng)),
                (f"scale{s}.relu", ReLU()),
            ])
        self.final: list[Sequential] = []
        for k in range(cfg.min_scale):
            self.final.append(Sequential([
                (f"out{k}.up", Upsample2x()),
                (f"out{k}.deconv", Conv2d(width, width, 3, rng=rng)),
                (f"out{k}.relu", ReLU()),
            ]))
        self.head = Sequential([("head.conv", Conv2d(width, 1, 3, rng=rng)), ("head.sigmoid", Sigmoid())])

    def params(self) -> dict[str, Tensor]:
        out = dict(self.stem.params())
        for s in self.up:
            out.update(self.up[s].params())
            if s in self.gates:
                out.update({f"scale{s}.gate.{k}": t for k, t in self.gates[s].params().items()})
            out.update(self.blocks[s].params())
        for seq in self.final:
            out.update(seq.params())
        out.update(self.head.params())
        return out

    def forward(self, maps: dict[int, np.ndarray]):
        """``maps[s]`` is ``(2, 1, G_s, G_s)``; returns ``((2, 1, N, N) probs, cache)``."""
        missing = [s for s in self.cfg.scales if s not in maps]
        if missing:
            raise KeyError(f"decoder missing score maps for scales {missing}")
        top = self.cfg.top_scale
        x, stem_cache = self.stem.forward(maps[top])
        steps = []
        for s in self.cfg.scales[1:]:
            up, up_cache = self.up[s].forward(x)
            fused, fuse_cache = gated_fuse(self.gates.get(s), up, maps[s])
            x, block_cache = self.blocks[s].forward(fused)
            steps.append((s, up_cache, fuse_cache, block_cache))
        final_caches = []
        for seq in self.final:
            x, c = seq.forward(x)
            final_caches.append(c)
        probs, head_cache = self.head.forward(x)
        return probs, (stem_cache, steps, final_caches, head_cache)

    def backward(self, cache, dprobs: np.ndarray) -> dict[int, np.ndarray]:
        stem_cache, steps, final_caches, head_cache = cache
        g = self.head.backward(head_cache, dprobs)
        for seq, c in zip(reversed(self.final), reversed(final_caches)):
            g = seq.backward(c, g)
        dmaps = {}
        for s, up_cache, fuse_cache, block_cache in reversed(steps):
            dfused = self.blocks[s].backward(block_cache, g)
            dup, dmaps[s] = gated_fuse_backward(self.gates.get(s), fuse_cache, dfused)
            g = self.up[s].backward(up_cache, dup)
        dmaps[self.cfg.top_scale] = self.stem.backward(stem_cache, g)
        return dmaps


def decode(decoder: Decoder, maps: dict[int, OverlapScoreMap | np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Probability masks ``(M1, M2)``, each ``N x N x 1``."""
    batch = {}
    for s, m in maps.items():
        if isinstance(m, OverlapScoreMap):
            batch[s] = np.stack([m.o1, m.o2])[:, None]
        else:
            batch[s] = np.asarray(m, dtype=np.float64)
    probs, _ = decoder.forward(batch)
    return probs[0, 0][..., None], probs[1, 0][..., None]


def binarize(prob_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(prob_map) >= threshold


# --------------------------------------------------------------------- model

class MONet:
    """Encoder, one overlap detector per scale, and the score-map decoder."""

    def __init__(self, cfg: ScaleConfig, mode: Mode | str = Mode.FULL, decoder_width: int = 8,
                 detector_hidden: int | None = None, seed: int = 0):
        self.cfg = cfg
        self.mode = Mode(mode)
        self.decoder_width = decoder_width
        self.detector_hidden = detector_hidden
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.detectors = {}
        for s in cfg.scales:
            c = cfg.channels(s)
            if self.mode is Mode.DOT_PRODUCT:
                self.detectors[s] = DotProductDetector(c)
            else:
                self.detectors[s] = OverlapDetector(c, detector_hidden or c, rng)
        self.decoder = Decoder(cfg, decoder_width, gating=self.mode is not Mode.NO_GATING, rng=rng)

    def params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": t for k, t in self.encoder.params().items()}
        for s, det in self.detectors.items():
            out.update({f"detector.scale{s}.{k}": t for k, t in det.params().items()})
        out.update({f"decoder.{k}": t for k, t in self.decoder.params().items()})
        return out

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.zero_grad()

    def meta(self) -> dict:
        return {"scale_config": self.cfg.to_dict(), "mode": self.mode.value,
                "decoder_width": self.decoder_width, "detector_hidden": self.detector_hidden,
                "seed": self.seed}

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.meta()
        if extra:
            meta["extra"] = extra
        save_checkpoint(path, self.params(), meta)

    @classmethod
    def load(cls, path) -> tuple["MONet", dict]:
        arrays, meta = load_checkpoint(path)
        model = cls(ScaleConfig.from_dict(meta["scale_config"]), meta["mode"], meta["decoder_width"],
                    meta["detector_hidden"], meta["seed"])
        params = model.params()
        if set(arrays) != set(params):
            raise ValueError(f"checkpoint keys do not match model: "
                             f"{sorted(set(arrays) ^ set(params))[:5]}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {t.shape}")
            t.data[...] = arrays[k]
        return model, meta.get("extra", {})

    def copy_params_from(self, other: "MONet") -> None:
        mine = self.params()
        for k, t in other.params().items():
            if k in mine:
                mine[k].data[...] = t.data
