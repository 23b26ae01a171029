"""Synthetic duplication samples built from reusable annotation templates."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .pyramid import DuplicationCorrespondence, Rect, ScaleConfig, overlap_pairs
from .tensor import atomic_write_bytes


# ------------------------------------------------------------------ textures

def procedural_image(rng: np.random.Generator, n: int) -> np.ndarray:
    """Seeded value noise over four octaves plus a few soft coloured blobs, in [0, 1]."""
    img = np.zeros((n, n, 3))
    for cell, amp in ((16, 1.0), (8, 0.7), (4, 0.5), (2, 0.35)):
        cell = min(cell, n)
        coarse = rng.random((n // cell + 2, n // cell + 2, 3))
        img += amp * ndimage.zoom(coarse, (cell, cell, 1), order=1)[:n, :n]
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(rng.integers(2, 6)):
        cx, cy = rng.uniform(0, n, size=2)
        rx, ry = rng.uniform(n / 16, n / 4, size=2)
        alpha = np.exp(-(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2))[..., None]
        img = img * (1 - alpha) + alpha * rng.random(3) * img.max()
    img -= img.min()
    return img / max(img.max(), 1e-12)


# ----------------------------------------------------------------- templates

@dataclass
class AnnotationTemplate:
    """A duplication correspondence plus its nonzero per-scale patch-pair overlaps.

    ``per_scale[s]`` holds int rows ``(r1, c1, r2, c2, o)``.
    """

    id: str
    cfg_hash: str
    correspondence: DuplicationCorrespondence
    per_scale: dict[int, np.ndarray]

    def to_dict(self) -> dict:
        c = self.correspondence
        return {
            "id": self.id,
            "cfg_hash": self.cfg_hash,
            "correspondence": {"src": list(c.src), "dst": list(c.dst)},
            "per_scale": [{"scale": s, "pairs": self.per_scale[s].tolist()}
                          for s in sorted(self.per_scale, reverse=True)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationTemplate":
        corr = DuplicationCorrespondence(Rect(*d["correspondence"]["src"]), Rect(*d["correspondence"]["dst"]))
        per_scale = {int(e["scale"]): np.array(e["pairs"], dtype=np.int64).reshape(-1, 5) for e in d["per_scale"]}
        return cls(d["id"], d["cfg_hash"], corr, per_scale)

    @classmethod
    def from_json(cls, text: str) -> "AnnotationTemplate":
        return cls.from_dict(json.loads(text))


def annotate(corr: DuplicationCorrespondence, cfg: ScaleConfig) -> dict[int, np.ndarray]:
    return {s: overlap_pairs(corr, cfg, s) for s in cfg.scales}


def generate_template(cfg: ScaleConfig, rng: np.random.Generator, min_region: int | None = None,
                      max_region: int | None = None, align: int = 1,
                      template_id: str = "t0") -> AnnotationTemplate:
    """Random rigid duplication; sizes uniform in ``[min_region, max_region]``.

    ``align`` snaps sizes and positions to a pixel lattice (1 = unaligned).
    """
    n = cfg.image_size
    lo = n // 8 if min_region is None else min_region
    hi = n // 2 if max_region is None else max_region
    if not 1 <= lo <= hi:
        raise ValueError(f"need 1 <= min_region <= max_region, got {lo}, {hi}")
    if hi > n:
        raise ValueError(f"region size {hi} larger than image {n}")
    if align < 1 or lo < align:
        raise ValueError(f"align {align} incompatible with min_region {lo}")

    def size():
        return int(rng.integers(-(-lo // align), hi // align + 1)) * align

    def pos(extent):
        return int(rng.integers(0, (n - extent) // align + 1)) * align

    w, h = size(), size()
    corr = DuplicationCorrespondence(Rect(pos(w), pos(h), w, h), Rect(pos(w), pos(h), w, h))
    return AnnotationTemplate(template_id, cfg.hash(), corr, annotate(corr, cfg))


def template_from_correspondence(cfg: ScaleConfig, corr: DuplicationCorrespondence,
                                 template_id: str = "t0") -> AnnotationTemplate:
    corr.check_bounds(cfg.image_size)
    return AnnotationTemplate(template_id, cfg.hash(), corr, annotate(corr, cfg))


def save_templates(templates: list[AnnotationTemplate], out_dir: str | Path) -> Path:
    """One JSON file per template plus ``manifest.json`` listing ids in order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t in templates:
        atomic_write_bytes(out_dir / f"{t.id}.json", t.to_json().encode())
    manifest = {"cfg_hash": templates[0].cfg_hash if templates else None, "ids": [t.id for t in templates]}
    atomic_write_bytes(out_dir / "manifest.json", json.dumps(manifest, indent=1).encode())
    return out_dir / "manifest.json"


def load_templates(directory: str | Path) -> list[AnnotationTemplate]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no template manifest in {directory}")
    ids = json.loads(manifest_path.read_text())["ids"]
    return [AnnotationTemplate.from_json((directory / f"{i}.json").read_text()) for i in ids]


# ------------------------------------------------------------------- samples

@dataclass
class SyntheticSample:
    image1: np.ndarray
    image2: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    label: bool
    template: AnnotationTemplate | None = field(default=None, repr=False)
    category: str = "synthetic"


def rect_mask(n: int, r: Rect) -> np.ndarray:
    m = np.zeros((n, n), dtype=bool)
    m[r.y:r.y + r.h, r.x:r.x + r.w] = True
    return m


def apply_template(template: AnnotationTemplate, image_a: np.ndarray, image_b: np.ndarray) -> SyntheticSample:
    """Paste ``image_a[src]`` into a copy of ``image_b`` at ``dst``."""
    if image_a.shape != image_b.shape or image_a.ndim != 3 or image_a.shape[0] != image_a.shape[1]:
        raise ValueError(f"images must share an N x N x C shape, got {image_a.shape} and {image_b.shape}")
    n = image_a.shape[0]
    corr = template.correspondence
    corr.check_bounds(n)
    s, d = corr.src, corr.dst
    image1 = np.array(image_a, copy=True)
    image2 = np.array(image_b, copy=True)
    image2[d.y:d.y + d.h, d.x:d.x + d.w] = image_a[s.y:s.y + s.h, s.x:s.x + s.w]
    return SyntheticSample(image1, image2, rect_mask(n, s), rect_mask(n, d), True, template)


def make_negative_sample(image_a: np.ndarray, image_b: np.ndarray) -> SyntheticSample:
    n = image_a.shape[0]
    empty = np.zeros((n, n), dtype=bool)
    return SyntheticSample(np.array(image_a, copy=True), np.array(image_b, copy=True), empty, empty.copy(), False)


# ------------------------------------------------------------------ triplets

class Triplet(NamedTuple):
    """Anchor in ``anchor_image``; positive and negative in the other image.

    Indices are flat grid indices (``row * G + col``) at ``scale``.
    """

    scale: int
    anchor_image: int
    anchor: int
    positive: int
    negative: int
    o_plus: int
    o_minus: int


def _best_partners(keys: np.ndarray, partners: np.ndarray, o: np.ndarray):
    order = np.lexsort((partners, -o, keys))
    k = keys[order]
    first = np.ones(k.size, dtype=bool)
    first[1:] = k[1:] != k[:-1]
    win = order[first]
    return keys[win], partners[win], o[win]


def sample_triplets(template: AnnotationTemplate, cfg: ScaleConfig, scale: int, k: int,
                    rng: np.random.Generator, min_overlap_frac: float = 0.25) -> list[Triplet]:
    """Draw ``k`` (anchor, positive, negative) triplets from the template's annotations.

    Anchors come from both images and must have a partner covering at least
    ``min_overlap_frac`` of a patch (falls back to any partner when no
    anchor qualifies). The positive is the anchor's best partner; the
    negative is uniform among other-image patches with strictly less overlap.
    """
    rows = template.per_scale.get(scale)
    if rows is None or len(rows) == 0:
        raise ValueError(f"template {template.id} has no positive annotations at scale {scale}")
    g = cfg.grid_size(scale)
    d2 = cfg.patch_dim(scale) ** 2
    f1 = rows[:, 0] * g + rows[:, 1]
    f2 = rows[:, 2] * g + rows[:, 3]
    o = rows[:, 4]
    pools = []
    for img, keys, partners in ((1, f1, f2), (2, f2, f1)):
        a, p, best = _best_partners(keys, partners, o)
        pools.append((img, a, p, best, keys, partners))
    threshold = min_overlap_frac * d2
    cand = []
    for img, a, p, best, _, _ in pools:
        keep = best >= threshold
        cand.append((img, a[keep], p[keep], best[keep]))
    if sum(c[1].size for c in cand) == 0:
        cand = [(img, a, p, best) for img, a, p, best, *_ in pools]
    images = np.concatenate([np.full(c[1].size, c[0]) for c in cand])
    anchors = np.concatenate([c[1] for c in cand])
    positives = np.concatenate([c[2] for c in cand])
    o_plus = np.concatenate([c[3] for c in cand])

    overlap_with = {img: (keys, partners) for img, _, _, _, keys, partners in pools}
    out = []
    for pick in rng.integers(0, anchors.size, size=k):
        img, a, op = int(images[pick]), int(anchors[pick]), int(o_plus[pick])
        keys, partners = overlap_with[img]
        ov = np.zeros(g * g, dtype=np.int64)
        sel = keys == a
        ov[partners[sel]] = o[sel]
        pool = np.flatnonzero(ov < op)
        if pool.size == 0:
            raise ValueError(f"no negative with overlap below {op} for anchor {a} at scale {scale}")
        neg = int(rng.choice(pool))
        out.append(Triplet(scale, img, a, int(positives[pick]), neg, op, int(ov[neg])))
    return out


# --------------------------------------------------------------- pair streams

def make_templates(cfg: ScaleConfig, count: int, seed: int, prefix: str = "t", **kwargs) -> list[AnnotationTemplate]:
    rng = np.random.default_rng(seed)
    return [generate_template(cfg, rng, template_id=f"{prefix}{i:05d}", **kwargs) for i in range(count)]


def make_samples(cfg: ScaleConfig, templates: list[AnnotationTemplate], count: int, seed: int,
                 positive_fraction: float = 0.5) -> list[SyntheticSample]:
    """Fresh procedural image pairs; exactly ``round(count * positive_fraction)`` manipulated."""
    rng = np.random.default_rng(seed)
    n_pos = int(round(count * positive_fraction))
    labels = np.zeros(count, dtype=bool)
    labels[:n_pos] = True
    rng.shuffle(labels)
    out = []
    for is_pos in labels:
        a = procedural_image(rng, cfg.image_size)
        b = procedural_image(rng, cfg.image_size)
        if is_pos:
            t = templates[int(rng.integers(len(templates)))]
            out.append(apply_template(t, a, b))
        else:
            out.append(make_negative_sample(a, b))
    return out


# ---------------------------------------------------------------------- PNG

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_png(path: str | Path, array: np.ndarray) -> None:
    """Float images in [0, 1] or bool masks (written as 0/255)."""
    arr = np.asarray(array)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = to_uint8(arr)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """RGB float image in [0, 1], bilinearly resized to ``size x size`` if given."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def read_mask(path: str | Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return np.asarray(im) >= 128
