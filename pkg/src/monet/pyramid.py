"""Patch-grid geometry, exact overlap oracle and comparison budgets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class ScaleConfig:
    """Square-image scale pyramid.

    Scale ``s`` has a ``N/2^s`` grid of patches of ``2^s`` pixels each, and
    ``top_channels / 2^(top_scale - s)`` feature channels.
    """

    image_size: int = 256
    top_scale: int = 5
    min_scale: int = 1
    top_channels: int = 256

    def __post_init__(self):
        n = self.image_size
        if n < 2 or n & (n - 1):
            raise ValueError(f"image_size must be a power of two, got {n}")
        if not 1 <= self.min_scale <= self.top_scale:
            raise ValueError(f"need 1 <= min_scale <= top_scale, got {self.min_scale}, {self.top_scale}")
        if 2 ** self.top_scale > n:
            raise ValueError(f"top_scale {self.top_scale} leaves no patches for image_size {n}")
        span = 2 ** (self.top_scale - self.min_scale)
        if self.top_channels % span or self.top_channels < span:
            raise ValueError(f"top_channels {self.top_channels} cannot be halved down to scale {self.min_scale}")

    @property
    def scales(self) -> list[int]:
        """Scales from the top (coarsest) down to ``min_scale``."""
        return list(range(self.top_scale, self.min_scale - 1, -1))

    def _check(self, s: int) -> None:
        if not self.min_scale <= s <= self.top_scale:
            raise ValueError(f"scale {s} outside [{self.min_scale}, {self.top_scale}]")

    def grid_size(self, s: int) -> int:
        if not 1 <= s <= self.top_scale:
            raise ValueError(f"scale {s} outside [1, {self.top_scale}]")
        return self.image_size >> s

    def patch_dim(self, s: int) -> int:
        if not 1 <= s <= self.top_scale:
            raise ValueError(f"scale {s} outside [1, {self.top_scale}]")
        return 1 << s

    def channels(self, s: int) -> int:
        if not 1 <= s <= self.top_scale:
            raise ValueError(f"scale {s} outside [1, {self.top_scale}]")
        return self.top_channels >> (self.top_scale - s) or 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleConfig":
        return cls(**{k: int(d[k]) for k in ("image_size", "top_scale", "min_scale", "top_channels") if k in d})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScaleConfig":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


FULL_CONFIG = ScaleConfig()
DESK_CONFIG = ScaleConfig(image_size=64, top_scale=3, min_scale=1, top_channels=64)


class PatchId(NamedTuple):
    image: int
    scale: int
    row: int
    col: int


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass(frozen=True)
class DuplicationCorrespondence:
    """Rigid-translation copy of ``src`` (image 1) onto ``dst`` (image 2)."""

    src: Rect
    dst: Rect

    def __post_init__(self):
        object.__setattr__(self, "src", Rect(*map(int, self.src)))
        object.__setattr__(self, "dst", Rect(*map(int, self.dst)))
        if (self.src.w, self.src.h) != (self.dst.w, self.dst.h):
            raise ValueError(f"src and dst sizes differ: {self.src} vs {self.dst}")
        if self.src.w < 1 or self.src.h < 1:
            raise ValueError(f"empty duplicated region {self.src}")

    @property
    def shift(self) -> tuple[int, int]:
        return self.dst.x - self.src.x, self.dst.y - self.src.y

    def reversed(self) -> "DuplicationCorrespondence":
        return DuplicationCorrespondence(self.dst, self.src)

    def check_bounds(self, image_size: int) -> None:
        for name, r in (("src", self.src), ("dst", self.dst)):
            if r.x < 0 or r.y < 0 or r.x + r.w > image_size or r.y + r.h > image_size:
                raise ValueError(f"{name} rect {r} exceeds {image_size}x{image_size} image")


def _check_patch(cfg: ScaleConfig, p: PatchId) -> None:
    g = cfg.grid_size(p.scale)
    if not (0 <= p.row < g and 0 <= p.col < g):
        raise IndexError(f"patch {p} outside {g}x{g} grid")


def patch_rect(cfg: ScaleConfig, p: PatchId) -> Rect:
    _check_patch(cfg, p)
    d = cfg.patch_dim(p.scale)
    return Rect(p.col * d, p.row * d, d, d)


def children(p: PatchId, min_scale: int = 1) -> list[PatchId]:
    if p.scale <= min_scale:
        raise ValueError(f"patch at scale {p.scale} has no children below min scale {min_scale}")
    r, c = 2 * p.row, 2 * p.col
    return [PatchId(p.image, p.scale - 1, r + dr, c + dc) for dr in (0, 1) for dc in (0, 1)]


def parent(p: PatchId) -> PatchId:
    return PatchId(p.image, p.scale + 1, p.row // 2, p.col // 2)


def _interval_overlap(a0, a1, b0, b1):
    return np.maximum(0, np.minimum(a1, b1) - np.maximum(a0, b0))


def axis_overlap(grid: int, d: int, src0: int, length: int, dst0: int) -> np.ndarray:
    """``[i, j]`` = pixels of 1-D patch ``i`` inside the source span that land in patch ``j``."""
    starts = np.arange(grid) * d
    lo = np.maximum(starts, src0)
    hi = np.minimum(starts + d, src0 + length)
    shift = dst0 - src0
    ov = _interval_overlap((lo + shift)[:, None], (hi + shift)[:, None], starts[None, :], starts[None, :] + d)
    ov[hi <= lo] = 0
    return ov


def overlap_tables(corr: DuplicationCorrespondence, cfg: ScaleConfig, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Separable overlap: ``o(a, b) = ox[a.col, b.col] * oy[a.row, b.row]``."""
    g, d = cfg.grid_size(s), cfg.patch_dim(s)
    ox = axis_overlap(g, d, corr.src.x, corr.src.w, corr.dst.x)
    oy = axis_overlap(g, d, corr.src.y, corr.src.h, corr.dst.y)
    return ox, oy


def exact_overlap(corr: DuplicationCorrespondence, a: PatchId, b: PatchId, cfg: ScaleConfig | None = None) -> int:
    """Pixels of patch ``a`` inside ``src`` whose translated position falls inside patch ``b``."""
    if a.scale != b.scale:
        raise ValueError(f"scale mismatch: {a.scale} vs {b.scale}")
    d = 1 << a.scale
    if cfg is not None:
        _check_patch(cfg, a)
        _check_patch(cfg, b)
    dx, dy = corr.shift
    src = corr.src

    def one_axis(pa, pb, s0, length, shift):
        lo, hi = max(pa * d, s0), min(pa * d + d, s0 + length)
        if hi <= lo:
            return 0
        return int(_interval_overlap(lo + shift, hi + shift, pb * d, pb * d + d))

    return one_axis(a.col, b.col, src.x, src.w, dx) * one_axis(a.row, b.row, src.y, src.h, dy)


def overlap_pairs(corr: DuplicationCorrespondence, cfg: ScaleConfig, s: int) -> np.ndarray:
    """All ``(r1, c1, r2, c2, o)`` rows with ``o > 0`` at scale ``s``, sorted."""
    ox, oy = overlap_tables(corr, cfg, s)
    c1, c2 = np.nonzero(ox)
    r1, r2 = np.nonzero(oy)
    if c1.size == 0 or r1.size == 0:
        return np.zeros((0, 5), dtype=np.int64)
    R1 = np.repeat(r1, c1.size)
    R2 = np.repeat(r2, c1.size)
    C1 = np.tile(c1, r1.size)
    C2 = np.tile(c2, r1.size)
    o = oy[R1, R2] * ox[C1, C2]
    rows = np.stack([R1, C1, R2, C2, o], axis=1).astype(np.int64)
    order = np.lexsort(rows[:, ::-1][:, 1:].T)
    return rows[order]


# ------------------------------------------------------------------- budgets

def naive_budget(cfg: ScaleConfig, s: int) -> int:
    g = cfg.grid_size(s)
    return (g * g) ** 2


def ours_budget(cfg: ScaleConfig, s: int) -> int:
    cfg._check(s)
    if s == cfg.top_scale:
        return naive_budget(cfg, s)
    g = cfg.grid_size(s + 1)
    return 2 * g * g * 16


@dataclass
class ComparisonLedger:
    counts: dict[int, int] = field(default_factory=dict)

    def record(self, scale: int, n: int) -> None:
        if n < 0:
            raise ValueError("comparison counts only increase")
        self.counts[scale] = self.counts.get(scale, 0) + int(n)

    def __getitem__(self, scale: int) -> int:
        return self.counts.get(scale, 0)

    def merge(self, other: "ComparisonLedger") -> "ComparisonLedger":
        out = ComparisonLedger(dict(self.counts))
        for s, n in other.counts.items():
            out.record(s, n)
        return out
