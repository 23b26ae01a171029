"""MCC scoring at image and pixel level, and ablation tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "tn", "fp", "fn"):
            v = getattr(self, k)
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
            object.__setattr__(self, k, int(v))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_arrays(cls, pred, truth) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=bool)
        truth = np.asarray(truth, dtype=bool)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred & ~truth))
        fn = int(np.count_nonzero(~pred & truth))
        return cls(tp, pred.size - tp - fp - fn, fp, fn)


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    factors = (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn)
    if 0 in factors:
        return 0.0
    denom = math.sqrt(float(factors[0] * factors[1])) * math.sqrt(float(factors[2] * factors[3]))
    value = (c.tp * c.tn - c.fp * c.fn) / denom
    return max(-1.0, min(1.0, value))


def evaluate_pixel(predicted: Iterable[np.ndarray], truth: Iterable[np.ndarray],
                   names: Sequence[str] | None = None) -> tuple[ConfusionCounts, float]:
    """Sum confusion counts over every pixel of every mask, then one MCC."""
    total = ConfusionCounts()
    for k, (p, t) in enumerate(zip(predicted, truth, strict=True)):
        if np.shape(p) != np.shape(t):
            name = names[k] if names is not None else f"#{k}"
            raise ValueError(f"sample {name}: predicted mask shape {np.shape(p)} != ground truth {np.shape(t)}")
        total = total + ConfusionCounts.from_arrays(p, t)
    return total, mcc(total)


def default_min_area(image_size: int) -> int:
    return max(1, (image_size // 64) ** 2)


def image_label(mask: np.ndarray, min_area: int) -> bool:
    return int(np.count_nonzero(mask)) >= min_area


def evaluate_image(predicted: Iterable[np.ndarray], labels: Iterable[bool],
                   min_area: int = 1) -> tuple[ConfusionCounts, float]:
    """An image is predicted manipulated iff its mask has ``>= min_area`` positive pixels."""
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    pred = [image_label(m, min_area) for m in predicted]
    counts = ConfusionCounts.from_arrays(pred, list(labels))
    return counts, mcc(counts)


# ------------------------------------------------------------------- reports

@dataclass
class EvalReport:
    image_mcc: float
    pixel_mcc: float
    image_counts: ConfusionCounts
    pixel_counts: ConfusionCounts
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"image_mcc": self.image_mcc, "pixel_mcc": self.pixel_mcc,
                "image_counts": asdict(self.image_counts), "pixel_counts": asdict(self.pixel_counts),
                "per_category": self.per_category}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["image_mcc"], d["pixel_mcc"], ConfusionCounts(**d["image_counts"]),
                   ConfusionCounts(**d["pixel_counts"]), d.get("per_category", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "image_mcc", "pixel_mcc"])
        w.writerow(["all", f"{self.image_mcc:.6f}", f"{self.pixel_mcc:.6f}"])
        for cat in sorted(self.per_category):
            m = self.per_category[cat]
            w.writerow([cat, f"{m['image_mcc']:.6f}", f"{m['pixel_mcc']:.6f}"])
        return buf.getvalue()


def build_report(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], labels: Sequence[bool],
                 categories: Sequence[str] | None = None, min_area: int = 1) -> EvalReport:
    """Masks and labels are per image (two entries per pair)."""
    categories = list(categories) if categories is not None else ["uncategorized"] * len(pred_masks)
    pix_counts, pix = evaluate_pixel(pred_masks, gt_masks)
    img_counts, img = evaluate_image(pred_masks, labels, min_area)
    per_cat = {}
    for cat in sorted(set(categories)):
        idx = [i for i, c in enumerate(categories) if c == cat]
        _, cp = evaluate_pixel([pred_masks[i] for i in idx], [gt_masks[i] for i in idx])
        _, ci = evaluate_image([pred_masks[i] for i in idx], [labels[i] for i in idx], min_area)
        per_cat[cat] = {"image_mcc": ci, "pixel_mcc": cp}
    return EvalReport(img, pix, img_counts, pix_counts, per_cat)


ABLATION_COLUMNS = ("variant", "image_mcc", "pixel_mcc")


def compare_variants(reports: dict[str, EvalReport]) -> list[dict]:
    """Rows sorted by pixel MCC, best first (stable on ties)."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    rows = [{"variant": name, "image_mcc": r.image_mcc, "pixel_mcc": r.pixel_mcc} for name, r in reports.items()]
    return sorted(rows, key=lambda r: -r["pixel_mcc"])


def variants_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if k != "variant" else r[k]) for k in ABLATION_COLUMNS})
    return buf.getvalue()
