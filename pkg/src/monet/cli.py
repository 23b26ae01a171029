"""Command-line harness: templates, pretraining, training, detection, evaluation, budgets, ablations.

Every verb is a thin argparse wrapper over a plain function taking a
:class:`RunConfig`, so tests and scripts can call the same code paths.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import EvalReport, build_report, compare_variants, default_min_area, variants_to_csv
from .network import MONet, Mode, binarize
from .pyramid import DESK_CONFIG, ScaleConfig
from .search import budget_table, run_pipeline, verify_budget
from .synth import (
    SyntheticSample,
    apply_template,
    load_templates,
    make_negative_sample,
    make_templates,
    procedural_image,
    read_image,
    read_mask,
    save_templates,
    write_png,
)
from .tensor import atomic_write_bytes
from .training import MetricsLog, TrainConfig, make_triplet_items, pretrain, train_end_to_end

log = logging.getLogger("monet.cli")

MANIFEST_COLUMNS = ("image1", "image2", "mask1", "mask2", "label", "category")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# fixed offsets from the run seed, one per random stream
_TRAIN_SAMPLES, _VAL_SAMPLES, _TRIPLETS, _VAL_TRIPLETS, _E2E_SAMPLES, _HELD_OUT = 11, 12, 13, 14, 21, 31
_EPOCH_STRIDE = 1000  # per-epoch end-to-end seeds never meet the fixed offsets above


class CliError(Exception):
    pass


# -------------------------------------------------------------------- config

@dataclass
class RunConfig:
    scale: ScaleConfig = DESK_CONFIG
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=5e-4, e2e_lr=3e-4, e2e_decoder_lr=3e-3, e2e_negatives=16))
    mode: str = "full"
    templates_dir: str | None = None  # defaults to <out>/templates
    images: str = "procedural"  # or a directory of base images
    checkpoint: str | None = None
    out: str = "runs/default"
    seed: int = 7
    template_count: int = 100
    min_region: int | None = None
    max_region: int | None = None
    align: int = 8  # snap regions to the top-scale lattice at desk size
    pretrain_samples: int = 250
    train_samples: int = 400  # pairs per end-to-end epoch
    fresh_pairs: bool = True  # new image pairs every end-to-end epoch
    val_samples: int = 40
    test_samples: int = 200
    detector_hidden: int | None = None
    decoder_width: int = 8
    threshold: float = 0.5

    def __post_init__(self):
        Mode(self.mode)
        for name in ("template_count", "pretrain_samples", "train_samples", "test_samples", "align"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.val_samples < 0:
            raise ValueError("val_samples must be >= 0")

    @property
    def template_path(self) -> Path:
        return Path(self.templates_dir) if self.templates_dir else Path(self.out) / "templates"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = self.scale.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "scale" in d:
            d["scale"] = ScaleConfig.from_dict(d["scale"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def worker_count() -> int:
    raw = os.environ.get("MONET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"MONET_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------- data

def _base_images(run: RunConfig, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    n = run.scale.image_size
    if run.images == "procedural":
        return [procedural_image(rng, n) for _ in range(count)]
    files = sorted(p for p in Path(run.images).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) < 2:
        raise CliError(f"need at least two images in {run.images}")
    picks = rng.integers(len(files), size=count)
    return [read_image(files[i], n) for i in picks]


def build_samples(run: RunConfig, templates, count: int, seed: int,
                  positive_fraction: float = 0.5) -> list[SyntheticSample]:
    """Image pairs over ``run.images``; exactly ``round(count * positive_fraction)`` manipulated."""
    rng = np.random.default_rng(seed)
    labels = np.zeros(count, dtype=bool)
    labels[:int(round(count * positive_fraction))] = True
    rng.shuffle(labels)
    out = []
    for is_pos in labels:
        a, b = _base_images(run, 2, rng)
        if is_pos:
            out.append(apply_template(templates[int(rng.integers(len(templates)))], a, b))
        else:
            out.append(make_negative_sample(a, b))
    return out


def _template_kwargs(run: RunConfig) -> dict:
    return dict(min_region=run.min_region, max_region=run.max_region, align=run.align)


def held_out_samples(run: RunConfig, count: int | None = None) -> list[SyntheticSample]:
    """Balanced test pairs built from templates disjoint from the training ones."""
    templates = make_templates(run.scale, run.template_count, seed=run.seed + _HELD_OUT, prefix="h",
                               **_template_kwargs(run))
    return build_samples(run, templates, count or run.test_samples, run.seed + _HELD_OUT + 1)


def require_templates(run: RunConfig):
    path = run.template_path
    if not (path / "manifest.json").exists():
        raise CliError(f"missing templates: no manifest in {path} (run gen-templates first)")
    templates = load_templates(path)
    if templates and templates[0].cfg_hash != run.scale.hash():
        raise CliError(f"templates in {path} were made for a different scale config")
    return templates


def _new_model(run: RunConfig) -> MONet:
    return MONet(run.scale, run.mode, run.decoder_width, run.detector_hidden, seed=run.seed)


def _seeded(run: RunConfig) -> TrainConfig:
    return replace(run.train, seed=run.seed)


# ---------------------------------------------------------------- artifacts

def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_metrics(path: Path, metrics: MetricsLog) -> None:
    write_text(path, metrics.to_csv())


def read_metrics(path: Path) -> MetricsLog:
    out = MetricsLog()
    for rec in csv.DictReader(io.StringIO(path.read_text())):
        row = {}
        for k, v in rec.items():
            if v == "":
                row[k] = None
            elif k == "phase":
                row[k] = v
            elif k == "epoch":
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.rows.append(row)
    return out


# ------------------------------------------------------------------ commands

def cmd_gen_templates(run: RunConfig, count: int | None = None) -> Path:
    count = count or run.template_count
    templates = make_templates(run.scale, count, seed=run.seed, **_template_kwargs(run))
    try:
        return save_templates(templates, run.template_path)
    except OSError as exc:
        raise CliError(f"cannot write templates to {run.template_path}: {exc}") from exc


def cmd_gen_pairs(run: RunConfig, count: int | None = None, category: str = "synthetic") -> Path:
    """Write a held-out pair set as PNGs plus an evaluation manifest."""
    out = Path(run.out) / "pairs"
    rows = []
    for i, smp in enumerate(held_out_samples(run, count)):
        names = [f"{i:05d}_{k}.png" for k in ("image1", "image2", "mask1", "mask2")]
        for name, arr in zip(names, (smp.image1, smp.image2, smp.mask1, smp.mask2)):
            write_png(out / name, arr)
        rows.append(names + [int(smp.label), category])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    w.writerows(rows)
    write_text(out / "manifest.csv", buf.getvalue())
    return out / "manifest.csv"


def cmd_pretrain(run: RunConfig, resume: str | None = None) -> Path:
    templates = require_templates(run)
    out = Path(run.out)
    tc = _seeded(run)
    samples = build_samples(run, templates, run.pretrain_samples, run.seed + _TRAIN_SAMPLES, 1.0)
    items = make_triplet_items(samples, run.scale, tc.triplets_per_sample, seed=run.seed + _TRIPLETS)
    val_items = None
    if run.val_samples:
        val = build_samples(run, templates, run.val_samples, run.seed + _VAL_SAMPLES, 1.0)
        val_items = make_triplet_items(val, run.scale, tc.triplets_per_sample, seed=run.seed + _VAL_TRIPLETS)
    metrics, start = MetricsLog(), 0
    if resume:
        model, extra = MONet.load(resume)
        start = int(extra.get("epoch", 0))
        if (Path(resume).parent / "metrics.csv").exists():
            metrics = read_metrics(Path(resume).parent / "metrics.csv")
    else:
        model = _new_model(run)
    ckpt = out / "pretrain.npz"

    def save(epoch, lg):
        model.save(ckpt, {"phase": "pretrain", "epoch": epoch, "run": run.to_dict()})
        write_metrics(out / "metrics.csv", lg)

    pretrain(model, items, tc, val_items, metrics, start_epoch=start, on_epoch=save)
    if not tc.pretrain_epochs:
        save(start, metrics)
    return ckpt


def cmd_train(run: RunConfig, from_scratch: bool = False, resume: str | None = None) -> Path:
    templates = require_templates(run)
    out = Path(run.out)
    tc = _seeded(run)
    metrics, start = MetricsLog(), 0
    if resume:
        model, extra = MONet.load(resume)
        start = int(extra.get("epoch", 0)) if extra.get("phase") == "e2e" else 0
        if start and (Path(resume).parent / "metrics.csv").exists():
            metrics = read_metrics(Path(resume).parent / "metrics.csv")
    elif run.checkpoint:
        if not Path(run.checkpoint).exists():
            raise CliError(f"checkpoint not found: {run.checkpoint}")
        pre, _ = MONet.load(run.checkpoint)
        model = _new_model(run)
        model.copy_params_from(pre)
        metrics = read_metrics(Path(run.checkpoint).parent / "metrics.csv") \
            if (Path(run.checkpoint).parent / "metrics.csv").exists() else MetricsLog()
    elif from_scratch:
        model = _new_model(run)
    else:
        raise CliError("train needs a pretraining checkpoint (--checkpoint) or --from-scratch")
    if run.fresh_pairs:
        def samples(epoch):
            return build_samples(run, templates, run.train_samples, run.seed + _E2E_SAMPLES + _EPOCH_STRIDE * epoch)
    else:
        samples = build_samples(run, templates, run.train_samples, run.seed + _E2E_SAMPLES)
    val = build_samples(run, templates, run.val_samples, run.seed + _VAL_SAMPLES) if run.val_samples else None
    ckpt = out / "model.npz"

    def save(epoch, lg):
        model.save(ckpt, {"phase": "e2e", "epoch": epoch, "run": run.to_dict()})
        write_metrics(out / "metrics.csv", lg)

    train_end_to_end(model, samples, tc, val, metrics, pretrained=not from_scratch, start_epoch=start,
                     on_epoch=save)
    if not tc.e2e_epochs:
        save(start, metrics)
    return ckpt


def detect_pair(model: MONet, image1: np.ndarray, image2: np.ndarray, threshold: float = 0.5):
    out = run_pipeline(model, image1, image2)
    return binarize(out.prob1, threshold), binarize(out.prob2, threshold), out


def _map_csv(o: np.ndarray) -> str:
    buf = io.StringIO()
    np.savetxt(buf, o, delimiter=",", fmt="%.17g")
    return buf.getvalue()


def cmd_detect(checkpoint: str, image1: str, image2: str, out_dir: str, threshold: float = 0.5) -> dict:
    model, _ = MONet.load(checkpoint)
    n = model.cfg.image_size
    imgs = []
    for p in (image1, image2):
        try:
            imgs.append(read_image(p, n))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read image {p}: {exc}") from exc
    m1, m2, out = detect_pair(model, *imgs, threshold)
    out_dir = Path(out_dir)
    write_png(out_dir / "mask1.png", m1)
    write_png(out_dir / "mask2.png", m2)
    for s, smap in out.score_maps.items():
        for k, o in ((1, smap.o1), (2, smap.o2)):
            write_png(out_dir / f"score_s{s}_image{k}.png", o)
            write_text(out_dir / f"score_s{s}_image{k}.csv", _map_csv(o))
    budget = verify_budget(out.ledger, model.cfg)
    write_text(out_dir / "ledger.csv", budget.to_csv())
    return {"mask1": m1, "mask2": m2, "budget": budget, "output": out}


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:5] != list(MANIFEST_COLUMNS[:5]):
            raise CliError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if None in rec or any(rec.get(k) in (None, "") for k in MANIFEST_COLUMNS[:5]):
                raise CliError(f"{path}: malformed row {lineno}")
            if rec["label"].strip().lower() not in ("0", "1", "true", "false"):
                raise CliError(f"{path}: row {lineno}: label must be 0/1/true/false, got {rec['label']!r}")
            resolve = lambda p: str(p if Path(p).is_absolute() else path.parent / p)
            rows.append({
                "image1": resolve(rec["image1"]), "image2": resolve(rec["image2"]),
                "mask1": resolve(rec["mask1"]), "mask2": resolve(rec["mask2"]),
                "label": rec["label"].strip().lower() in ("1", "true"),
                "category": (rec.get("category") or "").strip() or "uncategorized",
            })
    return rows


def evaluate_model(model: MONet, samples: Sequence[SyntheticSample], threshold: float = 0.5,
                   categories: Sequence[str] | None = None) -> EvalReport:
    """Detect on every pair (sharded over ``MONET_THREADS`` workers) and score both masks."""
    def one(smp):
        m1, m2, _ = detect_pair(model, smp.image1, smp.image2, threshold)
        return m1, m2

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, samples))
    preds, gts, labels, cats = [], [], [], []
    for i, (smp, (m1, m2)) in enumerate(zip(samples, results)):
        preds += [m1, m2]
        gts += [smp.mask1, smp.mask2]
        labels += [smp.label, smp.label]
        cat = categories[i] if categories else "synthetic"
        cats += [cat, cat]
    return build_report(preds, gts, labels, cats, default_min_area(model.cfg.image_size))


def cmd_evaluate(checkpoint: str, manifest: str, out_dir: str, threshold: float = 0.5) -> EvalReport:
    model, _ = MONet.load(checkpoint)
    n = model.cfg.image_size
    samples, cats = [], []
    for row in read_manifest(manifest):
        try:
            a, b = read_image(row["image1"], n), read_image(row["image2"], n)
            m1, m2 = read_mask(row["mask1"], n), read_mask(row["mask2"], n)
        except OSError as exc:
            raise CliError(f"cannot read pair {row['image1']}: {exc}") from exc
        samples.append(SyntheticSample(a, b, m1, m2, row["label"]))
        cats.append(row["category"])
    report = evaluate_model(model, samples, threshold, cats)
    write_text(Path(out_dir) / "report.json", report.to_json())
    write_text(Path(out_dir) / "report.csv", report.to_csv())
    return report


def cmd_budget_table(cfg: ScaleConfig, out_dir: str | None = None) -> str:
    report = budget_table(cfg)
    if out_dir:
        write_text(Path(out_dir) / "budget.csv", report.to_csv())
    return report.to_text()


def cmd_ablate(run: RunConfig, modes: Sequence[str] = ("full", "no_gating", "dot_product")) -> list[dict]:
    """Same data, seeds and budget for every variant; only the mode differs."""
    if not (run.template_path / "manifest.json").exists():
        cmd_gen_templates(run)
    test = held_out_samples(run)
    reports = {}
    for mode in modes:
        sub = replace(run, mode=mode, out=str(Path(run.out) / mode), templates_dir=str(run.template_path),
                      checkpoint=None)
        pre = cmd_pretrain(sub)
        model_path = cmd_train(replace(sub, checkpoint=str(pre)))
        model, _ = MONet.load(model_path)
        reports[mode] = evaluate_model(model, test, run.threshold)
        write_text(Path(sub.out) / "report.json", reports[mode].to_json())
    rows = compare_variants(reports)
    write_text(Path(run.out) / "ablation.csv", variants_to_csv(rows))
    return rows


# ---------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="monet", description="Multi-scale overlap detection between image pairs.")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-templates", parents=[common], help="write annotation templates")
    g.add_argument("--count", type=int)
    g = sub.add_parser("gen-pairs", parents=[common], help="write a held-out pair set with a manifest")
    g.add_argument("--count", type=int)
    g = sub.add_parser("pretrain", parents=[common], help="triplet pretraining of encoder and detectors")
    g.add_argument("--resume", help="continue from a pretraining checkpoint")
    g = sub.add_parser("train", parents=[common], help="end-to-end training")
    g.add_argument("--checkpoint", help="pretraining checkpoint to start from")
    g.add_argument("--from-scratch", action="store_true")
    g.add_argument("--resume", help="continue from an end-to-end checkpoint")
    g = sub.add_parser("detect", parents=[common], help="masks and score maps for one image pair")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("image1")
    g.add_argument("image2")
    g.add_argument("--threshold", type=float, default=0.5)
    g = sub.add_parser("evaluate", parents=[common], help="image and pixel MCC over a manifest")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("manifest")
    g.add_argument("--threshold", type=float, default=0.5)
    g = sub.add_parser("budget-table", parents=[common], help="naive vs hierarchical comparison counts")
    g.add_argument("--image-size", type=int)
    g.add_argument("--top-scale", type=int)
    g = sub.add_parser("ablate", parents=[common], help="train full, no_gating and dot_product alike")
    g.add_argument("--modes", default="full,no_gating,dot_product")
    return p


def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.out is not None:
        run = replace(run, out=args.out)
    return run


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _run_config(args)
        if args.verb == "gen-templates":
            print(cmd_gen_templates(run, args.count))
        elif args.verb == "gen-pairs":
            print(cmd_gen_pairs(run, args.count))
        elif args.verb == "pretrain":
            print(cmd_pretrain(run, args.resume))
        elif args.verb == "train":
            if args.checkpoint:
                run = replace(run, checkpoint=args.checkpoint)
            print(cmd_train(run, args.from_scratch, args.resume))
        elif args.verb == "detect":
            res = cmd_detect(args.checkpoint, args.image1, args.image2, run.out, args.threshold)
            print(res["budget"].to_text())
        elif args.verb == "evaluate":
            report = cmd_evaluate(args.checkpoint, args.manifest, run.out, args.threshold)
            print(report.to_csv(), end="")
        elif args.verb == "budget-table":
            cfg = run.scale
            if args.image_size or args.top_scale:
                cfg = ScaleConfig(args.image_size or cfg.image_size, args.top_scale or cfg.top_scale,
                                  cfg.min_scale, args.image_size or cfg.top_channels)
            print(cmd_budget_table(cfg, args.out))
        elif args.verb == "ablate":
            print(variants_to_csv(cmd_ablate(run, args.modes.split(","))), end="")
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
