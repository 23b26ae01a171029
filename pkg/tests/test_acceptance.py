"""Acceptance criteria A1 to A9, each at its stated tolerance.

Every test prints one ``A<n> PASS|FAIL: ...`` line to the terminal. A3 to A5
share one set of desk-scale training runs (about 40 CPU minutes in total);
they are marked ``slow``.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from monet.cli import (
    RunConfig,
    cmd_budget_table,
    cmd_detect,
    cmd_gen_templates,
    cmd_pretrain,
    cmd_train,
    evaluate_model,
    held_out_samples,
    read_metrics,
)
from monet.evaluation import ConfusionCounts, compare_variants, evaluate_pixel, mcc
from monet.network import MONet
from monet.pyramid import DESK_CONFIG, FULL_CONFIG, exact_overlap, PatchId
from monet.search import exhaustive_full_overlaps, hierarchical_search, oracle_scorer, parse_budget_csv
from monet.synth import apply_template, make_templates, procedural_image, sample_triplets, write_png
from monet.tensor import gradient_check
from monet.training import (
    TripletItem,
    bce_loss,
    flexible_margin,
    flexible_margin_loss,
    margin_rank_loss,
    triplet_scores,
)

# the per-layer and pipeline fragments are shared with the unit suites
from test_network import (  # noqa: E402
    TINY as NET_TINY,
    _DecoderFragment,
    _DetectorFragment,
    _FuseFragment,
    _PipelineFragment,
)
from test_tensor import LAYER_FACTORIES  # noqa: E402


@pytest.fixture
def verdict(capsys):
    def emit(tag: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{tag}: {detail}"
    return emit


# ------------------------------------------------------------------------ A1

REFERENCE_OURS = [4096, 2048, 8192, 32768, 131072]
REFERENCE_NAIVE = [4096, 65536, 1048576, 16777216, 268435456]


def test_a1_comparison_budget(tmp_path, verdict):
    t0 = time.perf_counter()
    cmd_budget_table(FULL_CONFIG, str(tmp_path))
    rows = parse_budget_csv((tmp_path / "budget.csv").read_text())
    table_ok = ([r["scale"] for r in rows] == [5, 4, 3, 2, 1] and [r["ours"] for r in rows] == REFERENCE_OURS
                and [r["naive"] for r in rows] == REFERENCE_NAIVE)

    rng = np.random.default_rng(0)
    for k in (1, 2):
        write_png(tmp_path / f"{k}.png", procedural_image(rng, FULL_CONFIG.image_size))
    MONet(FULL_CONFIG, seed=0).save(tmp_path / "m.npz")
    res = cmd_detect(str(tmp_path / "m.npz"), str(tmp_path / "1.png"), str(tmp_path / "2.png"), str(tmp_path / "d"))
    executed = [res["budget"].rows[i].executed for i in range(5)]
    elapsed = time.perf_counter() - t0
    ok = table_ok and executed == REFERENCE_OURS and res["budget"].ok and elapsed < 60
    verdict("A1", ok, f"table {'matches' if table_ok else 'differs'}, detect ledger {executed}, {elapsed:.1f}s")


# ------------------------------------------------------------------------ A2

# (function, args, hand-computed value)
LOSS_TABLE = [
    (margin_rank_loss, (0.9, 0.1, 0.5), 0.0),
    (margin_rank_loss, (0.4, 0.4, 0.3), 0.3),
    (margin_rank_loss, (0.7, 0.7, 0.0), 0.0),
    (margin_rank_loss, (0.2, 0.6, 0.3), 0.7),
    (margin_rank_loss, (0.0, 1.0, 0.5), 1.5),
    (margin_rank_loss, (0.75, 0.25, 0.5), 0.0),
    (margin_rank_loss, (0.75, 0.5, 0.5), 0.25),
    (margin_rank_loss, (1.0, 0.0, 1.0), 0.0),
    (margin_rank_loss, (0.5, 0.625, 0.125), 0.25),
    (flexible_margin, (64, 0, 8), 1.0),
    (flexible_margin, (4, 0, 2), 1.0),
    (flexible_margin, (1024, 0, 32), 1.0),
    (flexible_margin, (48, 16, 8), 0.5),
    (flexible_margin, (1, 0, 32), 1 / 1024),
    (flexible_margin, (3, 1, 2), 0.5),
    (flexible_margin, (10, 6, 4), 0.25),
    (flexible_margin_loss, (0.5, 0.5, 64, 0, 8), 1.0),
    (flexible_margin_loss, (0.25, 0.25, 16, 0, 4), 1.0),
    (flexible_margin_loss, (1.0, 0.0, 64, 0, 8), 0.0),
    (flexible_margin_loss, (1.5, 0.5, 1, 0, 32), 0.0),
    (flexible_margin_loss, (0.9, 0.1, 48, 16, 8), 0.0),
    (flexible_margin_loss, (0.9, 0.1, 64, 0, 8), 0.2),
    (flexible_margin_loss, (0.3, 0.5, 3, 1, 2), 0.7),
    (flexible_margin_loss, (0.25, 0.25, 1, 0, 32), 1 / 1024),
    (bce_loss, (np.full((2, 2), 0.5), np.array([[1, 0], [0, 1]])), math.log(2)),
    (bce_loss, (np.array([[0.9]]), np.array([[1]])), -math.log(0.9)),
    (bce_loss, (np.array([[0.2]]), np.array([[0]])), -math.log(0.8)),
    (bce_loss, (np.array([[0.9, 0.2]]), np.array([[1, 0]])), -(math.log(0.9) + math.log(0.8)) / 2),
]


def test_a2_loss_oracle(verdict):
    bad = [(f.__name__, a) for f, a, want in LOSS_TABLE if abs(float(f(*a)) - want) > 1e-12]

    # flexible loss is the regular loss at the flexible margin, on every table triplet
    for f, a, _ in LOSS_TABLE:
        if f is flexible_margin_loss and float(f(*a)) != float(margin_rank_loss(a[0], a[1], flexible_margin(*a[2:]))):
            bad.append(("reduction", a))

    rng = np.random.default_rng(0)
    x1, x2, m = rng.random(10_000), rng.random(10_000), rng.random(10_000)
    x1[:100], x2[:100], m[:100] = 0.75, 0.25, 0.5  # ties on the hinge itself, exact in binary
    loss = margin_rank_loss(x1, x2, m)
    hinge_ok = np.array_equal(loss == 0, x1 - x2 >= m)
    ok = not bad and hinge_ok
    verdict("A2", ok, f"{len(LOSS_TABLE)} hand cases, mismatches {bad}, hinge rule on 10000 draws {hinge_ok}")


# --------------------------------------------------------------- desk runs

DESK_SEED = 7


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Lazily trains one desk-scale model per variant under the default recipe."""
    root = tmp_path_factory.mktemp("desk")
    base = RunConfig(out=str(root), templates_dir=str(root / "templates"), seed=DESK_SEED)
    cmd_gen_templates(base)
    cache = {}

    def get(mode: str):
        if mode not in cache:
            run = replace(base, mode=mode, out=str(root / mode))
            t0 = time.process_time()
            pre = cmd_pretrain(run)
            pre_cpu = time.process_time() - t0
            pre_model, _ = MONet.load(pre)
            model_path = cmd_train(replace(run, checkpoint=str(pre)))
            model, _ = MONet.load(model_path)
            cache[mode] = dict(run=run, pre=pre, pre_model=pre_model, pre_cpu=pre_cpu, model=model)
        return cache[mode]

    get.base = base
    return get


def held_out_triplets(run: RunConfig, per_scale: int = 8):
    """Full-overlap positives against zero-overlap negatives, on held-out templates."""
    rng = np.random.default_rng(run.seed + 99)
    cfg = run.scale
    items = []
    for smp in held_out_samples(run):
        if smp.template is None:
            continue
        trip = {}
        for s in cfg.scales:
            draws = sample_triplets(smp.template, cfg, s, 4 * per_scale, rng, min_overlap_frac=1.0)
            keep = [t for t in draws if t.o_plus == cfg.patch_dim(s) ** 2 and t.o_minus == 0][:per_scale]
            assert keep, (smp.template.id, s)
            trip[s] = keep
        items.append(TripletItem(smp, trip))
    return items


@pytest.mark.slow
def test_a3_pretraining_separates_overlaps(desk, verdict):
    d = desk("full")
    run = d["run"]
    metrics = read_metrics(d["pre"].parent / "metrics.csv")
    pre_rows = [r for r in metrics.rows if r["phase"] == "pretrain"]
    first, last = pre_rows[0]["val_rank_loss"], pre_rows[-1]["val_rank_loss"]
    _, pos, neg = triplet_scores(d["pre_model"], held_out_triplets(run), run.train)
    gap = float(pos.mean() - neg.mean())
    drop = 1 - last / first
    ok = (len(pre_rows) == 25 and run.pretrain_samples * run.train.triplets_per_sample == 2000
          and gap >= run.train.margin and drop >= 0.5 and d["pre_cpu"] <= 30 * 60)
    verdict("A3", ok, f"held-out score gap {gap:.3f} (need >= {run.train.margin}), val rank loss "
                      f"{first:.3f} -> {last:.3f} ({drop:.0%} drop), {d['pre_cpu'] / 60:.1f} CPU-min")


@pytest.fixture(scope="session")
def held_out(desk):
    return held_out_samples(desk.base)


@pytest.mark.slow
def test_a4_end_to_end_detection(desk, held_out, verdict):
    d = desk("full")
    report = evaluate_model(d["model"], held_out, d["run"].threshold)
    balanced = len(held_out) == 200 and sum(s.label for s in held_out) == 100
    ok = balanced and report.pixel_mcc >= 0.8 and report.image_mcc >= 0.9
    verdict("A4", ok, f"held-out pixel MCC {report.pixel_mcc:.3f} (need >= 0.8), "
                      f"image MCC {report.image_mcc:.3f} (need >= 0.9)")


@pytest.mark.slow
def test_a5_ablation_ordering(desk, held_out, verdict):
    reports = {m: evaluate_model(desk(m)["model"], held_out, desk.base.threshold)
               for m in ("full", "no_gating", "dot_product")}
    pix = {m: r.pixel_mcc for m, r in reports.items()}
    rows = compare_variants(reports)
    ok = pix["full"] >= pix["no_gating"] > pix["dot_product"]
    verdict("A5", ok, "pixel MCC " + ", ".join(f"{r['variant']} {r['pixel_mcc']:.3f}" for r in rows))


# ------------------------------------------------------------------------ A6

def test_a6_oracle_search_matches_exhaustive(verdict):
    cfg = DESK_CONFIG
    mismatched = []
    templates = make_templates(cfg, 100, seed=2024, align=cfg.patch_dim(cfg.top_scale))
    for t in templates:
        score = oracle_scorer(t.correspondence, cfg)
        _, used = hierarchical_search(cfg, score)
        cand = used[cfg.min_scale]
        hit = score(cand) == 1.0
        found = set(zip(cand.idx1[hit].tolist(), cand.idx2[hit].tolist()))
        if found != exhaustive_full_overlaps(t.correspondence, cfg, cfg.min_scale):
            mismatched.append(t.id)
    verdict("A6", not mismatched, f"{len(templates) - len(mismatched)}/{len(templates)} aligned templates match "
                                  "exhaustive search exactly")


# ------------------------------------------------------------------------ A7

def _perturbed(frag, rng, scale):
    for t in frag.params().values():
        t.data += scale * rng.standard_normal(t.shape)
    return frag


def _layer_cases(seed):
    """(kind, fragment, input, gradient_check kwargs) for every layer kind."""
    from monet.network import Decoder, DotProductDetector, GateUnit, OverlapDetector
    from monet.pyramid import ScaleConfig
    rng = np.random.default_rng(seed)
    for kind in sorted(LAYER_FACTORIES):
        frag, x = LAYER_FACTORIES[kind](rng)
        yield kind, _perturbed(frag, rng, 0.1), x, {}
    i, j = rng.integers(0, 5, size=9), rng.integers(0, 5, size=9)
    yield "detector_mlp", _DetectorFragment(OverlapDetector(4, 6, rng), 5, i, j), rng.standard_normal((10, 4)), {}
    yield "detector_dot", _DetectorFragment(DotProductDetector(4), 5, i, j), rng.standard_normal((10, 4)), {}
    yield "gated_fuse", _FuseFragment(GateUnit(3, rng), 3), rng.standard_normal((2, 4, 3, 3)), {}
    yield "concat_fuse", _FuseFragment(None, 3), rng.standard_normal((2, 4, 3, 3)), {}
    cfg = ScaleConfig(image_size=8, top_scale=2, min_scale=1, top_channels=4)
    for gating in (True, False):
        # a composite with ReLUs: a probe straddling a kink is skipped, and skips must stay rare
        frag = _perturbed(_DecoderFragment(Decoder(cfg, 3, gating, rng), cfg), rng, 0.05)
        yield f"decoder_gating_{gating}", frag, rng.random(2 * (4 + 16)), dict(h=1e-6, block_floor=1e-3,
                                                                                 skip_kinks=True)


def test_a7_gradient_integrity(verdict):
    failures, checked = [], set()
    for seed in range(20):
        for kind, frag, x, kw in _layer_cases(seed):
            checked.add(kind)
            report = gradient_check(frag, x, tolerance=1e-4, rng=np.random.default_rng(seed), **kw)
            if not report.ok or report.skipped_fraction >= 0.05:
                failures.append((kind, seed, report.max_error))
    for mode in ("full", "no_gating", "dot_product"):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = _perturbed(MONet(NET_TINY, mode, decoder_width=3, seed=seed), rng, 0.05)
            x = rng.random((2, 3, 16, 16))
            cand = run_candidates(model, x)
            report = gradient_check(_PipelineFragment(model, cand), x, tolerance=1e-3, rng=rng, max_entries=40,
                                    block_floor=1e-3, skip_kinks=True)
            if not report.ok or report.skipped_fraction >= 0.05:
                failures.append((f"pipeline_{mode}", seed, report.max_error))
    verdict("A7", not failures, f"{len(checked)} layer kinds at 1e-4 and 3 pipeline modes at 1e-3, "
                                f"20 seeds each; failures {failures}")


def run_candidates(model, x):
    from monet.search import run_pipeline
    return run_pipeline(model, x[0].transpose(1, 2, 0), x[1].transpose(1, 2, 0)).candidates


# ------------------------------------------------------------------------ A8

def pixel_overlap_table(corr, cfg, s):
    """Independent oracle: push every source pixel through the shift and count patch pairs."""
    g, d = cfg.grid_size(s), cfg.patch_dim(s)
    src = corr.src
    ys, xs = np.mgrid[src.y:src.y + src.h, src.x:src.x + src.w]
    dx, dy = corr.shift
    p1 = (ys // d) * g + xs // d
    p2 = ((ys + dy) // d) * g + (xs + dx) // d
    counts = np.bincount((p1 * g * g + p2).ravel(), minlength=g ** 4)
    return counts.reshape(g, g, g, g)  # [r1, c1, r2, c2]


def stored_table(template, cfg, s):
    g = cfg.grid_size(s)
    t = np.zeros((g, g, g, g), dtype=np.int64)
    rows = template.per_scale[s]
    t[rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]] = rows[:, 4]
    return t


def test_a8_synthetic_ground_truth(verdict):
    cfg = DESK_CONFIG
    rng = np.random.default_rng(8)
    templates = make_templates(cfg, 100, seed=88)
    bad = {"annotations": [], "exact_overlap": [], "parent_sum": [], "mask_area": []}
    for t in templates:
        corr = t.correspondence
        tables = {s: stored_table(t, cfg, s) for s in cfg.scales}
        for s in cfg.scales:
            oracle = pixel_overlap_table(corr, cfg, s)
            if not np.array_equal(tables[s], oracle):
                bad["annotations"].append((t.id, s))
            # the scalar oracle on every nonzero pair and on random zero pairs
            g = cfg.grid_size(s)
            nz = np.argwhere(oracle)
            zero = rng.integers(0, g, size=(200, 4))
            for r1, c1, r2, c2 in np.concatenate([nz, zero]):
                got = exact_overlap(corr, PatchId(1, s, r1, c1), PatchId(2, s, r2, c2), cfg)
                if got != oracle[r1, c1, r2, c2]:
                    bad["exact_overlap"].append((t.id, s))
                    break
        for s in cfg.scales[:-1]:
            g = cfg.grid_size(s)
            child = tables[s - 1].reshape(g, 2, g, 2, g, 2, g, 2).sum(axis=(1, 3, 5, 7))
            if not np.array_equal(child, tables[s]):
                bad["parent_sum"].append((t.id, s))
        smp = apply_template(t, procedural_image(rng, cfg.image_size), procedural_image(rng, cfg.image_size))
        area = corr.src.w * corr.src.h
        if not (tables[cfg.min_scale].sum() == smp.mask1.sum() == smp.mask2.sum() == area):
            bad["mask_area"].append(t.id)
    ok = not any(bad.values())
    verdict("A8", ok, f"100 templates; failures per check {{{', '.join(f'{k}: {len(v)}' for k, v in bad.items())}}}")


# ------------------------------------------------------------------------ A9

def reference_mcc(tp, tn, fp, fn):
    """Pearson correlation of the expanded label vectors, 0 when undefined."""
    pred = np.array([1] * tp + [0] * tn + [1] * fp + [0] * fn, dtype=float)
    truth = np.array([1] * tp + [0] * tn + [0] * fp + [1] * fn, dtype=float)
    if pred.size == 0 or pred.std() == 0 or truth.std() == 0:
        return 0.0
    return float(np.corrcoef(pred, truth)[0, 1])


def test_a9_mcc_correctness(verdict):
    rng = np.random.default_rng(9)
    worst, zero_cases, zero_bad = 0.0, 0, 0
    for _ in range(1000):
        counts = rng.integers(0, 40, size=4)
        counts[rng.random(4) < 0.2] = 0
        c = ConfusionCounts(*counts.tolist())
        got, want = mcc(c), reference_mcc(*counts.tolist())
        worst = max(worst, abs(got - want))
        if 0 in (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn):
            zero_cases += 1
            zero_bad += got != 0.0

    # one image found exactly, one image with three false alarms and nothing to find
    truth_a = np.zeros((4, 4), bool)
    truth_a[0, 0] = True
    pred_b = np.zeros((4, 4), bool)
    pred_b[1, :3] = True
    preds, truths = [truth_a.copy(), pred_b], [truth_a, np.zeros((4, 4), bool)]
    counts, joint = evaluate_pixel(preds, truths)
    per_image = [evaluate_pixel([p], [t])[1] for p, t in zip(preds, truths)]  # [1, 0]: mean 0.5
    aggregate_ok = (counts == ConfusionCounts(tp=1, tn=28, fp=3, fn=0) and per_image == [1.0, 0.0]
                    and abs(joint - 28 / math.sqrt(4 * 1 * 31 * 28)) < 1e-12 and abs(joint - 0.5) > 1e-3)
    ok = worst <= 1e-12 and zero_cases > 0 and zero_bad == 0 and aggregate_ok
    verdict("A9", ok, f"max |mcc - reference| {worst:.2e} over 1000 draws ({zero_cases} zero-denominator), "
                      f"pixel aggregation counterexample {'holds' if aggregate_ok else 'fails'}")
