import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monet.network import MONet
from monet.pyramid import PatchId, ScaleConfig, exact_overlap
from monet.synth import make_samples, make_templates
from monet.tensor import gradient_check
from monet.training import (
    METRIC_COLUMNS,
    MetricsLog,
    TrainConfig,
    bce_grad,
    bce_loss,
    flexible_margin,
    flexible_margin_loss,
    make_triplet_items,
    margin_rank_grad,
    margin_rank_loss,
    mine_negatives,
    pretrain,
    ranking_terms,
    train_end_to_end,
    triplet_scores,
)

SMALL = ScaleConfig(image_size=16, top_scale=2, min_scale=1, top_channels=8)


@pytest.fixture(scope="module")
def data():
    templates = make_templates(SMALL, 6, seed=0, min_region=4, max_region=8, align=4)
    samples = make_samples(SMALL, templates, 8, seed=1)
    items = make_triplet_items(samples, SMALL, 4, seed=2)
    return samples, items


# -------------------------------------------------------------------- losses

def test_margin_rank_examples():
    assert margin_rank_loss(0.9, 0.1, 0.5) == 0.0
    assert margin_rank_loss(0.4, 0.4, 0.3) == pytest.approx(0.3)
    assert margin_rank_loss(0.2, 0.6, 0.3) == pytest.approx(0.7)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2))
def test_margin_rank_nonnegative_and_hinge(x1, x2, m):
    loss = float(margin_rank_loss(x1, x2, m))
    assert loss >= 0.0
    assert (loss == 0.0) == ((x2 - x1) + m <= 0)


def test_margin_rank_grad_flat_side():
    g1, g2 = margin_rank_grad(np.array([0.9, 0.2]), np.array([0.1, 0.6]), 0.5)
    np.testing.assert_array_equal(g1, [0.0, -1.0])
    np.testing.assert_array_equal(g2, [0.0, 1.0])


def test_flexible_margin_examples():
    assert flexible_margin(64, 0, 8) == 1.0
    assert flexible_margin(48, 16, 8) == 0.5
    assert flexible_margin(1, 0, 32) == 1 / 1024
    with pytest.raises(ValueError):
        flexible_margin(16, 16, 8)
    with pytest.raises(ValueError):
        flexible_margin(65, 0, 8)


@given(st.integers(1, 64), st.data(), st.floats(0, 1), st.floats(0, 1))
def test_flexible_loss_reduces_to_regular(o_plus, data, x1, x2):
    o_minus = data.draw(st.integers(0, o_plus - 1))
    m = flexible_margin(o_plus, o_minus, 8)
    assert 0 < m <= 1
    assert flexible_margin_loss(x1, x2, o_plus, o_minus, 8) == margin_rank_loss(x1, x2, m)
    assert flexible_margin_loss(x1 + 1.0, x1, o_plus, o_minus, 8) == 0.0


def test_bce_examples():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert bce_loss(y, y) <= -np.log(1 - 1e-7) + 1e-15
    assert bce_loss(np.full((2, 2), 0.5), y) == pytest.approx(np.log(2))
    with pytest.raises(ValueError):
        bce_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class _BCE:
    def __init__(self, target):
        self.target = target

    def params(self):
        return {}

    def forward(self, p):
        return np.array(bce_loss(p, self.target)), p

    def backward(self, p, g):
        return g * bce_grad(p, self.target)


def test_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        target = (rng.random((4, 4)) > 0.5).astype(float)
        p = rng.uniform(0.05, 0.95, (4, 4))
        report = gradient_check(_BCE(target), p, tolerance=1e-5, head=lambda y: (float(y), np.ones_like(y)))
        assert report.ok, report.errors


# -------------------------------------------------------------------- config

def test_train_config_validation_and_json():
    tc = TrainConfig(margin_mode="flexible", lr=3e-4)
    assert TrainConfig.from_dict(__import__("json").loads(tc.to_json())) == tc
    for bad in (dict(margin_mode="soft"), dict(pretrain_epochs=-1), dict(batch_size=0), dict(lr=-1.0),
                dict(e2e_lr=-1.0), dict(e2e_negatives=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert (TrainConfig().pretrain_epochs, TrainConfig().e2e_epochs, TrainConfig().lr) == (25, 50, 1e-4)


def test_metrics_csv_columns():
    log = MetricsLog()
    log.add(epoch=1, phase="pretrain", rank_loss=0.5)
    lines = log.to_csv().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1].startswith("1,pretrain,0.5,")


# ---------------------------------------------------------------- gradients

class _RankingFragment:
    """Ranking loss as a function of the stacked feature maps of one scale."""

    def __init__(self, model, item, tc, s):
        self.model, self.item, self.tc, self.s = model, item, tc, s

    def params(self):
        return {}  # detector grads are covered by the detector's own check

    def forward(self, f):
        loss, dfeats, _ = ranking_terms(self.model, {self.s: f}, {self.s: self.item.triplets[self.s]}, self.tc)
        return np.array(loss), dfeats[self.s]

    def backward(self, dfeat, g):
        return g * dfeat


@pytest.mark.parametrize("mode", ["regular", "flexible"])
def test_ranking_gradients(data, mode):
    _, items = data
    tc = TrainConfig(margin_mode=mode, margin=2.0)  # a wide margin keeps every hinge active
    for seed in range(5):
        model = MONet(SMALL, seed=seed)
        rng = np.random.default_rng(seed)
        for s in SMALL.scales:
            g = SMALL.grid_size(s)
            f = rng.standard_normal((2, SMALL.channels(s), g, g))
            frag = _RankingFragment(model, items[seed % len(items)], tc, s)
            report = gradient_check(frag, f, head=lambda y: (float(y), np.ones_like(y)), skip_kinks=True)
            assert report.errors["input"] <= 1e-4, report.errors


# -------------------------------------------------------------------- mining

def _feats(model, smp):
    images = np.stack([smp.image1.transpose(2, 0, 1), smp.image2.transpose(2, 0, 1)])
    return model.encoder.forward(images)[0]


def test_single_draw_keeps_uniform_negatives(data):
    _, items = data
    model = MONet(SMALL, seed=0)
    it = items[0]
    assert mine_negatives(model, _feats(model, it.sample), it.sample.template, it.triplets, 1,
                          np.random.default_rng(0)) is it.triplets


def test_mining_the_whole_pool_picks_the_top_scoring_negative(data):
    _, items = data
    model = MONet(SMALL, seed=1)
    for it in items[:3]:
        feats = _feats(model, it.sample)
        mined = mine_negatives(model, feats, it.sample.template, it.triplets, 10**6, np.random.default_rng(0))
        corr = it.sample.template.correspondence
        for s, trips in mined.items():
            g = SMALL.grid_size(s)
            c = feats[s].shape[1]
            f1, f2 = feats[s][0].reshape(c, -1).T, feats[s][1].reshape(c, -1).T
            for old, new in zip(it.triplets[s], trips):
                assert new._replace(negative=old.negative, o_minus=old.o_minus) == old
                assert new.o_plus > new.o_minus

                def overlap(other):
                    a, b = PatchId(1, s, *divmod(old.anchor, g)), PatchId(2, s, *divmod(other, g))
                    if old.anchor_image == 2:
                        a, b = PatchId(1, s, *divmod(other, g)), PatchId(2, s, *divmod(old.anchor, g))
                    return exact_overlap(corr, a, b)

                pool = np.array([q for q in range(g * g) if overlap(q) < old.o_plus])
                anchor = np.full(pool.size, old.anchor)
                i, j = (anchor, pool) if old.anchor_image == 1 else (pool, anchor)
                scores, _ = model.detectors[s].score_pairs(f1, f2, i, j)
                assert new.negative == pool[np.argmax(scores)]
                assert new.o_minus == overlap(new.negative)


# ------------------------------------------------------------------ training

def test_empty_streams_raise():
    model = MONet(SMALL)
    with pytest.raises(ValueError):
        pretrain(model, [], TrainConfig())
    with pytest.raises(ValueError):
        train_end_to_end(model, [], TrainConfig())
    with pytest.raises(ValueError):
        make_triplet_items(make_samples(SMALL, [], 2, seed=0, positive_fraction=0.0), SMALL, 2, seed=0)


def test_zero_learning_rate_changes_nothing(data):
    samples, items = data
    model = MONet(SMALL, seed=3)
    before = {k: t.data.copy() for k, t in model.params().items()}
    log = pretrain(model, items, TrainConfig(lr=0.0, pretrain_epochs=3), val_items=items)
    assert len(set(log.column("val_rank_loss"))) == 1
    train_end_to_end(model, samples[:2], TrainConfig(lr=0.0, e2e_epochs=1))
    for k, t in model.params().items():
        assert np.array_equal(t.data, before[k]), k


def test_pretraining_is_deterministic_and_learns(data):
    _, items = data
    tc = TrainConfig(lr=3e-3, pretrain_epochs=6, seed=4)
    runs = []
    for _ in range(2):
        model = MONet(SMALL, seed=5)
        runs.append(pretrain(model, items, tc, val_items=items).column("val_rank_loss"))
    assert runs[0] == runs[1]
    assert runs[0][-1] < runs[0][0]
    assert triplet_scores(model, items, tc)[0] == pytest.approx(runs[0][-1])


def test_pretraining_leaves_decoder_alone(data):
    _, items = data
    model = MONet(SMALL, seed=6)
    dec = {k: t.data.copy() for k, t in model.decoder.params().items()}
    pretrain(model, items, TrainConfig(lr=1e-2, pretrain_epochs=1))
    assert all(np.array_equal(t.data, dec[k]) for k, t in model.decoder.params().items())


def test_end_to_end_logs_and_resumes(data, caplog):
    samples, _ = data
    model = MONet(SMALL, seed=7)
    tc = TrainConfig(lr=1e-3, e2e_epochs=2, batch_size=2)
    with caplog.at_level(logging.WARNING, logger="monet.training"):
        log = train_end_to_end(model, samples, tc, val_samples=samples[:2], pretrained=False)
    assert "unpretrained" in caplog.text
    assert log.column("epoch") == [1, 2] and set(log.column("phase")) == {"e2e"}
    assert all(v is not None for v in log.column("val_pixel_mcc"))
    log = train_end_to_end(model, samples, tc, log_=log, start_epoch=2)
    assert log.column("epoch") == [1, 2, 3, 4]


def test_end_to_end_draws_a_fresh_stream_each_epoch(data):
    samples, _ = data
    seen = []

    def stream(epoch):
        seen.append(epoch)
        return samples[epoch % 2::2]

    train_end_to_end(MONet(SMALL, seed=8), stream, TrainConfig(lr=1e-3, e2e_epochs=3, batch_size=2), start_epoch=4)
    assert seen == [5, 6, 7]
    with pytest.raises(ValueError, match="epoch 1"):
        train_end_to_end(MONet(SMALL), lambda e: [], TrainConfig(e2e_epochs=1))
