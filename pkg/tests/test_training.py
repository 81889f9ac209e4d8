import math

import numpy as np
import pytest

from stir.data import SyntheticSpec, generate_synthetic
from stir.training import (
    AdamW,
    FrozenPairCache,
    TrainHyper,
    TrainLog,
    stir_batch_loss,
    train_stir_epoch,
    train_triplet_epoch,
)
from stir.vit import HEAD_PARAMS, EncoderConfig, init_weights, pair_init_from_triplet

CFG = EncoderConfig(image_h=16, image_w=16, patch_size=4, embed_dim=16, num_heads=4, depth=1, head_dropout=0.0)
PLAIN = dict(flip=False, crop_scale=None, num_labels=4)


@pytest.fixture(scope="module")
def planted():
    spec = SyntheticSpec(num_classes=8, items_per_class=6, image_h=16, image_w=16, crop_scale=None, flip=False)
    manifest, images = generate_synthetic(spec)
    return images, np.array([r.label_id for r in manifest.records])


@pytest.fixture(scope="module")
def triplet_weights(planted):
    images, labels = planted
    w = init_weights(CFG, 0)
    hyper = TrainHyper(epochs=30, lr=3e-3, **PLAIN)
    opt = AdamW(hyper.lr, weight_decay=0)
    for epoch in range(hyper.epochs):
        train_triplet_epoch(images, labels, w, opt, hyper, epoch)
    return w


def test_hyper_validation():
    for bad in ({"metric": "manhattan"}, {"num_labels": 0}, {"lr": 0}, {"views": 0}, {"margin": -1}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainHyper(**bad)


class TestAdamW:
    def test_zero_gradient_no_decay_keeps_weights(self):
        w = init_weights(CFG, 0)
        before = w.copy()
        AdamW(1e-2, weight_decay=0).step(w, {n: np.zeros_like(w[n]) for n in w.names()})
        assert w.equals(before)

    def test_first_step_moves_by_lr(self):
        w = init_weights(CFG, 0)
        before = w["patch.b"].copy()
        AdamW(1e-2, weight_decay=0).step(w, {"patch.b": np.full_like(before, 3.0)})
        np.testing.assert_allclose(w["patch.b"], before - 1e-2, atol=1e-6)

    def test_decoupled_decay(self):
        w = init_weights(CFG, 0)
        before = w["patch.w"].copy()
        AdamW(0.1, weight_decay=0.5).step(w, {"patch.w": np.zeros_like(before)})
        np.testing.assert_allclose(w["patch.w"], before * 0.95, rtol=1e-6)


class TestTriplet:
    def test_loss_decreases_on_separable_pair_of_classes(self):
        spec = SyntheticSpec(num_classes=2, items_per_class=8, image_h=16, image_w=16, crop_scale=None, flip=False, noise_sigma=0.3)
        manifest, images = generate_synthetic(spec)
        labels = np.array([r.label_id for r in manifest.records])
        w = init_weights(CFG, 1)
        hyper = TrainHyper(epochs=5, lr=1e-3, num_labels=2, batches_per_epoch=4, flip=False, crop_scale=None, margin=0.5)
        opt = AdamW(hyper.lr, weight_decay=0)
        losses = [train_triplet_epoch(images, labels, w, opt, hyper, e) for e in range(5)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_satisfied_triplets_leave_weights_unchanged(self):
        spec = SyntheticSpec(num_classes=2, items_per_class=4, image_h=16, image_w=16, crop_scale=None, flip=False, noise_sigma=0.0)
        manifest, images = generate_synthetic(spec)
        labels = np.array([r.label_id for r in manifest.records])
        w = init_weights(CFG, 0)
        before = w.copy()
        # identical members give d_pos = 0 < d_neg, so with margin 0 every hinge is inactive
        hyper = TrainHyper(epochs=1, lr=1e-2, weight_decay=0, margin=0.0, num_labels=2, flip=False, crop_scale=None)
        loss = train_triplet_epoch(images, labels, w, AdamW(1e-2, weight_decay=0), hyper, 0)
        assert loss == 0.0
        assert w.equals(before)

    def test_deterministic(self, planted):
        images, labels = planted

        def run():
            w = init_weights(CFG, 0)
            hyper = TrainHyper(epochs=3, lr=1e-3, num_labels=4)
            opt = AdamW(hyper.lr)
            return [train_triplet_epoch(images, labels, w, opt, hyper, e) for e in range(3)], w

        (la, wa), (lb, wb) = run(), run()
        assert la == lb and wa.equals(wb)

    def test_empty(self):
        with pytest.raises(ValueError):
            train_triplet_epoch(np.zeros((0, 16, 16, 3)), [], init_weights(CFG, 0), AdamW(), TrainHyper(), 0)


class TestStir:
    def test_loss_at_zero_head_is_ln2(self, planted, triplet_weights):
        images, labels = planted
        w = pair_init_from_triplet(triplet_weights)
        loss, _ = stir_batch_loss(w, images[:16], labels[:16], TrainHyper(**PLAIN), rng=np.random.default_rng(0))
        assert abs(loss.item() - math.log(2)) < 1e-6

    @pytest.mark.parametrize("use_cache", [False, True])
    def test_head_only_leaves_encoder_bit_identical(self, planted, triplet_weights, use_cache):
        images, labels = planted
        w = pair_init_from_triplet(triplet_weights)
        before = w.copy()
        hyper = TrainHyper(epochs=2, head_only_epochs=2, head_lr=1e-2, batches_per_epoch=3, **PLAIN)
        cache = FrozenPairCache(images, labels, w) if use_cache else None
        opt = AdamW(hyper.lr)
        for epoch in range(2):
            train_stir_epoch(images, labels, w, opt, hyper, epoch, cache)
        assert w.equals(before, w.encoder_names())
        assert not w.equals(before, HEAD_PARAMS)

    def test_full_phase_moves_encoder(self, planted, triplet_weights):
        images, labels = planted
        w = pair_init_from_triplet(triplet_weights)
        w.params["head.w2"][:] = 0.1  # give the encoder a nonzero gradient path
        before = w.copy()
        hyper = TrainHyper(epochs=1, head_only_epochs=0, lr=1e-3, batches_per_epoch=1, **PLAIN)
        train_stir_epoch(images, labels, w, AdamW(hyper.lr), hyper, 0)
        assert not w.equals(before, ["blocks.0.attn.wq", "pos.pair"])
        assert w.equals(before, ["pos.single"])  # the pair path never reads it

    def test_ten_epochs_bring_bce_below_half(self, planted, triplet_weights):
        images, labels = planted
        w = pair_init_from_triplet(triplet_weights)
        hyper = TrainHyper(
            epochs=10, head_only_epochs=10, head_lr=3e-2, batches_per_epoch=50, pairs_per_kind=50, **PLAIN
        )
        cache = FrozenPairCache(images, labels, w)
        opt = AdamW(hyper.lr, weight_decay=0)
        losses = [train_stir_epoch(images, labels, w, opt, hyper, e, cache) for e in range(10)]
        assert all(math.isfinite(v) for v in losses)
        assert losses[-1] < 0.5, losses

    def test_cache_matches_direct_path(self, planted, triplet_weights):
        images, labels = planted
        hyper = TrainHyper(epochs=2, head_only_epochs=2, head_lr=1e-2, batches_per_epoch=4, pairs_per_kind=8, **PLAIN)

        def run(cached):
            w = pair_init_from_triplet(triplet_weights)
            cache = FrozenPairCache(images, labels, w, chunk=7) if cached else None
            opt = AdamW(hyper.lr)
            return [train_stir_epoch(images, labels, w, opt, hyper, e, cache) for e in range(2)], w

        (la, wa), (lb, wb) = run(False), run(True)
        np.testing.assert_allclose(la, lb, rtol=1e-5)
        for name in HEAD_PARAMS:
            np.testing.assert_allclose(wa[name], wb[name], atol=1e-5)

    def test_view_pool(self, planted, triplet_weights):
        images, labels = planted
        cache = FrozenPairCache(images, labels, triplet_weights, views=3, rng=np.random.default_rng(0), flip=True, crop_scale=(0.5, 1.0))
        assert len(cache) == 3 * len(images)
        assert np.array_equal(cache.images[: len(images)], images)
        assert np.array_equal(cache.labels, np.tile(labels, 3))
        feats = cache.features(np.array([0, 1, 0]), np.array([2, 3, 2]))
        assert feats.shape == (3, CFG.embed_dim) and np.array_equal(feats[0], feats[2])

    def test_deterministic(self, planted, triplet_weights):
        images, labels = planted
        hyper = TrainHyper(epochs=2, head_only_epochs=1, batches_per_epoch=2, **PLAIN)

        def run():
            w = pair_init_from_triplet(triplet_weights)
            opt = AdamW(hyper.lr)
            return [train_stir_epoch(images, labels, w, opt, hyper, e) for e in range(2)], w

        (la, wa), (lb, wb) = run(), run()
        assert la == lb and wa.equals(wb)


def test_train_log_csv():
    assert TrainLog([0.5, 0.25]).csv() == "epoch,mean_loss\n0,0.50000000\n1,0.25000000\n"
