"""Patchify/mask/reconstruct machinery and the feature-extractor swap."""

import numpy as np
import pytest

from emorec import mae
from emorec.autodiff import Tensor
from emorec.errors import ConfigError, DegenerateMaskError


def test_patchify_count_arithmetic():
    grid = mae.patchify(np.zeros((32, 32, 1)), 16)
    assert grid.num_patches == 4
    assert grid.patches.shape == (4, 256)


def test_patchify_unpatchify_inverse():
    rng = np.random.default_rng(0)
    image = rng.normal(size=(48, 32, 3))
    grid = mae.patchify(image, 16)
    assert grid.patches.shape == (6, 16 * 16 * 3)
    assert np.array_equal(mae.unpatchify(grid), image)


def test_patchify_constant_image():
    grid = mae.patchify(np.full((32, 32, 1), 7.0), 16)
    assert np.all(grid.patches == 7.0)


def test_patchify_rejects_indivisible():
    with pytest.raises(ConfigError):
        mae.patchify(np.zeros((30, 32, 1)), 16)


def test_patchify_batch_matches_single():
    rng = np.random.default_rng(1)
    images = rng.normal(size=(3, 32, 32, 2))
    batch = mae.patchify_batch(images, 16)
    for i in range(3):
        assert np.array_equal(batch[i], mae.patchify(images[i], 16).patches)


def test_sample_mask_counts():
    plan = mae.sample_mask(4, 0.75, 0)
    assert len(plan.masked) == 3 and len(plan.visible) == 1
    plan = mae.sample_mask(196, 0.75, 0)
    assert len(plan.masked) == 147


def test_sample_mask_partition():
    for seed in range(10):
        plan = mae.sample_mask(24, 0.6, seed)
        joined = np.concatenate([plan.masked, plan.visible])
        assert sorted(joined.tolist()) == list(range(24))


def test_sample_mask_deterministic_per_seed():
    a = mae.sample_mask(64, 0.75, 1234)
    b = mae.sample_mask(64, 0.75, 1234)
    assert np.array_equal(a.masked, b.masked)
    assert np.array_equal(a.visible, b.visible)


def test_sample_mask_degenerate_rejected():
    with pytest.raises(DegenerateMaskError):
        mae.sample_mask(4, 0.05, 0)  # rounds to masking nothing
    with pytest.raises(DegenerateMaskError):
        mae.sample_mask(4, 0.95, 0)  # rounds to masking everything
    with pytest.raises(DegenerateMaskError):
        mae.sample_mask(4, 1.5, 0)


def test_reconstruction_loss_perfect_and_offset():
    rng = np.random.default_rng(2)
    target = rng.normal(size=(4, 256))
    plan = mae.sample_mask(4, 0.75, 0)
    assert mae.reconstruction_loss(Tensor(target), target, plan).item() == 0.0
    off = target.copy()
    off[plan.masked] += 1.0
    assert mae.reconstruction_loss(Tensor(off), target, plan).item() == pytest.approx(1.0)
    # visible patches do not contribute
    off2 = target.copy()
    off2[plan.visible] += 100.0
    assert mae.reconstruction_loss(Tensor(off2), target, plan).item() == 0.0


def test_reconstruction_loss_matches_two_line_oracle():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(16, 64))
    target = rng.normal(size=(16, 64))
    plan = mae.sample_mask(16, 0.75, 5)
    mine = mae.reconstruction_loss(Tensor(pred), target, plan).item()
    oracle = float(np.mean((pred[plan.masked] - target[plan.masked]) ** 2))
    assert mine == pytest.approx(oracle, abs=1e-10)


def tiny_mae(seed=0):
    cfg = mae.MaeConfig(image_size=32, channels=1, patch_size=16,
                        enc_width=32, enc_depth=2, enc_heads=2,
                        dec_width=16, dec_depth=1, dec_heads=2)
    return mae.MaeModel(cfg, np.random.default_rng(seed))


def test_forward_pretrain_loss_matches_per_image_op():
    model = tiny_mae()
    model.eval()
    rng = np.random.default_rng(4)
    images = rng.uniform(0, 1, size=(3, 32, 32, 1))
    loss, pred, plans = model.forward_pretrain(images, np.random.default_rng(7))
    target = mae.patchify_batch(images, 16)
    per_image = [
        mae.reconstruction_loss(Tensor(pred.data[i]), target[i], plans[i]).item()
        for i in range(3)
    ]
    assert loss.item() == pytest.approx(np.mean(per_image), abs=1e-12)


def test_pretrain_gradient_reaches_encoder():
    model = tiny_mae()
    rng = np.random.default_rng(5)
    images = rng.uniform(0, 1, size=(4, 32, 32, 1))
    loss, _, _ = model.forward_pretrain(images, rng)
    loss.backward()
    total = 0.0
    for name, p in model.named_parameters():
        if name.startswith("encoder.") or name.startswith("patch_embed."):
            assert p.grad is not None, name
            total += float(np.abs(p.grad).sum())
    assert total > 0.0


def test_head_swap_keeps_encoder_weights_and_drops_decoder():
    model = tiny_mae()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    clf = mae.finetune_head_swap(model, num_classes=8, rng=np.random.default_rng(1))
    after = dict(model.named_parameters())
    for name, data in before.items():
        assert np.array_equal(after[name].data, data), name
    clf_names = [n for n, _ in clf.named_parameters()]
    assert not any("decoder" in n or "mask_token" in n or "pixel_head" in n
                   for n in clf_names)
    assert any(n.startswith("encoder.") for n in clf_names)
    # the encoder tensors are shared, not copied
    assert clf.patch_embed.weight is model.patch_embed.weight


def test_classifier_logits_shape_and_finite_on_zero_image():
    model = tiny_mae()
    clf = mae.finetune_head_swap(model, num_classes=8, rng=np.random.default_rng(2))
    clf.eval()
    logits = clf(np.zeros((5, 32, 32, 1)))
    assert logits.shape == (5, 8)
    assert np.all(np.isfinite(logits.data))


def test_extract_features_shapes_and_determinism():
    model = tiny_mae()
    clf = mae.finetune_head_swap(model, num_classes=8, rng=np.random.default_rng(3))
    rng = np.random.default_rng(6)
    frames = rng.uniform(0, 1, size=(7, 32, 32, 1))
    feats = mae.extract_features(clf, frames)
    assert feats.shape == (7, 32)  # encoder width propagates
    again = mae.extract_features(clf, frames)
    assert np.array_equal(feats, again)
    same = mae.extract_features(clf, np.stack([frames[0], frames[0]]))
    assert np.array_equal(same[0], same[1])


def test_extract_features_uint8_images():
    model = tiny_mae()
    frames = np.zeros((3, 32, 32, 1), dtype=np.uint8)
    feats = mae.extract_features(model, frames)
    assert feats.shape == (3, 32)
    assert np.all(np.isfinite(feats))


def test_default_encoder_width_propagates_to_features():
    model = mae.MaeModel(mae.MaeConfig(), np.random.default_rng(0))
    feats = mae.extract_features(model, np.zeros((2, 32, 32, 1)))
    assert feats.shape == (2, 64)


def test_synthetic_images_range():
    images = mae.synthetic_images(8, 32, np.random.default_rng(0))
    assert images.shape == (8, 32, 32, 1)
    assert images.min() >= 0.0 and images.max() <= 1.0
    assert images.std() > 0.05  # non-degenerate
