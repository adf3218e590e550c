import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octselfnet import tensor as T
from octselfnet.backbones import build_mae
from octselfnet.data import AugmentationPipeline, ImageSet
from octselfnet.errors import ConfigError, DataError, ShapeError
from octselfnet.mae import (
    MaskSpec, PretrainConfig, batch_masks, mae_loss, mask_count, masked_mse_loss, patch_targets, patchify,
    pretrain, sample_mask, unpatchify, validation_masks,
)
from octselfnet.optim import AdamW


class TestMasking:
    def test_224_grid(self):
        assert len(sample_mask(196, 0.7, np.random.default_rng(0)).masked) == 137

    def test_small_ratio(self):
        assert len(sample_mask(10, 0.1, np.random.default_rng(0)).masked) == 1

    def test_seeded(self):
        a = sample_mask(50, 0.7, np.random.default_rng(9))
        assert a == sample_mask(50, 0.7, np.random.default_rng(9))

    def test_empty_mask_rejected(self):
        with pytest.raises(ConfigError):
            sample_mask(5, 0.1, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            sample_mask(5, 1.0, np.random.default_rng(0))

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 1000), st.sampled_from([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]), st.integers(0, 99))
    def test_count_is_floor(self, n, ratio, seed):
        # Fraction arithmetic is exact; ratio*n in floats can land a hair below an integer
        from fractions import Fraction

        expected = int(Fraction(str(ratio)) * n)
        assert mask_count(n, ratio) == expected
        if expected:
            m = sample_mask(n, ratio, np.random.default_rng(seed))
            assert len(set(m.masked)) == expected and all(0 <= i < n for i in m.masked)
            assert list(m.masked) == sorted(m.masked)

    def test_batch_masks_and_validation_masks(self):
        b = batch_masks(3, 64, 0.7, np.random.default_rng(0))
        assert b.shape == (3, 64) and np.all(b.sum(1) == 44)
        np.testing.assert_array_equal(validation_masks(5, 64, 0.7, 1), validation_masks(5, 64, 0.7, 1))
        # a mask depends on the image index only, not on how many images there are
        np.testing.assert_array_equal(validation_masks(3, 64, 0.7, 1), validation_masks(5, 64, 0.7, 1)[:3])


class TestPatchify:
    def test_shape(self):
        assert patchify(np.zeros((1, 4, 4)), 2).shape == (4, 4)

    def test_first_patch_census(self):
        img = np.arange(36.0).reshape(1, 6, 6)
        assert patchify(img, 3)[0].tolist() == [0, 1, 2, 6, 7, 8, 12, 13, 14]

    def test_channel_layout(self):
        img = np.arange(8.0).reshape(2, 2, 2)
        assert patchify(img, 2)[0].tolist() == [0, 4, 1, 5, 2, 6, 3, 7]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
    def test_round_trip(self, c, p, gh, gw):
        x = np.random.default_rng(c + p).normal(size=(2, c, gh * p, gw * p))
        np.testing.assert_array_equal(unpatchify(patchify(x, p), p, c, gh * p, gw * p), x)

    def test_errors(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 5, 4)), 2)
        with pytest.raises(ShapeError):
            unpatchify(np.zeros((3, 4)), 2, 1, 4, 4)


class TestLoss:
    def test_zero(self, rng):
        x = rng.normal(size=(4, 3))
        assert masked_mse_loss(x, x, np.array([1, 0, 1, 0], bool)).item() == 0

    def test_unmasked_error_ignored(self, rng):
        x = rng.normal(size=(4, 3))
        y = x.copy()
        y[1] += 5
        assert masked_mse_loss(x, y, MaskSpec(4, (0, 2), 0.5)).item() == 0

    def test_hand_case(self):
        pred = np.zeros((3, 1))
        target = np.array([[1.0], [3.0], [7.0]])
        assert masked_mse_loss(pred, target, np.array([1, 1, 0], bool)).item() == 5.0
        assert abs(masked_mse_loss(pred, target, np.array([1, 1, 0], bool), scope="all").item() - 59 / 3) < 1e-12

    def test_errors(self):
        with pytest.raises(ConfigError):
            masked_mse_loss(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2, bool))
        with pytest.raises(ShapeError):
            masked_mse_loss(np.zeros((2, 1)), np.zeros((3, 1)), np.ones(2, bool))

    def test_permuting_unmasked_content(self, rng):
        pred, target = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        m = np.array([1, 0, 1, 0, 0, 1], bool)
        p2 = pred.copy()
        p2[[1, 3, 4]] = p2[[4, 1, 3]]
        assert masked_mse_loss(pred, target, m).item() == masked_mse_loss(p2, target, m).item()

    def test_norm_pix(self, rng):
        t = patch_targets(rng.normal(size=(2, 1, 8, 8)) * 5 + 3, 4, norm_pix=True)
        np.testing.assert_allclose(t.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(t.var(-1), 1, atol=1e-5)


def test_single_step_decreases_loss():
    mae = build_mae("swinv2-desk", seed=0)
    rng = np.random.default_rng(0)
    decreased = 0
    for trial in range(100):
        images = rng.normal(size=(2, 1, 32, 32))
        masks = batch_masks(2, 64, 0.7, rng)
        opt = AdamW(mae, 1e-4)
        saved = {k: v.copy() for k, v in mae.state_dict().items()}
        loss = mae_loss(mae, images, masks)
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        with T.no_grad():
            after = mae_loss(mae, images, masks).item()
        decreased += after < loss.item()
        mae.load_state_dict(saved)
    assert decreased >= 95


class TestPretrainLoop:
    def cfg(self, **kw):
        base = dict(epochs=2, batch_size=4, scheme="unit", seed=0)
        base.update(kw)
        return PretrainConfig(**base)

    def test_pools_all_classes(self, tiny_domain):
        s = ImageSet([tiny_domain], "train", AugmentationPipeline("none", 32, "unit"))
        assert len(s) == 10
        assert {lab for _, lab, _ in s.items} == {"normal", "amd", "cnv", "dme"}

    def test_history_and_determinism(self, tiny_domain, tmp_path):
        a = pretrain(build_mae("swinv2-desk"), [tiny_domain], self.cfg(), run_dir=str(tmp_path))
        b = pretrain(build_mae("swinv2-desk"), [tiny_domain], self.cfg())
        assert a.history["epoch"] == [1, 2]
        assert a.history == b.history
        assert (tmp_path / "pretrain_best.ckpt").exists() and (tmp_path / "pretrain_last.ckpt").exists()
        best = int(np.argmin(a.history["val_loss"])) + 1
        assert a.checkpoint.epoch == best
        assert a.checkpoint.val_loss == min(a.history["val_loss"])

    def test_resume_matches_straight_run(self, tiny_domain, tmp_path):
        from octselfnet.checkpoint import load_checkpoint

        straight = pretrain(build_mae("vit-desk"), [tiny_domain], self.cfg(epochs=3))
        pretrain(build_mae("vit-desk"), [tiny_domain], self.cfg(epochs=1), run_dir=str(tmp_path))
        resumed = pretrain(build_mae("vit-desk"), [tiny_domain], self.cfg(epochs=3), run_dir=str(tmp_path),
                           resume=load_checkpoint(str(tmp_path / "pretrain_last.ckpt")))
        assert resumed.history == straight.history
        for k, v in straight.last.params.items():
            np.testing.assert_array_equal(resumed.last.params[k], v)

    def test_channel_guard(self, tiny_domain):
        with pytest.raises(ConfigError):
            pretrain(build_mae("vit-desk"), [tiny_domain], self.cfg(scheme="imagenet"))

    def test_empty(self):
        with pytest.raises(DataError):
            pretrain(build_mae("vit-desk"), [], self.cfg())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PretrainConfig(mask_ratio=1.0)
        with pytest.raises(ConfigError):
            PretrainConfig(lr=0)
        with pytest.raises(ConfigError):
            PretrainConfig(loss_scope="some")
        d = PretrainConfig()
        assert (d.lr, d.weight_decay, d.beta1, d.beta2, d.batch_size, d.epochs, d.mask_ratio) == \
            (1.5e-4, 0.05, 0.9, 0.95, 32, 50, 0.7)
