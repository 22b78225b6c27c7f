import math

import numpy as np
import pytest

from mhmamba import autodiff as ad
from mhmamba.autodiff import Tensor
from mhmamba.network import MHMambaNet, NetworkConfig
from mhmamba.training import (LOG_HEADER, SGD, AdamW, NonFiniteLossError, TrainConfig,
                              ce_loss, combined_loss, dice_loss, flip, one_hot, poly_lr,
                              sample_patch, train)
from oracles import naive_softmax_losses


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestLosses:
    def test_zero_logits_ce_is_ln4(self):
        labels = np.random.default_rng(0).integers(0, 4, (1, 3, 3, 3))
        assert ce_loss(T(np.zeros((1, 4, 3, 3, 3))), labels).item() == pytest.approx(math.log(4), rel=1e-15)

    def test_confident_logits(self):
        labels = np.random.default_rng(1).integers(0, 4, (1, 2, 3, 2))
        logits = one_hot(labels, 4, np.float64) * 60.0
        assert ce_loss(T(logits), labels).item() < 1e-20
        assert dice_loss(T(logits), labels).item() < 1e-6

    def test_uniform_single_class_closed_form(self):
        n = 27
        labels = np.ones((1, 3, 3, 3), np.int64)
        got = dice_loss(T(np.zeros((1, 4, 3, 3, 3))), labels).item()
        eps = 1e-5
        d1 = (2 * 0.25 * n + eps) / (0.25 * n + n + eps)
        d_empty = eps / (0.25 * n + eps)
        assert got == pytest.approx(1 - (d1 + 2 * d_empty) / 3, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_voxel_loop(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((2, 4, 3, 2, 3)) * 2
        labels = rng.integers(0, 4, (2, 3, 2, 3))
        d_ref, c_ref = naive_softmax_losses(logits, labels)
        assert dice_loss(T(logits), labels).item() == pytest.approx(d_ref, rel=1e-10)
        assert ce_loss(T(logits), labels).item() == pytest.approx(c_ref, rel=1e-10)

    def test_combined_is_equal_weighting(self):
        rng = np.random.default_rng(7)
        logits, labels = rng.standard_normal((1, 4, 2, 2, 2)), rng.integers(0, 4, (1, 2, 2, 2))
        lv = combined_loss(T(logits), labels)
        assert lv.total.item() == 0.5 * lv.dice + 0.5 * lv.ce
        assert 0 <= lv.dice <= 1 and lv.ce >= 0

    def test_label_shape_mismatch(self):
        with pytest.raises(ValueError):
            ce_loss(T(np.zeros((1, 4, 2, 2, 2))), np.zeros((1, 2, 2, 3), int))

    def test_gradient(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((1, 4, 3, 2, 2)), requires_grad=True)
        labels = rng.integers(0, 4, (1, 3, 2, 2))
        assert ad.grad_check(lambda: combined_loss(x, labels).total, [x]) < 1e-6


class TestPolyLR:
    def test_endpoints(self):
        assert poly_lr(0, 100) == 1e-3
        assert poly_lr(100, 100) == 0.0

    def test_midpoint(self):
        assert poly_lr(50, 100, 1e-3, 0.9) == 1e-3 * 0.5 ** 0.9

    def test_monotone(self):
        lrs = [poly_lr(s, 37) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            poly_lr(11, 10)


class TestSamplePatch:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.vol = rng.standard_normal((4, 6, 7, 8)).astype(np.float32)
        self.lab = rng.integers(0, 4, (6, 7, 8)).astype(np.uint8)

    def test_full_size_is_identity(self):
        img, lab = sample_patch(self.vol, self.lab, (6, 7, 8), np.random.default_rng(1))
        np.testing.assert_array_equal(img, self.vol)
        np.testing.assert_array_equal(lab, self.lab)

    def test_seeded_sequence_repeats(self):
        def crops(seed):
            rng = np.random.default_rng(seed)
            return [sample_patch(self.vol, self.lab, (3, 4, 5), rng, mirror=True) for _ in range(5)]
        for (a, la), (b, lb) in zip(crops(3), crops(3)):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(la, lb)

    def test_crop_is_a_subvolume_with_matching_labels(self):
        img, lab = sample_patch(self.vol, self.lab, (3, 4, 5), np.random.default_rng(2))
        found = [(d, h, w) for d in range(4) for h in range(4) for w in range(4)
                 if np.array_equal(self.vol[:, d:d + 3, h:h + 4, w:w + 5], img)]
        assert len(found) == 1
        d, h, w = found[0]
        np.testing.assert_array_equal(self.lab[d:d + 3, h:h + 4, w:w + 5], lab)

    def test_mirror_consistent(self):
        # labels copy channel 0's ordering, so flips must keep them aligned
        vol = np.arange(4 * 6 * 7 * 8, dtype=np.float32).reshape(4, 6, 7, 8)
        lab = (np.arange(6 * 7 * 8) % 251).reshape(6, 7, 8).astype(np.uint8)
        key = dict(zip(vol[0].ravel().tolist(), lab.ravel().tolist()))
        rng = np.random.default_rng(4)
        for _ in range(10):
            img, l2 = sample_patch(vol, lab, (3, 4, 5), rng, mirror=True)
            assert [key[v] for v in img[0].ravel().tolist()] == l2.ravel().tolist()

    def test_flip_involution(self):
        for ax in range(4):
            np.testing.assert_array_equal(flip(flip(self.vol, ax), ax), self.vol)

    def test_patch_too_large(self):
        with pytest.raises(ValueError):
            sample_patch(self.vol, self.lab, (7, 7, 8), np.random.default_rng(0))


class TestOptimisers:
    def test_sgd_step_with_decoupled_decay(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, 0.25])
        SGD([p], weight_decay=0.1).step(0.2)
        np.testing.assert_allclose(p.data, [1.0 - 0.2 * 0.5 - 0.2 * 0.1 * 1.0,
                                            -2.0 - 0.2 * 0.25 + 0.2 * 0.1 * 2.0], rtol=1e-15)

    def test_sgd_momentum_accumulates(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = SGD([p], momentum=0.9)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step(1.0)
        assert p.data[0] == pytest.approx(-(1.0 + 1.9))

    def test_adamw_first_step_is_lr_sized(self):
        p = Tensor(np.array([3.0, -3.0]), requires_grad=True)
        p.grad = np.array([10.0, -0.01])
        AdamW([p]).step(0.1)
        np.testing.assert_allclose(p.data, [2.9, -2.9], rtol=1e-6)


def tiny_data(seed=0, n=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        lab = rng.integers(0, 4, (20, 16, 16)).astype(np.uint8)
        img = (rng.standard_normal((4, 20, 16, 16)) + lab[None]).astype(np.float32)
        out.append((img, lab))
    return out


def small_net(seed=0):
    return MHMambaNet(NetworkConfig(blocks=(1, 1, 1, 1), patch=(16, 16, 16), seed=seed))


class TestTrain:
    def test_zero_lr_leaves_parameters_unchanged(self):
        net = small_net()
        before = {k: v.copy() for k, v in net.state_dict().items()}
        train(net, tiny_data(), TrainConfig(epochs=1, lr=0.0, patch=(16, 16, 16)))
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_log_reproducible_and_consistent(self):
        cfg = TrainConfig(epochs=2, patch=(16, 16, 16), seed=5)
        a = train(small_net(), tiny_data(), cfg)
        b = train(small_net(), tiny_data(), cfg)
        assert a == b
        assert a[0] == LOG_HEADER and len(a) == 3
        epoch, total, dice, ce, lr = a[1].split(",")
        assert epoch == "0" and float(lr) == cfg.lr
        # the logged total is the equal-weight sum of the logged terms
        assert float(total) == 0.5 * float(dice) + 0.5 * float(ce)

    def test_nonfinite_loss_names_culprit(self):
        net = small_net()
        net.stem.pointwise.weight.data[0, 0] = np.nan
        with pytest.raises(NonFiniteLossError, match="stem.pointwise.weight"):
            train(net, tiny_data(), TrainConfig(epochs=1, patch=(16, 16, 16)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="lbfgs")
