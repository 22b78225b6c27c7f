import itertools
import json

import numpy as np
import pytest

from mhmamba import autodiff as ad
from mhmamba.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mhmamba.data import (PhantomSpec, VolumeFormatError, VolumeSizeMismatchError,
                          VolumeTruncatedError, generate_phantom, phantom_center, read_header,
                          read_volume, sliding_window_infer, sliding_window_probs, tile_starts,
                          tiles, write_volume)
from mhmamba.metrics import regions_from_labels
from mhmamba.network import MHMambaNet, NetworkConfig


class TestVolumeFile:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int16, np.int32])
    def test_round_trip_bitwise(self, tmp_path, dtype):
        rng = np.random.default_rng(0)
        v = (rng.standard_normal((3, 4, 5, 6)) * 50).astype(dtype)
        write_volume(tmp_path / "v", v, spacing=(1.0, 1.0, 2.0), modalities=["a", "b", "c"])
        back = read_volume(tmp_path / "v")
        assert back.shape == (1, 3, 4, 5, 6) and back.dtype == v.dtype
        assert back[0].tobytes() == v.tobytes()
        assert read_header(tmp_path / "v")["spacing"] == [1.0, 1.0, 2.0]

    def test_nan_payload_round_trip(self, tmp_path):
        v = np.array([np.nan, -0.0, np.inf, 1e-40], dtype=np.float32).reshape(1, 1, 2, 2)
        write_volume(tmp_path / "n.raw", v)
        assert read_volume(tmp_path / "n.json")[0].tobytes() == v.tobytes()

    def test_payload_one_byte_short(self, tmp_path):
        raw = write_volume(tmp_path / "v", np.ones((1, 2, 2, 2), np.float32))
        raw.write_bytes(raw.read_bytes()[:-1])
        with pytest.raises(VolumeTruncatedError):
            read_volume(tmp_path / "v")

    def test_inflated_header_shape(self, tmp_path):
        write_volume(tmp_path / "v", np.ones((1, 2, 2, 2), np.float32))
        hdr = tmp_path / "v.json"
        h = json.loads(hdr.read_text())
        h["shape"] = [1, 2, 2, 3]
        hdr.write_text(json.dumps(h))
        with pytest.raises(VolumeSizeMismatchError):
            read_volume(tmp_path / "v")

    def test_unknown_dtype_tag(self, tmp_path):
        write_volume(tmp_path / "v", np.ones((1, 2, 2, 2), np.float32))
        hdr = tmp_path / "v.json"
        hdr.write_text(hdr.read_text().replace('"f32"', '"c64"'))
        with pytest.raises(VolumeFormatError, match="dtype"):
            read_volume(tmp_path / "v")

    def test_unsupported_array_dtype(self, tmp_path):
        with pytest.raises(VolumeFormatError):
            write_volume(tmp_path / "v", np.ones((1, 2, 2, 2), np.complex64))


def membership_counts(dims, center, radii):
    """Label histogram from an explicit per-voxel loop, innermost ellipsoid wins."""
    counts = np.zeros(4, dtype=int)
    for idx in itertools.product(*(range(d) for d in dims)):
        label = 0
        for cls, rad in enumerate(radii, start=1):
            if sum(((i - c) / r) ** 2 for i, c, r in zip(idx, center, rad)) <= 1.0:
                label = cls
        counts[label] += 1
    return counts


class TestPhantom:
    def test_counts_match_membership_loop(self):
        spec = PhantomSpec(dims=(20, 18, 16), radii=((8, 7, 6), (5, 4.5, 4), (2.5, 2, 2)),
                           jitter=1.5, noise=0.0, seed=3)
        img, lab = generate_phantom(spec)
        ref = membership_counts(spec.dims, phantom_center(spec), spec.radii)
        np.testing.assert_array_equal(np.bincount(lab.ravel(), minlength=4), ref)

    def test_noise_free_intensities(self):
        spec = PhantomSpec(dims=(16, 16, 16), radii=((6, 6, 6), (4, 4, 4), (2, 2, 2)), jitter=1.0, noise=0.0)
        img, lab = generate_phantom(spec)
        means = np.asarray(spec.intensities)
        for c in range(4):
            np.testing.assert_array_equal(img[0, c], means[c][lab[0]].astype(np.float32))

    def test_seeded_bitwise(self):
        a = generate_phantom(PhantomSpec(seed=7))
        b = generate_phantom(PhantomSpec(seed=7))
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        assert generate_phantom(PhantomSpec(seed=8))[0].tobytes() != a[0].tobytes()

    def test_default_shapes_and_nesting(self):
        img, lab = generate_phantom(PhantomSpec())
        assert img.shape == (1, 4, 64, 64, 64) and img.dtype == np.float32
        assert lab.shape == (1, 64, 64, 64) and set(np.unique(lab)) == {0, 1, 2, 3}
        r = regions_from_labels(lab)
        assert np.all(r["WT"] >= r["TC"]) and np.all(r["TC"] >= r["ET"])

    def test_radii_not_nested(self):
        with pytest.raises(ValueError, match="nested"):
            generate_phantom(PhantomSpec(radii=((10, 10, 10), (12, 5, 5), (2, 2, 2))))

    def test_does_not_fit(self):
        with pytest.raises(ValueError):
            generate_phantom(PhantomSpec(dims=(16, 16, 16)))


class ConstantModel:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def __call__(self, x):
        return np.broadcast_to(self.logits.reshape(1, -1, 1, 1, 1),
                               (x.shape[0], self.logits.size) + x.shape[2:]).copy()


def tiling_count_oracle(dims, patch, overlap):
    counts = np.zeros(dims, dtype=np.int64)
    axes = []
    for d, p in zip(dims, patch):
        stride = max(1, int(p * (1 - overlap)))
        s = 0
        starts = []
        while s + p < d:
            starts.append(s)
            s += stride
        starts.append(d - p)
        axes.append(sorted(set(starts)))
    for a, b, c in itertools.product(*axes):
        counts[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += 1
    return counts


class TestSlidingWindow:
    def test_counts_match_tiling_oracle(self):
        _, counts = sliding_window_probs(ConstantModel([0, 0, 0, 0]), np.zeros((1, 4, 48, 48, 48)),
                                         (32, 32, 32), 0.5)
        np.testing.assert_array_equal(counts, tiling_count_oracle((48, 48, 48), (32, 32, 32), 0.5))
        assert counts.min() >= 1

    @pytest.mark.parametrize("dims,patch,overlap", [((50, 33, 40), (32, 32, 16), 0.25),
                                                    ((17, 20, 9), (5, 7, 9), 0.9),
                                                    ((16, 16, 16), (16, 16, 16), 0.0)])
    def test_coverage(self, dims, patch, overlap):
        _, counts = sliding_window_probs(ConstantModel([0, 1]), np.zeros((1, 1) + dims), patch, overlap)
        np.testing.assert_array_equal(counts, tiling_count_oracle(dims, patch, overlap))
        assert counts.min() >= 1

    def test_last_tile_clamped(self):
        assert tile_starts(48, 32, 0.5) == [0, 16]
        assert tile_starts(50, 32, 0.5) == [0, 16, 18]
        assert len(tiles((48, 48, 48), (32, 32, 32), 0.5)) == 8

    def test_constant_model_uniform(self):
        probs, _ = sliding_window_probs(ConstantModel([0.0, 0.0, 0.0, 0.0]),
                                        np.zeros((1, 4, 40, 36, 33)), (16, 16, 16), 0.5)
        np.testing.assert_allclose(probs, 0.25, rtol=1e-15)

    def test_single_tile_equals_direct_forward(self):
        net = MHMambaNet(NetworkConfig(blocks=(1, 1, 1, 1), patch=(16, 16, 16)))
        x = np.random.default_rng(0).standard_normal((1, 4, 16, 16, 16)).astype(np.float32)
        with ad.no_grad():
            direct = np.argmax(net(x).logits.data, axis=1)
        np.testing.assert_array_equal(sliding_window_infer(net, x, (16, 16, 16), 0.5), direct)

    def test_order_invariant(self):
        rng = np.random.default_rng(1)

        def model(x):
            # position-dependent logits so tiles disagree where they overlap
            return np.sin(x[:, :3] * 3.0)

        vol = rng.standard_normal((1, 3, 20, 18, 22))
        base, _ = sliding_window_probs(model, vol, (8, 8, 8), 0.5)
        n = len(tiles(vol.shape[2:], (8, 8, 8), 0.5))
        perm, _ = sliding_window_probs(model, vol, (8, 8, 8), 0.5, order=rng.permutation(n))
        np.testing.assert_allclose(perm, base, rtol=1e-14, atol=1e-15)

    @pytest.mark.parametrize("patch,overlap", [((33, 16, 16), 0.5), ((16, 16, 16), 0.95)])
    def test_invalid_window(self, patch, overlap):
        with pytest.raises(ValueError):
            sliding_window_probs(ConstantModel([0, 0]), np.zeros((1, 1, 32, 32, 32)), patch, overlap)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        state = {"a.weight": rng.standard_normal((3, 2, 1, 1, 1)).astype(np.float32),
                 "a.alpha": np.asarray(np.float32(0.25)),
                 "b": np.array([np.nan, np.inf, -0.0], dtype=np.float32)}
        back = load_checkpoint(save_checkpoint(tmp_path / "c.ckpt", state))
        assert list(back) == list(state)
        for k in state:
            assert back[k].shape == state[k].shape and back[k].tobytes() == state[k].tobytes()

    def test_model_round_trip(self, tmp_path):
        net = MHMambaNet(NetworkConfig(blocks=(1, 1, 1, 1), seed=4))
        save_checkpoint(tmp_path / "m.ckpt", net.state_dict())
        other = MHMambaNet(NetworkConfig(blocks=(1, 1, 1, 1), seed=5))
        other.load_state_dict(load_checkpoint(tmp_path / "m.ckpt"))
        a, b = net.state_dict(), other.state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_header_lists_offsets(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.ckpt", {"x": np.zeros((2, 3), np.float32),
                                                     "y": np.zeros(4, np.float32)})
        head = path.read_bytes().split(b"end\n")[0].decode().splitlines()
        assert head == ["mhmamba-checkpoint 1", "params 2", "x\t2,3\t0", "y\t4\t6", "payload 40"]

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.ckpt", {"x": np.zeros(4, np.float32)})
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"hello\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk")
