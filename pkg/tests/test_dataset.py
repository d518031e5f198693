import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bodyimage.dataset import (
    Dataset,
    DatasetFormatError,
    MalformedHeaderError,
    TrailingDataError,
    TruncatedPayloadError,
    VersionMismatchError,
    denormalize_motor,
    downsample,
    downsample_mask,
    dumps,
    generate_dataset,
    load_dataset,
    loads,
    make_record,
    normalize_motor,
    sample_motor_babble,
    save_dataset,
)
from bodyimage.scene import SceneConfig


@pytest.fixture(scope="module")
def default_set():
    return generate_dataset(2000, SceneConfig(), seed=11)


class TestBabble:
    def test_degenerate_range(self):
        out = sample_motor_babble(50, [[0, 0]] * 4, seed=1)
        assert out.shape == (50, 4)
        assert not out.any()

    def test_law_of_large_numbers(self):
        out = sample_motor_babble(10_000, [[-1, 1]] * 4, seed=2)
        assert np.all(np.abs(out.mean(axis=0)) < 0.05)
        assert out.min() >= -1 and out.max() <= 1

    def test_same_seed_same_sequence(self):
        a = sample_motor_babble(20, [[-1, 1], [0, 2]], seed=5)
        b = sample_motor_babble(20, [[-1, 1], [0, 2]], seed=5)
        assert np.array_equal(a, b)

    def test_samples_within_ranges(self):
        ranges = np.array([[-1.0, 1.0], [-1.0, 0.0], [0.0, 1.0]])
        out = sample_motor_babble(500, ranges, seed=0)
        assert np.all(out >= ranges[:, 0]) and np.all(out <= ranges[:, 1])

    def test_reversed_range_rejected(self):
        with pytest.raises(ValueError):
            sample_motor_babble(1, [[1, -1]], seed=0)


class TestNormalise:
    def test_midpoint_and_endpoints(self):
        ranges = [[-1.0, 0.0], [0.0, 1.0]]
        np.testing.assert_allclose(normalize_motor([-0.5, 0.5], ranges), [0, 0])
        np.testing.assert_allclose(normalize_motor([-1.0, 0.0], ranges), [-1, -1])
        np.testing.assert_allclose(normalize_motor([0.0, 1.0], ranges), [1, 1])

    def test_shoulder_roll_example(self):
        # 2 * (-0.25 - (-1)) / (0 - (-1)) - 1
        assert normalize_motor([-0.25], [[-1.0, 0.0]])[0] == pytest.approx(0.5, abs=1e-15)

    @given(hnp.arrays(np.float64, 4, elements=st.floats(-1, 1)))
    def test_round_trip(self, motor):
        ranges = SceneConfig().ranges
        np.testing.assert_allclose(normalize_motor(denormalize_motor(motor, ranges), ranges), motor, atol=1e-12)

    def test_zero_width_range(self):
        with pytest.raises(ValueError):
            normalize_motor([0.0], [[0.0, 0.0]])


class TestDownsample:
    def test_factor_one_identity(self):
        img = np.random.default_rng(0).random((4, 6, 3))
        assert np.array_equal(downsample(img, 1), img)

    def test_uniform_image(self):
        img = np.full((8, 8, 3), 0.3)
        np.testing.assert_allclose(downsample(img, 4), np.full((2, 2, 3), 0.3))

    def test_block_mean(self):
        img = np.array([[0.0, 0.0], [1.0, 1.0]])[:, :, None].repeat(3, axis=2)
        np.testing.assert_allclose(downsample(img, 2), np.full((1, 1, 3), 0.5))

    def test_matches_loop_oracle(self):
        img = np.random.default_rng(1).random((6, 9, 3))
        out = downsample(img, 3)
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(out[i, j], img[3 * i:3 * i + 3, 3 * j:3 * j + 3].mean(axis=(0, 1)))

    def test_indivisible(self):
        with pytest.raises(ValueError):
            downsample(np.zeros((5, 4, 3)), 2)

    def test_mask_reductions(self):
        m = np.array([[1, 0], [1, 1]], bool)[:, :, None].repeat(3, axis=2)
        assert not downsample_mask(m, 2, "all").any()
        assert downsample_mask(m, 2, "any").all()
        with pytest.raises(ValueError):
            downsample_mask(m, 2, "most")


class TestGenerate:
    def test_empty(self):
        ds = generate_dataset(0, SceneConfig(), seed=0)
        assert len(ds) == 0
        assert ds.image_dims == (24, 32)

    def test_deterministic(self):
        a = generate_dataset(6, SceneConfig(), seed=4)
        b = generate_dataset(6, SceneConfig(), seed=4)
        assert a == b
        assert dumps(a) == dumps(b)
        assert a != generate_dataset(6, SceneConfig(), seed=5)

    def test_value_ranges(self, default_set):
        assert default_set.images.min() >= 0 and default_set.images.max() <= 1
        assert default_set.motors.min() >= -1 and default_set.motors.max() <= 1
        assert default_set.images.shape == (2000, 24, 32, 3)

    def test_empty_mask_fraction(self, default_set):
        # measured about 5% with the default joint ranges; pinned as a regression band
        empty = ~default_set.masks.reshape(len(default_set), -1).any(axis=1)
        assert 0.01 <= empty.mean() <= 0.15

    def test_body_conditionally_deterministic(self):
        cfg = SceneConfig()
        joints = [0.2, -0.3, 0.6, -0.4]
        a = make_record(joints, cfg, 1)
        b = make_record(joints, cfg, 2)
        assert np.array_equal(a.gt_mask, b.gt_mask)
        assert a.gt_mask.any()
        assert np.array_equal(a.sensory[a.gt_mask], b.sensory[b.gt_mask])
        assert not np.array_equal(a.sensory, b.sensory)

    def test_any_mode_overcounts(self):
        joints = [0.2, -0.3, 0.6, -0.4]
        strict = make_record(joints, SceneConfig(), 0).gt_mask
        loose = make_record(joints, SceneConfig(mask_reduce="any"), 0).gt_mask
        assert strict.sum() < loose.sum()
        assert not (strict & ~loose).any()


def _golden_bytes(ds):
    """Independent encoder written straight from the format description."""
    n, h, w, _ = ds.images.shape
    out = b"SMBI" + struct.pack("<5I", 1, n, h, w, ds.motors.shape[1])
    for i in range(n):
        out += struct.pack(f"<{ds.motors.shape[1]}f", *ds.motors[i])
        out += struct.pack(f"<{h * w * 3}f", *ds.images[i].ravel())
        bits = ds.masks[i].ravel()
        out += bytes(sum(int(b) << k for k, b in enumerate(bits[j:j + 8])) for j in range(0, bits.size, 8))
    return out


class TestPersistence:
    @pytest.fixture
    def small(self):
        return generate_dataset(3, SceneConfig(), seed=8)

    def test_round_trip(self, small, tmp_path):
        save_dataset(small, tmp_path / "d.smbi")
        assert load_dataset(tmp_path / "d.smbi") == small

    def test_empty_round_trip(self):
        empty = Dataset.empty((24, 32), 4)
        back = loads(dumps(empty))
        assert len(back) == 0 and back.image_dims == (24, 32) and back.motor_dim == 4

    def test_matches_independent_encoder(self, small):
        assert dumps(small) == _golden_bytes(small)

    @given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_round_trip_random(self, n, h, w, n_m, seed):
        rng = np.random.default_rng(seed)
        ds = Dataset(rng.uniform(-1, 1, (n, n_m)), rng.random((n, h, w, 3)), rng.random((n, h, w, 3)) < 0.5)
        assert loads(dumps(ds)) == ds

    def test_bad_magic(self, small):
        buf = bytearray(dumps(small))
        buf[:4] = b"XXXX"
        with pytest.raises(MalformedHeaderError, match="magic"):
            loads(bytes(buf))

    def test_short_header(self):
        with pytest.raises(MalformedHeaderError):
            loads(b"SMBI\x01")

    def test_version(self, small):
        buf = bytearray(dumps(small))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(VersionMismatchError):
            loads(bytes(buf))

    def test_truncated(self, small):
        with pytest.raises(TruncatedPayloadError):
            loads(dumps(small)[:-1])

    def test_trailing(self, small):
        with pytest.raises(TrailingDataError):
            loads(dumps(small) + b"\0")

    def test_declared_dims_disagree(self, small):
        buf = bytearray(dumps(small))
        buf[12:16] = struct.pack("<I", 25)  # H
        with pytest.raises(DatasetFormatError):
            loads(bytes(buf))
