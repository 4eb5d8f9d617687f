"""
测试合成训练集、Shepp-Logan 体模与训练/验证划分
"""
import numpy as np
import pytest
from scipy import stats

from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.ivim import PriorRanges
from ivuq.services.ivim_model import forward_signals
from ivuq.services.synthdata import (
    CHUNK_SIZE,
    generate_phantom,
    generate_phantom_set,
    sample_training_set,
    shepp_logan_labels,
    split_train_validation,
)


class TestTrainingSet:
    """测试训练集生成"""

    def test_shapes_and_normalization(self, schedule):
        data = sample_training_set(500, seed=1)
        assert data.inputs.shape == (500, len(schedule))
        assert data.labels.shape == (500, 3)
        np.testing.assert_array_equal(data.inputs[:, 0], 1.0)

    def test_labels_inside_prior(self, ranges):
        data = sample_training_set(2000, seed=2)
        assert np.all(ranges.contains(data.labels))
        assert np.all((data.labels_normalized >= 0) & (data.labels_normalized <= 1))

    def test_labels_uniform_over_prior(self, ranges):
        data = sample_training_set(20000, seed=12, noiseless=True)
        scaled = (data.labels - ranges.lower) / ranges.width
        for column in range(3):
            assert stats.kstest(scaled[:, column], "uniform").pvalue > 1e-3

    def test_snr_inside_range(self):
        data = sample_training_set(1000, snr_range=(10.0, 20.0), seed=3)
        assert np.all((data.snr >= 10.0) & (data.snr <= 20.0))

    def test_noiseless_matches_forward_model(self, schedule):
        data = sample_training_set(100, seed=4, noiseless=True)
        expected = forward_signals(data.labels[:, 0], data.labels[:, 1], data.labels[:, 2], schedule.as_array())
        np.testing.assert_allclose(data.inputs, expected, rtol=1e-12)
        assert np.all(np.isinf(data.snr))

    def test_same_seed_same_data(self):
        a = sample_training_set(300, seed=5)
        b = sample_training_set(300, seed=5)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_independent_of_worker_count(self):
        n = CHUNK_SIZE + 500
        serial = sample_training_set(n, seed=6, workers=1)
        pooled = sample_training_set(n, seed=6, workers=2)
        np.testing.assert_array_equal(serial.inputs, pooled.inputs)

    def test_custom_prior(self):
        ranges = PriorRanges.from_tuples((0.001, 0.002), (0.1, 0.2), (0.01, 0.02))
        data = sample_training_set(500, ranges=ranges, seed=7)
        assert np.all(ranges.contains(data.labels))

    def test_non_positive_n_rejected(self):
        with pytest.raises(InvalidArgumentException):
            sample_training_set(0)

    def test_invalid_snr_range_rejected(self):
        with pytest.raises(InvalidArgumentException):
            sample_training_set(10, snr_range=(0.0, 10.0))


class TestPhantom:
    """测试 Shepp-Logan 体模"""

    def test_label_geometry(self):
        labels = shepp_logan_labels(256)
        assert set(np.unique(labels)) == {0, 1, 2, 3, 4, 5, 6}

    @pytest.mark.parametrize("size", range(16, 129))
    def test_every_roi_present(self, size):
        labels = shepp_logan_labels(size)
        assert set(np.unique(labels)) == {0, 1, 2, 3, 4, 5, 6}

    def test_phantom_at_small_sizes_has_all_rois(self):
        for size in (19, 23, 24, 28, 34):
            phantom = generate_phantom(50.0, seed=size, size=size)
            assert len(phantom.roi_ids) == 6

    def test_too_small_rejected(self):
        with pytest.raises(InvalidArgumentException):
            shepp_logan_labels(2)

    def test_default_size_labels(self):
        labels = shepp_logan_labels()
        assert labels.shape == (76, 76)
        assert set(np.unique(labels)) <= {0, 1, 2, 3, 4, 5, 6}
        assert labels[0, 0] == 0

    def test_truth_constant_per_roi(self):
        phantom = generate_phantom(50.0, seed=1)
        for roi in phantom.roi_ids:
            values = phantom.truth[phantom.roi_label == roi]
            np.testing.assert_array_equal(values, np.broadcast_to(values[0], values.shape))
        assert np.all(np.isnan(phantom.truth[phantom.roi_label == 0]))

    def test_background_is_noise(self):
        phantom = generate_phantom(25.0, seed=2)
        background = phantom.signals[phantom.roi_label == 0]
        # Rayleigh mean at sigma = 1/25
        assert np.mean(background) == pytest.approx(np.sqrt(np.pi / 2) / 25.0, rel=0.05)

    def test_same_seed_same_phantom(self):
        a = generate_phantom(100.0, seed=9)
        b = generate_phantom(100.0, seed=9)
        np.testing.assert_array_equal(a.signals, b.signals)

    def test_phantom_set_order(self):
        phantoms = generate_phantom_set((25.0, 100.0), per_snr=2, seed=3, size=32)
        assert [p.snr for p in phantoms] == [25.0, 25.0, 100.0, 100.0]
        assert not np.array_equal(phantoms[0].signals, phantoms[1].signals)

    def test_non_positive_snr_rejected(self):
        with pytest.raises(InvalidArgumentException):
            generate_phantom(0.0)


class TestSplit:
    """测试训练/验证划分"""

    def test_disjoint_and_complete(self):
        data = sample_training_set(1000, seed=8)
        train, validation = split_train_validation(data, 0.8, seed=8)
        assert len(train) == 800
        assert len(validation) == 200
        rows = np.concatenate([train.inputs, validation.inputs])
        assert np.unique(rows, axis=0).shape[0] == 1000

    def test_floor_rule(self):
        data = sample_training_set(11, seed=8)
        train, validation = split_train_validation(data, 0.5, seed=8)
        assert (len(train), len(validation)) == (5, 6)

    def test_fraction_rounding(self):
        data = sample_training_set(30, seed=8)
        train, validation = split_train_validation(data, 0.1, seed=8)
        assert (len(train), len(validation)) == (3, 27)

    def test_invalid_fraction_rejected(self):
        data = sample_training_set(10, seed=8)
        with pytest.raises(InvalidArgumentException):
            split_train_validation(data, 1.0)
