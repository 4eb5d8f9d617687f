"""
测试输出头：解码、损失、MAP 与采样
"""
import numpy as np
import pytest
from scipy import stats

from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.network import SIGMA_FLOOR, HeadSpec
from ivuq.schemas.prediction import MixturePrediction
from ivuq.services.ensemble import mixture_moments
from ivuq.services.prob_heads import (
    GaussianHead,
    MixtureDensityHead,
    PointHead,
    decode_head,
    gaussian_raw_to_mdn,
    loss_nll_gaussian,
    loss_nll_mixture,
    make_head,
    map_normalized,
    map_point_estimate,
    sample_prediction,
    sample_predictions,
)


class TestDecode:
    """测试原始输出解码"""

    def test_point_is_sigmoid(self):
        triple = decode_head(np.array([0.0, 100.0, -100.0]), HeadSpec.point())
        np.testing.assert_allclose(triple, [0.5, 1.0, 0.0], atol=1e-12)

    def test_mdn_constraints(self, rng):
        spec = HeadSpec.mdn(4)
        pred = decode_head(5.0 * rng.standard_normal((7, spec.output_width)), spec)
        assert pred.weights.shape == (7, 3, 4)
        np.testing.assert_allclose(pred.weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all((pred.means > 0) & (pred.means < 1))
        assert np.all(pred.stds >= SIGMA_FLOOR)

    def test_weights_stay_on_simplex(self):
        gen = np.random.default_rng(99)
        for k in range(1, 11):
            spec = HeadSpec.mdn(k)
            raw = 30.0 * gen.standard_normal((100_000, spec.output_width))
            pred = decode_head(raw, spec)
            assert np.all(pred.weights >= 0.0)
            np.testing.assert_allclose(pred.weights.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(np.isfinite(pred.stds)) and np.all(pred.stds >= SIGMA_FLOOR)

    def test_std_floor_on_very_negative_raw(self):
        raw = np.concatenate([np.zeros(3), np.full(3, -1e3)])
        pred = decode_head(raw, HeadSpec.gaussian())
        np.testing.assert_allclose(pred.stds[..., 0], SIGMA_FLOOR)

    def test_wrong_width_rejected(self):
        with pytest.raises(InvalidArgumentException):
            decode_head(np.zeros(8), HeadSpec.mdn(1))

    def test_make_head(self):
        assert isinstance(make_head(HeadSpec.point()), PointHead)
        assert isinstance(make_head(HeadSpec.gaussian()), GaussianHead)
        assert isinstance(make_head(HeadSpec.mdn(3)), MixtureDensityHead)

    def test_gaussian_k_must_be_one(self):
        with pytest.raises(ValueError):
            HeadSpec(kind="gaussian", k=2)


class TestLoss:
    """测试损失值与参考实现一致"""

    def test_gaussian_nll_matches_scipy(self, rng):
        raw = rng.standard_normal((5, 6))
        y = rng.random((5, 3))
        pred = decode_head(raw, HeadSpec.gaussian())
        expected = -np.mean(np.sum(
            stats.norm.logpdf(y, pred.means[..., 0], pred.stds[..., 0]), axis=-1
        ))
        assert GaussianHead().loss(raw, y) == pytest.approx(expected, rel=1e-12)

    def test_mixture_nll_matches_scipy(self, rng):
        spec = HeadSpec.mdn(3)
        raw = rng.standard_normal((4, spec.output_width))
        y = rng.random((4, 3))
        pred = decode_head(raw, spec)
        density = np.sum(pred.weights * stats.norm.pdf(y[..., None], pred.means, pred.stds), axis=-1)
        expected = -np.mean(np.sum(np.log(density), axis=-1))
        assert MixtureDensityHead(spec).loss(raw, y) == pytest.approx(expected, rel=1e-10)

    def test_mixture_nll_finite_far_from_components(self):
        pred = MixturePrediction(
            weights=np.full((3, 2), 0.5),
            means=np.full((3, 2), 0.01),
            stds=np.full((3, 2), SIGMA_FLOOR),
        )
        assert np.isfinite(loss_nll_mixture(pred, np.ones(3)))

    def test_gaussian_nll_zero_at_unit_density(self):
        std = np.full((4, 3), 1.0 / np.sqrt(2.0 * np.pi))
        mean = np.full((4, 3), 0.3)
        assert loss_nll_gaussian(mean, std, mean) == pytest.approx(0.0, abs=1e-12)

    def test_two_component_value(self):
        pred = MixturePrediction(
            weights=np.full((3, 2), 0.5),
            means=np.tile([0.0, 1.0], (3, 1)),
            stds=np.full((3, 2), 0.1),
        )
        per_parameter = -np.log(0.5 * stats.norm.pdf(0.0, 0.0, 0.1) + 0.5 * stats.norm.pdf(0.0, 1.0, 0.1))
        assert loss_nll_mixture(pred, np.zeros(3)) == pytest.approx(3.0 * per_parameter, rel=1e-12)

    def test_mixture_invariant_to_component_order(self, rng):
        spec = HeadSpec.mdn(4)
        pred = decode_head(rng.standard_normal((8, spec.output_width)), spec)
        y = rng.random((8, 3))
        perm = rng.permutation(4)
        permuted = MixturePrediction(
            weights=pred.weights[..., perm], means=pred.means[..., perm], stds=pred.stds[..., perm]
        )
        assert loss_nll_mixture(permuted, y) == pytest.approx(loss_nll_mixture(pred, y), abs=1e-12)
        np.testing.assert_array_equal(map_normalized(permuted), map_normalized(pred))

    def test_raw_block_permutation(self, rng):
        k = 3
        spec = HeadSpec.mdn(k)
        raw = rng.standard_normal((5, spec.output_width))
        y = rng.random((5, 3))
        perm = np.array([2, 0, 1])
        # columns are (block, parameter, component)
        columns = np.arange(spec.output_width).reshape(3, 3, k)[..., perm].reshape(-1)
        head = MixtureDensityHead(spec)
        assert head.loss(raw[:, columns], y) == pytest.approx(head.loss(raw, y), abs=1e-12)

    def test_point_mse(self):
        raw = np.zeros((2, 3))
        y = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])
        assert PointHead().loss(raw, y) == pytest.approx(0.5)


class TestSingleComponentEquivalence:
    """K=1 混合与高斯头逐项一致"""

    def test_loss_and_gradient(self, rng):
        raw = rng.standard_normal((6, 6))
        y = rng.random((6, 3))
        g_loss, g_grad = GaussianHead().loss_and_grad(raw, y)
        m_loss, m_grad = MixtureDensityHead(HeadSpec.mdn(1)).loss_and_grad(gaussian_raw_to_mdn(raw), y)
        assert m_loss == pytest.approx(g_loss, abs=1e-12)
        np.testing.assert_allclose(m_grad[:, :6], g_grad, atol=1e-12)
        np.testing.assert_array_equal(m_grad[:, 6:], 0.0)

    def test_map_and_moments(self, rng):
        raw = rng.standard_normal((6, 6))
        gaussian = decode_head(raw, HeadSpec.gaussian())
        mdn = decode_head(gaussian_raw_to_mdn(raw), HeadSpec.mdn(1))
        np.testing.assert_allclose(map_normalized(mdn), map_normalized(gaussian), atol=1e-12)
        for a, b in zip(mixture_moments(mdn), mixture_moments(gaussian)):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestMap:
    """测试 MAP 估计"""

    def test_highest_weight_component(self):
        pred = MixturePrediction(
            weights=np.tile([0.2, 0.5, 0.3], (3, 1)),
            means=np.tile([0.1, 0.6, 0.9], (3, 1)),
            stds=np.full((3, 3), 0.05),
        )
        np.testing.assert_allclose(map_normalized(pred), [0.6, 0.6, 0.6])

    def test_ties_go_to_lowest_index(self):
        pred = MixturePrediction(
            weights=np.full((3, 2), 0.5),
            means=np.tile([0.25, 0.75], (3, 1)),
            stds=np.full((3, 2), 0.05),
        )
        np.testing.assert_allclose(map_normalized(pred), [0.25, 0.25, 0.25])

    def test_physical_units(self, ranges):
        params = map_point_estimate(np.array([0.5, 0.5, 0.5]), ranges)
        assert params.d == pytest.approx(0.0015)
        assert params.f == pytest.approx(0.2)
        assert params.d_star == pytest.approx(0.1015)


class TestSampling:
    """测试从混合分布采样"""

    def test_sample_moments(self, rng):
        pred = MixturePrediction(
            weights=np.tile([0.3, 0.7], (3, 1)),
            means=np.tile([0.2, 0.6], (3, 1)),
            stds=np.tile([0.05, 0.1], (3, 1)),
        )
        draws = sample_prediction(pred, 200_000, rng)
        assert draws.shape == (200_000, 3)
        mean, var = mixture_moments(pred)
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.003)
        np.testing.assert_allclose(draws.var(axis=0), var, rtol=0.03)

    def test_component_frequencies_follow_weights(self, rng):
        weights = np.array([0.2, 0.5, 0.3])
        means = np.array([0.1, 0.5, 0.9])
        pred = MixturePrediction(
            weights=np.tile(weights, (3, 1)), means=np.tile(means, (3, 1)), stds=np.full((3, 3), 1e-4)
        )
        s = 100_000
        draws = sample_prediction(pred, s, rng)
        for p in range(3):
            component = np.argmin(np.abs(draws[:, p, None] - means), axis=-1)
            counts = np.bincount(component, minlength=3)
            bound = 4.0 * np.sqrt(s * weights * (1.0 - weights))
            assert np.all(np.abs(counts - s * weights) <= bound)
            assert stats.chisquare(counts, s * weights).pvalue > 1e-3

    def test_narrow_single_component_mean(self, rng):
        pred = MixturePrediction(
            weights=np.ones((3, 1)), means=np.full((3, 1), 0.4), stds=np.full((3, 1), SIGMA_FLOOR)
        )
        s = 100_000
        draws = sample_prediction(pred, s, rng)
        np.testing.assert_allclose(draws.mean(axis=0), 0.4, atol=3.0 * SIGMA_FLOOR / np.sqrt(s))

    def test_batch_shape(self, rng):
        spec = HeadSpec.mdn(2)
        pred = decode_head(rng.standard_normal((5, spec.output_width)), spec)
        assert sample_predictions(pred, 8, rng).shape == (5, 8, 3)

    def test_zero_weight_component_never_drawn(self, rng):
        pred = MixturePrediction(
            weights=np.tile([1.0, 0.0], (3, 1)),
            means=np.tile([0.2, 0.9], (3, 1)),
            stds=np.full((3, 2), 1e-3),
        )
        draws = sample_prediction(pred, 5000, rng)
        assert np.all(draws < 0.5)

    def test_non_positive_count_rejected(self, rng):
        pred = MixturePrediction(weights=np.ones((3, 1)), means=np.full((3, 1), 0.5), stds=np.full((3, 1), 0.1))
        with pytest.raises(InvalidArgumentException):
            sample_predictions(pred, 0, rng)
