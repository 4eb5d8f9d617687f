"""
测试深度集成：池化、AU/EU 分解与预测
"""
import numpy as np
import pytest

from ivuq.exceptions import InvalidArgumentException, UndefinedUncertaintyException
from ivuq.schemas.network import HeadSpec, TrainConfig
from ivuq.services.ensemble import (
    DeepEnsemble,
    decompose_member_moments,
    decompose_uncertainty,
    k_sweep,
    member_moments,
    member_predictions,
    member_seed,
    mixture_moments,
    pool_mixtures,
    pooled_sample,
    predict_ensemble,
    train_ensemble,
)
from ivuq.services.neuralnet import forward, init_network
from ivuq.services.prob_heads import decode_head, sample_predictions


def _random_members(rng, m: int, k: int, n: int):
    spec = HeadSpec.mdn(k)
    return [decode_head(rng.standard_normal((n, spec.output_width)), spec) for _ in range(m)]


class TestDecomposition:
    """全方差公式：pooled 方差 = AU^2 + EU^2"""

    def test_total_variance_closure(self):
        gen = np.random.default_rng(2718)
        pairs = np.stack([gen.integers(2, 11, size=10_000), gen.integers(1, 11, size=10_000)], axis=1)
        combos, counts = np.unique(pairs, axis=0, return_counts=True)
        assert counts.sum() == 10_000
        for (m, k), n in zip(combos, counts):
            # each voxel is an independent ensemble
            members = _random_members(gen, int(m), int(k), n=int(n))
            means, variances = member_moments(members)
            au, eu = decompose_member_moments(means, variances)
            _, pooled_var = mixture_moments(pool_mixtures(members))
            np.testing.assert_allclose(pooled_var, au ** 2 + eu ** 2, rtol=0, atol=1e-10)

    def test_two_point_members(self):
        means = np.array([[[0.4, 0.4, 0.4]], [[0.6, 0.6, 0.6]]])
        au, eu = decompose_member_moments(means, np.zeros_like(means))
        np.testing.assert_allclose(au, 0.0)
        np.testing.assert_allclose(eu, 0.1)

    def test_eu_invariant_to_member_order(self, rng):
        members = _random_members(rng, 4, 3, n=5)
        au, eu = decompose_member_moments(*member_moments(members))
        au_rev, eu_rev = decompose_member_moments(*member_moments(members[::-1]))
        np.testing.assert_allclose(eu_rev, eu, atol=1e-15)
        np.testing.assert_allclose(au_rev, au, atol=1e-15)

    def test_identical_members_have_zero_eu(self, rng):
        member = _random_members(rng, 1, 3, n=4)[0]
        au, eu = decompose_member_moments(*member_moments([member, member, member]))
        np.testing.assert_allclose(eu, 0.0, atol=1e-15)
        np.testing.assert_allclose(au ** 2, mixture_moments(member)[1])

    def test_single_member_undefined(self, rng):
        member = _random_members(rng, 1, 2, n=3)[0]
        with pytest.raises(UndefinedUncertaintyException):
            decompose_member_moments(*member_moments([member]))

    def test_point_members_have_nan_au(self):
        means = np.array([[[0.2, 0.4, 0.6]], [[0.4, 0.4, 0.2]]])
        au, eu = decompose_member_moments(means)
        assert np.all(np.isnan(au))
        np.testing.assert_allclose(eu, [[0.1, 0.0, 0.2]])

    def test_pooled_weights_sum_to_one(self, rng):
        pooled = pool_mixtures(_random_members(rng, 3, 2, n=5))
        assert pooled.k == 6
        np.testing.assert_allclose(pooled.weights.sum(axis=-1), 1.0, atol=1e-12)


class TestEnsembleConstruction:
    """测试集成结构校验"""

    def test_member_seeds_follow_base(self):
        assert [member_seed(40, i) for i in range(3)] == [40, 41, 42]

    def test_mismatched_members_rejected(self, schedule, ranges):
        spec = HeadSpec.gaussian()
        a = init_network([len(schedule), 8, 8, 6], seed=0, head=spec)
        b = init_network([len(schedule), 4, 4, 6], seed=1, head=spec)
        with pytest.raises(InvalidArgumentException):
            DeepEnsemble([a, b], spec, ranges, schedule)

    def test_head_width_checked(self, schedule, ranges):
        net = init_network([len(schedule), 8, 8, 6], seed=0)
        with pytest.raises(InvalidArgumentException):
            DeepEnsemble([net, net], HeadSpec.mdn(2), ranges, schedule)

    def test_single_member_training_rejected(self, small_training_set, quick_train_config):
        train, _ = small_training_set
        with pytest.raises(InvalidArgumentException):
            train_ensemble(HeadSpec.gaussian(), train, quick_train_config, m=1)


class TestTrainedEnsemble:
    """在小规模训练集上的集成"""

    def test_members_differ(self, tiny_mdn_ensemble):
        assert tiny_mdn_ensemble.size == 3
        assert tiny_mdn_ensemble.member_seeds == [11, 12, 13]
        flats = [net.flat_parameters() for net in tiny_mdn_ensemble.members]
        assert not np.array_equal(flats[0], flats[1])
        assert len(tiny_mdn_ensemble.histories) == 3

    def test_predict_shapes(self, tiny_mdn_ensemble, small_training_set, rng):
        _, validation = small_training_set
        x = validation.inputs[:20]
        result = predict_ensemble(tiny_mdn_ensemble, x, s_per_member=7, rng=rng)
        assert result.map_estimate.shape == (20, 3)
        assert result.au.shape == result.eu.shape == (20, 3)
        assert result.samples.shape == (20, 21, 3)
        assert np.all(result.au > 0) and np.all(result.eu >= 0)

    def test_percent_scaling(self, tiny_mdn_ensemble, small_training_set):
        _, validation = small_training_set
        x = validation.inputs[:10]
        au_pct, eu_pct = decompose_uncertainty(tiny_mdn_ensemble, x)
        au, eu = decompose_uncertainty(tiny_mdn_ensemble, x, percent=False)
        np.testing.assert_allclose(au_pct, 100.0 * au)
        np.testing.assert_allclose(eu_pct, 100.0 * eu)

    def test_map_inside_prior(self, tiny_mdn_ensemble, small_training_set):
        _, validation = small_training_set
        result = predict_ensemble(tiny_mdn_ensemble, validation.inputs[:50])
        assert np.all(tiny_mdn_ensemble.prior_ranges.contains(result.map_estimate))
        assert result.samples is None

    def test_point_ensemble_has_nan_au(self, tiny_point_ensemble, small_training_set, rng):
        _, validation = small_training_set
        result = predict_ensemble(tiny_point_ensemble, validation.inputs[:5], s_per_member=4, rng=rng)
        assert np.all(np.isnan(result.au))
        assert np.all(np.isfinite(result.eu))
        assert result.samples is None
        with pytest.raises(InvalidArgumentException):
            pooled_sample(tiny_point_ensemble, validation.inputs[:5], 4, rng)

    def test_single_member_pooled_sample(self, schedule, ranges, rng):
        spec = HeadSpec.mdn(2)
        net = init_network([len(schedule), 8, 8, spec.output_width], seed=3, head=spec)
        ens = DeepEnsemble([net], spec, ranges, schedule)
        x = rng.random((4, len(schedule)))
        pooled = pooled_sample(ens, x, 6, np.random.default_rng(5))
        assert pooled.shape == (4, 6, 3)
        direct = sample_predictions(decode_head(forward(net, x), spec), 6, np.random.default_rng(5))
        np.testing.assert_array_equal(pooled, direct)

    def test_outputs_per_member(self, tiny_mdn_ensemble, small_training_set):
        _, validation = small_training_set
        outputs = member_predictions(tiny_mdn_ensemble, validation.inputs[0])
        assert len(outputs) == 3
        assert outputs[0].weights.shape == (1, 3, 3)


class TestKSweep:
    """测试混合成分数扫描"""

    def test_rows_per_k(self, small_training_set):
        train, validation = small_training_set
        cfg = TrainConfig(learning_rate=1e-3, batch_size=256, epochs=1)
        rows = k_sweep([1, 2], train.subset(np.arange(400)), validation, cfg, m=2, hidden_width=8, workers=1)
        assert [r["k"] for r in rows] == [1, 2]
        assert all(np.isfinite(r["mean_validation_loss"]) for r in rows)
        assert all(r["m"] == 2 for r in rows)

    def test_requires_validation(self, small_training_set):
        train, _ = small_training_set
        with pytest.raises(InvalidArgumentException):
            k_sweep([1], train, None, TrainConfig(epochs=1), m=2)
