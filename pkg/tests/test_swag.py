"""Weight-posterior moments, sampling, and score-variance uncertainty."""

import numpy as np
import pytest

from coregate.adapter import flatten_trainable, forward, init_adapter, unflatten_trainable
from coregate.errors import ConfigError, DataError, NumericError
from coregate.memory import MemoryBank
from coregate.scoring import score_image
from coregate.swag import SwagState, sample_adapter, sample_seed, snapshot, uncertainty

from conftest import random_features, unit_rows


def make_params(seed=0):
    return init_adapter((3, 5), out_dim=6, rng_seed=seed)


def make_bank(rng, m=12, dim=12):
    return MemoryBank(vectors=unit_rows(rng, m, dim).astype(np.float64),
                      source_ids=np.zeros(m, dtype=np.int64),
                      built_from="seed", coreset_ratio=1.0)


class TestMoments:
    def test_two_point_moments_exact(self):
        params = make_params()
        state = SwagState.init(params)
        a = flatten_trainable(params).copy()
        snapshot(state, params)
        b = a + 2.0
        snapshot(state, unflatten_trainable(b, params))
        np.testing.assert_allclose(state.mean, (a + b) / 2, atol=1e-14)
        np.testing.assert_allclose(state.sq_mean, (a ** 2 + b ** 2) / 2,
                                   atol=1e-12)
        # population variance of {a_i, a_i + 2} is 1 in every coordinate
        np.testing.assert_allclose(state.diag_variance(), 1.0, atol=1e-10)

    def test_running_mean_matches_batch_mean(self, rng):
        params = make_params()
        state = SwagState.init(params)
        thetas = []
        for _ in range(5):
            vec = rng.normal(size=state.mean.size)
            thetas.append(vec)
            snapshot(state, unflatten_trainable(vec, params))
        np.testing.assert_allclose(state.mean, np.mean(thetas, axis=0),
                                   atol=1e-12)
        np.testing.assert_allclose(state.diag_variance(),
                                   np.var(thetas, axis=0), atol=1e-12)

    def test_snapshot_rejects_non_finite(self):
        params = make_params()
        state = SwagState.init(params)
        params.scales[0].weight[0, 0] = np.nan
        with pytest.raises(NumericError):
            snapshot(state, params)

    def test_keep_snapshots_retains_raw_vectors(self):
        params = make_params()
        state = SwagState.init(params, keep_snapshots=True)
        snapshot(state, params)
        assert len(state.snapshots) == 1
        np.testing.assert_array_equal(state.snapshots[0],
                                      flatten_trainable(params))


class TestSampling:
    def test_identical_snapshots_sample_the_mean(self):
        params = make_params()
        state = SwagState.init(params)
        snapshot(state, params)
        snapshot(state, params)
        drawn = sample_adapter(state, params, rng_seed=7)
        np.testing.assert_array_equal(flatten_trainable(drawn), state.mean)

    def test_zero_noise_scale_samples_the_mean(self):
        params = make_params()
        state = SwagState.init(params)
        snapshot(state, params)
        other = unflatten_trainable(flatten_trainable(params) + 1.0, params)
        snapshot(state, other)
        drawn = sample_adapter(state, params, rng_seed=7, noise_scale=0.0)
        np.testing.assert_array_equal(flatten_trainable(drawn), state.mean)

    def test_sample_determinism(self):
        params = make_params()
        state = SwagState.init(params)
        snapshot(state, params)
        snapshot(state, unflatten_trainable(flatten_trainable(params) + 0.5,
                                            params))
        seed = sample_seed(123, 42, 0)
        a = sample_adapter(state, params, seed)
        b = sample_adapter(state, params, sample_seed(123, 42, 0))
        assert np.array_equal(flatten_trainable(a), flatten_trainable(b))
        c = sample_adapter(state, params, sample_seed(123, 42, 1))
        assert not np.array_equal(flatten_trainable(a), flatten_trainable(c))

    def test_sample_spread_matches_noise_scale(self):
        # MC std of each coordinate should track s * sqrt(var) closely
        params = make_params()
        state = SwagState.init(params, noise_scale=0.05)
        base = flatten_trainable(params)
        snapshot(state, unflatten_trainable(base - 1.0, params))
        snapshot(state, unflatten_trainable(base + 1.0, params))
        draws = np.stack([
            flatten_trainable(sample_adapter(state, params, rng_seed=i))
            for i in range(4000)
        ])
        np.testing.assert_allclose(draws.mean(axis=0), state.mean, atol=5e-3)
        got_std = draws.std(axis=0)
        np.testing.assert_allclose(got_std, 0.05, rtol=0.05)

    def test_sampling_without_snapshots(self):
        params = make_params()
        state = SwagState.init(params)
        with pytest.raises(DataError, match="no snapshots"):
            sample_adapter(state, params, rng_seed=0)


class TestUncertainty:
    def test_matches_manual_loop(self, rng):
        params = make_params(3)
        state = SwagState.init(params, noise_scale=0.1)
        snapshot(state, params)
        snapshot(state, unflatten_trainable(
            flatten_trainable(params) + rng.normal(size=state.mean.size) * 0.2,
            params))
        feats = random_features(rng)
        bank = make_bank(rng)
        got = uncertainty(feats, state, params, bank, sample_count=5,
                          k=2, top_q=0.5, global_seed=99, image_id=17)
        scores = []
        for j in range(5):
            drawn = sample_adapter(state, params, sample_seed(99, 17, j))
            emb = forward(feats, drawn, mode="eval")
            scores.append(score_image(emb, bank, k=2, top_q=0.5).image_score)
        assert got == pytest.approx(float(np.var(scores)), abs=1e-15)

    def test_zero_variance_posterior_gives_zero(self, rng):
        params = make_params(3)
        state = SwagState.init(params)
        snapshot(state, params)
        snapshot(state, params)
        got = uncertainty(random_features(rng), state, params, make_bank(rng),
                          sample_count=4)
        assert got == 0.0

    def test_order_independent_per_image(self, rng):
        # the same image id sees the same sampled adapters regardless of
        # when it is scored
        params = make_params(3)
        state = SwagState.init(params, noise_scale=0.1)
        snapshot(state, params)
        snapshot(state, unflatten_trainable(
            flatten_trainable(params) + 0.3, params))
        feats = random_features(rng)
        bank = make_bank(rng)
        kwargs = dict(sample_count=3, global_seed=5, image_id=8)
        first = uncertainty(feats, state, params, bank, **kwargs)
        # interleave a different image, then re-score
        uncertainty(random_features(rng), state, params, bank,
                    sample_count=3, global_seed=5, image_id=9)
        again = uncertainty(feats, state, params, bank, **kwargs)
        assert first == again

    def test_bad_sample_count(self, rng):
        params = make_params()
        state = SwagState.init(params)
        snapshot(state, params)
        with pytest.raises(ConfigError):
            uncertainty(random_features(rng), state, params, make_bank(rng),
                        sample_count=0)
