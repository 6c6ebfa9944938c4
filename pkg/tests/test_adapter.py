"""Adapter forward/backward math, verified against finite differences and a
straight-line reimplementation of the loss."""

import numpy as np
import pytest

from coregate.adapter import (
    AdamState,
    AdapterParams,
    PrototypeSet,
    batch_loss_gradient,
    flatten_trainable,
    forward,
    init_adapter,
    training_loss,
    unflatten_trainable,
    warmup,
)
from coregate.dataio import MultiScaleFeatures
from coregate.errors import ConfigError, DataError

from conftest import random_features, unit_rows


def fd_gradient(loss_fn, params, h=1e-5):
    """Central-difference gradient over the flattened trainables."""
    theta = flatten_trainable(params)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        grad[i] = (loss_fn(unflatten_trainable(plus, params))
                   - loss_fn(unflatten_trainable(minus, params))) / (2 * h)
    return grad


def flat_gradient(grads, params):
    parts = []
    for s_idx in range(len(params.scales)):
        for name in ("weight", "bias", "norm_scale", "norm_shift"):
            parts.append(grads[s_idx][name].ravel())
    return np.concatenate(parts)


def loss_by_hand(features_list, params, protos):
    """Independent recomputation of the batch training loss: project, pool
    batch statistics per scale, normalize + ReLU, upsample to the largest
    grid, concatenate, row-normalize, mean nearest-prototype distance.
    Restricted to equal grids per image so no interpolation is involved."""
    per_scale_acts = []
    for s_idx, sp in enumerate(params.scales):
        cols = []
        for feats in features_list:
            c, h, w = feats.scales[s_idx].shape
            cols.append(feats.scales[s_idx].astype(np.float64).reshape(c, h * w))
        x = np.concatenate(cols, axis=1)
        a = sp.weight @ x + sp.bias[:, None]
        mean, var = a.mean(axis=1), a.var(axis=1)
        xhat = (a - mean[:, None]) / np.sqrt(var + 1e-5)[:, None]
        per_scale_acts.append(np.maximum(sp.norm_scale[:, None] * xhat
                                         + sp.norm_shift[:, None], 0.0))
    total, count = 0.0, 0
    col = 0
    for feats in features_list:
        h, w = feats.scales[0].shape[1:]
        n_loc = h * w
        v = np.concatenate([acts[:, col:col + n_loc] for acts in per_scale_acts],
                           axis=0).T
        q = v / (np.linalg.norm(v, axis=1, keepdims=True) + 1e-12)
        d = np.sqrt(np.maximum(
            np.sum(q * q, axis=1)[:, None] - 2.0 * q @ protos.vectors.T
            + np.sum(protos.vectors * protos.vectors, axis=1)[None, :], 0.0))
        total += d.min(axis=1).sum()
        count += n_loc
        col += n_loc
    return total / count


class TestForward:
    def test_unit_rows_and_grid(self, rng):
        params = init_adapter((3, 5), out_dim=8, rng_seed=2)
        emb = forward(random_features(rng), params)
        assert (emb.grid_h, emb.grid_w, emb.dim) == (3, 3, 16)
        np.testing.assert_allclose(
            np.linalg.norm(emb.vectors.astype(np.float64), axis=1), 1.0,
            atol=1e-5)

    def test_eval_is_pure(self, rng):
        params = init_adapter((3, 5), out_dim=8, rng_seed=2)
        feats = random_features(rng)
        before = flatten_trainable(params).copy()
        rm = params.scales[0].running_mean.copy()
        a = forward(feats, params, mode="eval")
        b = forward(feats, params, mode="eval")
        assert np.array_equal(a.vectors, b.vectors)
        assert np.array_equal(flatten_trainable(params), before)
        assert np.array_equal(params.scales[0].running_mean, rm)

    def test_train_mode_moves_running_stats(self, rng):
        params = init_adapter((3, 5), out_dim=8, rng_seed=2)
        rm = params.scales[0].running_mean.copy()
        forward(random_features(rng), params, mode="train")
        assert not np.array_equal(params.scales[0].running_mean, rm)

    def test_bad_mode(self, rng):
        params = init_adapter((3, 5), out_dim=8)
        with pytest.raises(ConfigError):
            forward(random_features(rng), params, mode="test")

    def test_channel_mismatch(self, rng):
        params = init_adapter((4, 5), out_dim=8)
        with pytest.raises(DataError, match="channels"):
            forward(random_features(rng), params)


class TestLoss:
    def test_matches_straight_line_recomputation(self, rng):
        params = init_adapter((3, 4), out_dim=6, rng_seed=7)
        feats = [MultiScaleFeatures(scales=(
            rng.normal(size=(3, 3, 3)).astype(np.float32),
            rng.normal(size=(4, 3, 3)).astype(np.float32),
        )) for _ in range(3)]
        protos = PrototypeSet(unit_rows(rng, 5, 12))
        got = training_loss(feats, params, protos)
        want = loss_by_hand(feats, params, protos)
        assert got == pytest.approx(want, rel=1e-12)

    def test_loss_matches_gradient_call(self, rng):
        params = init_adapter((3, 5), out_dim=6, rng_seed=7)
        feats = [random_features(rng) for _ in range(2)]
        protos = PrototypeSet(unit_rows(rng, 4, 12))
        loss, _ = batch_loss_gradient(feats, params, protos)
        assert loss == pytest.approx(training_loss(feats, params, protos),
                                     rel=1e-12)

    def test_dim_mismatch(self, rng):
        params = init_adapter((3, 5), out_dim=6)
        protos = PrototypeSet(unit_rows(rng, 4, 5))
        with pytest.raises(DataError):
            training_loss([random_features(rng)], params, protos)


class TestGradient:
    def _case(self, seed, grids=((3, 3), (3, 3))):
        rng = np.random.default_rng(seed)
        channels = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        out_dim = int(rng.integers(3, 9))
        params = init_adapter(channels, out_dim=out_dim, rng_seed=seed)
        feats = [random_features(rng, channels, grids) for _ in range(2)]
        protos = PrototypeSet(unit_rows(rng, 6, 2 * out_dim))
        return feats, params, protos

    @pytest.mark.parametrize("seed", [11, 12, 13, 14, 15])
    def test_finite_difference(self, seed):
        feats, params, protos = self._case(seed)
        _, grads = batch_loss_gradient(feats, params, protos)
        analytic = flat_gradient(grads, params)
        numeric = fd_gradient(
            lambda p: training_loss(feats, p, protos), params, h=1e-5)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-4

    @pytest.mark.parametrize("seed", [21, 22, 23])
    def test_finite_difference_with_resize(self, seed):
        # unequal grids exercise the interpolation transpose in the backward
        feats, params, protos = self._case(seed, grids=((3, 3), (2, 2)))
        _, grads = batch_loss_gradient(feats, params, protos)
        analytic = flat_gradient(grads, params)
        numeric = fd_gradient(
            lambda p: training_loss(feats, p, protos), params, h=1e-5)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-4

    def test_directional_derivative(self, rng):
        feats, params, protos = self._case(31)
        _, grads = batch_loss_gradient(feats, params, protos)
        g = flat_gradient(grads, params)
        theta = flatten_trainable(params)
        d = rng.normal(size=theta.size)
        d /= np.linalg.norm(d)
        h = 1e-6
        fd = (training_loss(feats, unflatten_trainable(theta + h * d, params), protos)
              - training_loss(feats, unflatten_trainable(theta - h * d, params), protos)) / (2 * h)
        assert fd == pytest.approx(float(g @ d), rel=1e-4, abs=1e-8)

    def test_gradient_leaves_params_untouched(self, rng):
        feats, params, protos = self._case(41)
        before = flatten_trainable(params).copy()
        batch_loss_gradient(feats, params, protos, update_running=False)
        assert np.array_equal(flatten_trainable(params), before)


class TestAdam:
    def reference_step(self, theta, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        return theta - lr * mhat / (np.sqrt(vhat) + eps), m, v

    def test_two_steps_match_reference(self, rng):
        params = init_adapter((2,), out_dim=3, rng_seed=5)
        opt = AdamState.for_params(params, lr=0.01)
        theta = flatten_trainable(params)
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for t in (1, 2):
            g_flat = rng.normal(size=theta.size)
            grads = [{}]
            off = 0
            for name in ("weight", "bias", "norm_scale", "norm_shift"):
                arr = getattr(params.scales[0], name)
                grads[0][name] = g_flat[off:off + arr.size].reshape(arr.shape)
                off += arr.size
            opt.step(params, grads)
            theta, m, v = self.reference_step(theta, g_flat, m, v, t, lr=0.01)
            np.testing.assert_allclose(flatten_trainable(params), theta,
                                       rtol=0, atol=1e-14)

    def test_descends_on_fixed_batch(self, rng):
        feats, params, protos = TestGradient()._case(51)
        opt = AdamState.for_params(params, lr=1e-3)
        start = training_loss(feats, params, protos)
        for _ in range(20):
            _, grads = batch_loss_gradient(feats, params, protos)
            opt.step(params, grads)
        assert training_loss(feats, params, protos) < start


class TestWarmup:
    def _features(self, rng, n=6):
        return {i: random_features(rng) for i in range(n)}

    def test_zero_epochs_keeps_params(self, rng):
        feats = self._features(rng)
        params = init_adapter((3, 5), out_dim=8, rng_seed=3)
        before = flatten_trainable(params).copy()
        out, protos = warmup(feats, list(feats), params, epochs=0)
        assert np.array_equal(flatten_trainable(out), before)
        assert protos.vectors.shape[0] >= 1

    def test_deterministic(self, rng):
        feats = self._features(rng)
        runs = []
        for _ in range(2):
            params = init_adapter((3, 5), out_dim=8, rng_seed=3)
            out, _ = warmup(feats, list(feats), params, epochs=2,
                            batch_size=2, rng_seed=9)
            runs.append(flatten_trainable(out))
        assert np.array_equal(runs[0], runs[1])

    def test_reduces_seed_loss(self, rng):
        feats = self._features(rng, n=8)
        params = init_adapter((3, 5), out_dim=8, rng_seed=3)
        protos_probe = None
        batch = list(feats.values())

        def loss_with(p, protos):
            return training_loss(batch, p, protos)

        before_params = params.copy()
        out, protos = warmup(feats, list(feats), params, epochs=4,
                             lr=1e-3, batch_size=4)
        assert loss_with(out, protos) < loss_with(before_params, protos)

    def test_epoch_callback_count(self, rng):
        feats = self._features(rng)
        params = init_adapter((3, 5), out_dim=8, rng_seed=3)
        seen = []
        warmup(feats, list(feats), params, epochs=3, batch_size=3,
               on_epoch=lambda p: seen.append(flatten_trainable(p).copy()))
        assert len(seen) == 3
        assert not np.array_equal(seen[0], seen[2])

    def test_proto_budget_caps_prototypes(self, rng):
        feats = self._features(rng)
        params = init_adapter((3, 5), out_dim=8, rng_seed=3)
        _, protos = warmup(feats, list(feats), params, epochs=0,
                           proto_budget=7)
        assert protos.vectors.shape[0] == 7

    def test_empty_seed(self, rng):
        params = init_adapter((3, 5), out_dim=8)
        with pytest.raises(DataError, match="empty seed"):
            warmup({}, [], params)


class TestFlatten:
    def test_round_trip(self, rng):
        params = init_adapter((3, 5), out_dim=8, rng_seed=4)
        vec = rng.normal(size=flatten_trainable(params).size)
        rebuilt = unflatten_trainable(vec, params)
        np.testing.assert_array_equal(flatten_trainable(rebuilt), vec)
        # running statistics ride along from the template
        np.testing.assert_array_equal(rebuilt.scales[0].running_var,
                                      params.scales[0].running_var)

    def test_template_not_mutated(self, rng):
        params = init_adapter((3,), out_dim=4, rng_seed=4)
        before = flatten_trainable(params).copy()
        unflatten_trainable(np.zeros(before.size), params)
        assert np.array_equal(flatten_trainable(params), before)

    def test_size_mismatch(self):
        params = init_adapter((3,), out_dim=4)
        with pytest.raises(DataError):
            unflatten_trainable(np.zeros(3), params)


class TestParamValidation:
    def test_out_dim_consistency(self):
        a = init_adapter((3,), out_dim=4)
        b = init_adapter((3,), out_dim=5)
        with pytest.raises(DataError):
            AdapterParams([a.scales[0], b.scales[0]], 4)

    def test_running_var_positive(self):
        params = init_adapter((3,), out_dim=4)
        sp = params.scales[0].copy()
        sp.running_var[0] = 0.0
        with pytest.raises(DataError):
            AdapterParams([sp], 4)
