"""Gate behavior: neutral initialization, depth variants, learnability."""

import math

import numpy as np
import pytest

from fvge.autodiff import ParamSet, grad_check, sgd_step, softmax_temp
from fvge.errors import ConfigError, ShapeError
from fvge.gates import (
    ReliabilityGate,
    StatsNormalizer,
    apply_indicator_mask,
    frg_loss,
    indicator_mask,
)
from fvge.indicators import LogitBundle, build_frg_stats


class TestGateForward:
    def test_zero_head_gives_half(self):
        rng = np.random.default_rng(30)
        gate = ReliabilityGate(hidden_dim=32, rng=rng)
        for _ in range(20):
            assert gate.score(rng.normal(size=3)).value == 0.5

    def test_sigmoid_of_logit(self):
        gate = ReliabilityGate(hidden_dim=4, rng=np.random.default_rng(31))
        # force q = ln 3 through the head bias
        gate.params["w2"].data[...] = 0.0
        gate.params["b2"].data[...] = math.log(3.0)
        assert gate.score([0.0, 0.0, 0.0]).value == pytest.approx(0.75, abs=1e-12)

    def test_matches_straight_line_recomputation(self):
        rng = np.random.default_rng(32)
        gate = ReliabilityGate(hidden_dim=8, rng=rng)
        for name in ("w2", "b2"):
            gate.params[name].data[...] = rng.normal(size=gate.params[name].data.shape)
        for _ in range(50):
            u = rng.normal(size=3)
            w1, b1 = gate.params["w1"].data, gate.params["b1"].data
            w2, b2 = gate.params["w2"].data, gate.params["b2"].data
            h = np.maximum(w1 @ u + b1, 0.0)
            q = float((w2 @ h + b2)[0])
            expected = 1.0 / (1.0 + math.exp(-q))
            got = gate.score(u)
            assert got.value == pytest.approx(expected, abs=1e-12)
            assert got.pre_logit == pytest.approx(q, abs=1e-12)

    def test_output_strictly_inside_unit_interval(self):
        """Strict interior holds wherever float64 sigmoid itself does not
        saturate (|q| beyond ~36.7 rounds to exactly 0.0/1.0 in IEEE 754)."""
        rng = np.random.default_rng(33)
        gate = ReliabilityGate(hidden_dim=16, rng=rng)
        for name, t in gate.params.items():
            t.data[...] = rng.normal(scale=0.5, size=t.data.shape)
        for _ in range(200):
            score = gate.score(rng.normal(scale=3.0, size=3))
            assert abs(score.pre_logit) < 36.0
            assert 0.0 < score.value < 1.0

    def test_wrong_input_width(self):
        gate = ReliabilityGate(rng=np.random.default_rng(34))
        with pytest.raises(ShapeError):
            gate.forward(np.zeros(4))


class TestGateDepths:
    def test_param_counts(self):
        rng = np.random.default_rng(35)
        assert ReliabilityGate(layers=1, rng=rng).param_count() == 4
        assert ReliabilityGate(layers=2, hidden_dim=32, rng=rng).param_count() == 161
        assert ReliabilityGate(layers=3, hidden_dim=32, rng=rng).param_count() == 1217

    def test_all_depths_start_at_half(self):
        rng = np.random.default_rng(36)
        for layers in (1, 2, 3):
            gate = ReliabilityGate(layers=layers, rng=rng)
            assert gate.score([1.0, -2.0, 0.3]).value == 0.5

    def test_unsupported_depth(self):
        with pytest.raises(ConfigError):
            ReliabilityGate(layers=4, rng=np.random.default_rng(37))


class TestFrgLoss:
    def test_half_is_ln2(self):
        np.testing.assert_allclose(frg_loss(0.5, 1), math.log(2), atol=1e-12)

    def test_confident_correct(self):
        assert frg_loss(0.999, 1) < 0.002

    def test_batch_mean(self):
        mean = (frg_loss(0.9, 1) + frg_loss(0.2, 0)) / 2.0
        np.testing.assert_allclose(mean, 0.164252033486, atol=1e-9)


class TestIndicatorMask:
    def test_identity(self):
        u = np.array([0.3, 0.9, 0.25])
        np.testing.assert_array_equal(apply_indicator_mask(u, indicator_mask([1, 1, 1])), u)

    def test_geometric_disabled(self):
        u = np.array([0.3, 0.9, 0.25])
        np.testing.assert_array_equal(
            apply_indicator_mask(u, indicator_mask([1, 1, 0])), [0.3, 0.9, 0.0]
        )

    def test_distribution_disabled(self):
        s = np.array([0.7, 0.3, 0.95])
        np.testing.assert_array_equal(
            apply_indicator_mask(s, indicator_mask([0, 1, 1])), [0.0, 0.3, 0.95]
        )

    def test_all_disabled_rejected(self):
        with pytest.raises(ConfigError):
            indicator_mask([0, 0, 0])


class TestGateGradients:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(38)
        gate = ReliabilityGate(hidden_dim=8, rng=rng)
        for name, t in gate.params.items():
            t.data[...] = rng.normal(scale=0.5, size=t.data.shape)
        u = rng.normal(size=3)

        def loss(_: ParamSet):
            r, _q = gate.forward(u)
            return frg_loss(r, 1)

        assert grad_check(loss, gate.params) <= 1e-3

    def test_three_layer_gradients(self):
        rng = np.random.default_rng(45)
        gate = ReliabilityGate(hidden_dim=6, layers=3, rng=rng)
        for name, t in gate.params.items():
            t.data[...] = rng.normal(scale=0.5, size=t.data.shape)
        u = rng.normal(size=3)

        def loss(_: ParamSet):
            r, _q = gate.forward(u)
            return frg_loss(r, 0)

        assert grad_check(loss, gate.params) <= 1e-3


class TestGateLearnability:
    def test_learns_separable_supervision(self):
        """With targets r* = [entropy gap > 0], 200 epochs reach >= 95% accuracy."""
        rng = np.random.default_rng(39)
        n = 200
        stats = np.column_stack(
            [
                rng.normal(scale=0.5, size=n),
                rng.uniform(0.5, 1.0, size=n),
                rng.uniform(0.1, 0.9, size=n),
            ]
        )
        targets = (stats[:, 0] > 0).astype(int)
        norm = StatsNormalizer()
        for u in stats:
            norm.update(u)
        norm.freeze()

        gate = ReliabilityGate(hidden_dim=32, rng=np.random.default_rng(40))
        shuffle = np.random.default_rng(41)
        for _ in range(200):
            order = shuffle.permutation(n)
            for start in range(0, n, 4):
                batch = order[start : start + 4]
                gate.params.zero_grad()
                for idx in batch:
                    r, _ = gate.forward(norm.apply(stats[idx]))
                    loss = frg_loss(r, int(targets[idx]))
                    loss.backward()
                for t in gate.params.tensors():
                    t.grad /= len(batch)
                sgd_step(gate.params, 0.0035)

        preds = np.array([gate.score(norm.apply(u)).value > 0.5 for u in stats])
        accuracy = float((preds == targets.astype(bool)).mean())
        assert accuracy >= 0.95

    def test_class_agnostic_statistics(self):
        """Permuting class order leaves the gate input (hence r) unchanged."""
        rng = np.random.default_rng(42)
        gate = ReliabilityGate(hidden_dim=8, rng=rng)
        for name, t in gate.params.items():
            t.data[...] = rng.normal(scale=0.5, size=t.data.shape)
        for _ in range(50):
            z_full = rng.normal(size=6)
            z_fg = rng.normal(size=6)
            perm = rng.permutation(6)
            u = build_frg_stats(LogitBundle(z_full=z_full, z_fg=z_fg), 0.4, 2.0).as_vector()
            u_perm = build_frg_stats(
                LogitBundle(z_full=z_full[perm], z_fg=z_fg[perm]), 0.4, 2.0
            ).as_vector()
            np.testing.assert_allclose(u, u_perm, atol=1e-12)
            assert gate.score(u).value == pytest.approx(gate.score(u_perm).value, abs=1e-12)


class TestStatsNormalizer:
    def test_identity_before_updates(self):
        norm = StatsNormalizer()
        v = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(norm.apply(v), v)

    def test_standardizes(self):
        rng = np.random.default_rng(43)
        data = rng.normal(loc=[5.0, -3.0, 0.5], scale=[2.0, 0.1, 1.0], size=(500, 3))
        norm = StatsNormalizer()
        for v in data:
            norm.update(v)
        norm.freeze()
        out = np.array([norm.apply(v) for v in data])
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-9)

    def test_frozen_ignores_updates(self):
        norm = StatsNormalizer()
        norm.update(np.array([1.0, 1.0, 1.0]))
        norm.freeze()
        before = norm.apply(np.array([2.0, 2.0, 2.0]))
        norm.update(np.array([100.0, 100.0, 100.0]))
        np.testing.assert_array_equal(norm.apply(np.array([2.0, 2.0, 2.0])), before)

    def test_state_roundtrip(self):
        rng = np.random.default_rng(44)
        norm = StatsNormalizer()
        for _ in range(10):
            norm.update(rng.normal(size=3))
        norm.freeze()
        clone = StatsNormalizer.from_state(norm.state())
        v = rng.normal(size=3)
        np.testing.assert_array_equal(clone.apply(v), norm.apply(v))
