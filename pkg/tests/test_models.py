import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedaria.errors import DimensionError, ValidationError
from fedaria.models import (
    ACTIVATIONS,
    NORM_KINDS,
    ModelSpec,
    ModelState,
    backward,
    bn_stat_mismatch,
    flatten,
    forward,
    init_params,
    layout,
    param_count,
    unflatten,
)
from fedaria.numkit import RngStream
from fedaria.optim import LossConfig, loss_and_grad

from conftest import central_difference, rel_error


def perturbed_state(spec, seed):
    st_ = init_params(spec, "kaiming_normal", RngStream(seed))
    g = np.random.default_rng(seed)
    st_.params = st_.params + g.normal(0, 0.2, st_.params.size)
    if spec.has_bn:
        st_.running_mean = [g.normal(size=h) for h in spec.hidden_dims]
        st_.running_var = [g.uniform(0.5, 2.0, size=h) for h in spec.hidden_dims]
    return st_


class TestParamCount:
    def test_softmax_regression(self):
        assert param_count(ModelSpec(4, 3)) == 15

    def test_mlp(self):
        assert param_count(ModelSpec(4, 3, (8,))) == 67

    def test_layer_norm_adds_gain_and_shift(self):
        spec = ModelSpec(4, 3, (8,), norm_kind="layer_norm")
        tensors = [(4 * 8), 8, 8, 8, (8 * 3), 3]  # W1 b1 gain shift W2 b2
        assert param_count(spec) == sum(tensors) == 83

    def test_batch_norm_and_ws(self):
        assert param_count(ModelSpec(4, 3, (8,), norm_kind="batch_norm")) == 83
        assert param_count(ModelSpec(4, 3, (8,), norm_kind="weight_standardized")) == 75

    def test_layout_is_contiguous(self):
        spec = ModelSpec(5, 3, (4, 6), norm_kind="layer_norm")
        pos = 0
        for lay in layout(spec):
            for sl in (lay.W, lay.b, lay.gain, lay.shift):
                if sl is not None:
                    assert sl.start == pos
                    pos = sl.stop
        assert pos == param_count(spec)


class TestSpecValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(input_dim=0, num_classes=3),
        dict(input_dim=3, num_classes=1),
        dict(input_dim=3, num_classes=3, hidden_dims=(0,)),
        dict(input_dim=3, num_classes=3, activation="gelu"),
        dict(input_dim=3, num_classes=3, norm_kind="group_norm"),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            ModelSpec(**kwargs)


class TestInit:
    def test_finite_and_zero_biases(self):
        spec = ModelSpec(6, 3, (5, 4), norm_kind="layer_norm")
        for scheme in ("xavier_uniform", "kaiming_normal"):
            s = init_params(spec, scheme, RngStream(0))
            assert np.all(np.isfinite(s.params))
            for lay, layer in zip(layout(spec), unflatten(spec, s.params)):
                assert np.all(layer["b"] == 0)
                if lay.gain is not None:
                    assert np.all(layer["gain"] == 1)
                    assert np.all(layer["shift"] == 0)

    def test_kaiming_scale(self):
        spec = ModelSpec(100, 2, (100,))
        s = init_params(spec, "kaiming_normal", RngStream(1))
        w = unflatten(spec, s.params)[0]["W"]
        assert w.size >= 10_000
        assert abs(w.std() - math.sqrt(2 / 100)) < 0.1 * math.sqrt(2 / 100)

    def test_xavier_bound(self):
        spec = ModelSpec(30, 2, (20,))
        w = unflatten(spec, init_params(spec, "xavier_uniform", RngStream(1)).params)[0]["W"]
        assert np.abs(w).max() <= math.sqrt(6 / 50)

    def test_deterministic(self):
        spec = ModelSpec(4, 3, (8,), norm_kind="batch_norm")
        a = init_params(spec, "kaiming_normal", RngStream(9))
        b = init_params(spec, "kaiming_normal", RngStream(9))
        assert a.params.tobytes() == b.params.tobytes()
        assert all(np.array_equal(x, y) for x, y in zip(a.running_var, b.running_var))

    def test_running_stats_start_at_identity(self):
        s = init_params(ModelSpec(4, 3, (8, 2), norm_kind="batch_norm"), "kaiming_normal", RngStream(0))
        assert all(np.all(m == 0) for m in s.running_mean)
        assert all(np.all(v == 1) for v in s.running_var)


class TestForward:
    def test_zero_params_zero_logits(self):
        spec = ModelSpec(4, 3)
        logits, _ = forward(ModelState(spec, np.zeros(15)), np.ones((2, 4)), "eval")
        np.testing.assert_array_equal(logits, np.zeros((2, 3)))

    def test_shape_and_dim_mismatch(self):
        s = init_params(ModelSpec(4, 3, (5,)), "kaiming_normal", RngStream(0))
        logits, _ = forward(s, np.zeros((7, 4)), "eval")
        assert logits.shape == (7, 3)
        with pytest.raises(DimensionError):
            forward(s, np.zeros((7, 5)), "eval")

    def test_layer_norm_constant_preactivation_is_guarded(self):
        spec = ModelSpec(2, 2, (3,), norm_kind="layer_norm")
        s = init_params(spec, "kaiming_normal", RngStream(0))
        layers = unflatten(spec, s.params)
        layers[0]["W"][:] = 0.0
        layers[0]["b"][:] = 0.7  # every hidden unit sees the same value
        logits, cache = forward(s, np.ones((2, 2)), "train")
        assert np.all(np.isfinite(logits))
        np.testing.assert_allclose(cache["layers"][0]["zhat"], 0.0, atol=1e-10)

    def test_batch_norm_symmetric_pair(self):
        spec = ModelSpec(1, 2, (1,), norm_kind="batch_norm")
        s = ModelState(spec, np.zeros(param_count(spec)))
        layers = unflatten(spec, s.params)
        layers[0]["W"][:] = 1.0
        gain = 1.7
        layers[0]["gain"][:] = gain
        for x in (0.3, 2.0, -5.0):
            _, cache = forward(s.copy(), np.array([[x], [-x]]), "train")
            normalized = gain * cache["layers"][0]["zhat"][:, 0]
            expected = gain * np.array([1.0, -1.0]) * np.sign(x)
            np.testing.assert_allclose(normalized, expected, atol=gain * 1e-5 / x**2)

    def test_batch_norm_needs_two_samples(self):
        s = init_params(ModelSpec(3, 2, (4,), norm_kind="batch_norm"), "kaiming_normal", RngStream(0))
        with pytest.raises(ValidationError):
            forward(s, np.ones((1, 3)), "train")
        forward(s, np.ones((1, 3)), "eval")

    def test_batch_norm_running_stats_update(self):
        spec = ModelSpec(2, 2, (3,), norm_kind="batch_norm")
        s = init_params(spec, "kaiming_normal", RngStream(0))
        x = np.random.default_rng(0).normal(size=(8, 2))
        W = unflatten(spec, s.params)[0]["W"]
        z = x @ W.T
        forward(s, x, "train")
        np.testing.assert_allclose(s.running_mean[0], 0.1 * z.mean(axis=0))
        np.testing.assert_allclose(s.running_var[0], 0.9 + 0.1 * z.var(axis=0, ddof=1))

    def test_eval_is_pure(self):
        spec = ModelSpec(3, 3, (4,), norm_kind="batch_norm")
        s = perturbed_state(spec, 2)
        before = [m.copy() for m in s.running_mean]
        x = np.random.default_rng(1).normal(size=(5, 3))
        a, _ = forward(s, x, "eval")
        b, _ = forward(s, x, "eval")
        assert a.tobytes() == b.tobytes()
        assert all(np.array_equal(p, q) for p, q in zip(before, s.running_mean))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.05, 20.0), st.integers(0, 3))
    def test_weight_standardization_scale_invariance(self, seed, c, row):
        spec = ModelSpec(5, 3, (4,), activation="tanh", norm_kind="weight_standardized")
        s = perturbed_state(spec, seed)
        x = np.random.default_rng(seed).normal(size=(6, 5))
        before, _ = forward(s, x, "eval")
        scaled = s.copy()
        unflatten(spec, scaled.params)[0]["W"][row] *= c
        after, _ = forward(scaled, x, "eval")
        np.testing.assert_allclose(after, before, atol=1e-9, rtol=0)


class TestBackward:
    def test_zero_upstream_zero_gradient(self):
        spec = ModelSpec(4, 3, (5,), norm_kind="layer_norm")
        s = perturbed_state(spec, 0)
        _, cache = forward(s, np.ones((3, 4)), "train")
        np.testing.assert_array_equal(backward(s, cache, np.zeros((3, 3))), 0.0)

    def test_softmax_regression_closed_form(self):
        spec = ModelSpec(4, 3)
        s = perturbed_state(spec, 1)
        x = np.array([[0.5, -1.0, 2.0, 0.1]])
        y = 2
        logits, cache = forward(s, x, "train")
        _, dlogits = loss_and_grad(LossConfig("cross_entropy"), logits, [y])
        grad = backward(s, cache, dlogits)
        p = np.exp(logits[0] - logits[0].max())
        p /= p.sum()
        delta = p - np.eye(3)[y]
        layers = unflatten(spec, grad)
        np.testing.assert_allclose(layers[0]["W"].T, np.outer(x[0], delta), atol=1e-14)
        np.testing.assert_allclose(layers[0]["b"], delta, atol=1e-14)

    def test_eval_cache_rejected(self):
        s = perturbed_state(ModelSpec(4, 3), 0)
        _, cache = forward(s, np.ones((2, 4)), "eval")
        with pytest.raises(ValidationError):
            backward(s, cache, np.ones((2, 3)))

    @pytest.mark.parametrize("norm", NORM_KINDS)
    @pytest.mark.parametrize("act", ACTIVATIONS)
    @pytest.mark.parametrize("hidden", [(), (6,), (5, 4)])
    def test_finite_differences(self, norm, act, hidden):
        spec = ModelSpec(4, 3, hidden, act, norm)
        s = perturbed_state(spec, 11)
        g = np.random.default_rng(3)
        x = g.normal(size=(5, 4))
        upstream = g.normal(size=(5, 3))

        def f(p):
            probe = s.copy()
            probe.params = p
            return float((forward(probe, x, "train", update_stats=False)[0] * upstream).sum())

        _, cache = forward(s.copy(), x, "train")
        analytic = backward(s, cache, upstream)
        numeric = central_difference(f, s.params)
        assert rel_error(analytic, numeric).max() < 1e-4


class TestFlatten:
    @pytest.mark.parametrize("norm", NORM_KINDS)
    def test_round_trip(self, norm):
        spec = ModelSpec(3, 4, (5, 2), norm_kind=norm)
        p = np.random.default_rng(0).normal(size=param_count(spec))
        assert flatten(spec, unflatten(spec, p)).tobytes() == p.tobytes()

    def test_stats_vector_round_trip(self):
        s = perturbed_state(ModelSpec(3, 2, (4, 5), norm_kind="batch_norm"), 0)
        t = s.copy()
        t.set_stats_vector(np.zeros_like(s.stats_vector()))
        t.set_stats_vector(s.stats_vector())
        assert t.stats_vector().tobytes() == s.stats_vector().tobytes()


class TestBnStatMismatch:
    spec = ModelSpec(3, 2, (2,), norm_kind="batch_norm")

    def state_with_mean(self, mean):
        s = ModelState(self.spec, np.zeros(param_count(self.spec)))
        s.running_mean = [np.array(mean, dtype=float)]
        return s

    def test_identical_is_zero(self):
        g = self.state_with_mean([0.3, -1.0])
        assert bn_stat_mismatch([g.copy(), g.copy()], g) == 0.0

    def test_hand_value(self):
        clients = [self.state_with_mean([0, 0]), self.state_with_mean([2, 0])]
        assert bn_stat_mismatch(clients, self.state_with_mean([1, 0])) == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=5))
    def test_nonnegative(self, means):
        clients = [self.state_with_mean(m) for m in means]
        assert bn_stat_mismatch(clients, self.state_with_mean([0.5, 0.5])) >= 0

    def test_errors(self):
        with pytest.raises(ValidationError):
            plain = ModelState(ModelSpec(3, 2, (2,)), np.zeros(param_count(ModelSpec(3, 2, (2,)))))
            bn_stat_mismatch([plain], plain)
        other = ModelSpec(3, 2, (3,), norm_kind="batch_norm")
        with pytest.raises(ValidationError):
            bn_stat_mismatch([ModelState(other, np.zeros(param_count(other)))], self.state_with_mean([0, 0]))
