import math

import numpy as np
import pytest

from drbsde.errors import ConfigError, NumericalError
from drbsde.nets import (AdamState, GradientBundle, MlpParams, MlpSpec, adam_step, backward,
                         forward, init_params, params_from_bytes, params_to_bytes,
                         spec_from_manifest, spec_manifest)

from helpers import max_relative_gradient_error


def small_spec():
    return MlpSpec(input_dim=3, hidden_width=4, hidden_layers=2, output_dim=2)


class TestInit:
    def test_deterministic_from_seed(self):
        a = init_params(small_spec(), seed=11)
        b = init_params(small_spec(), seed=11)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_biases_zero(self):
        params = init_params(small_spec(), seed=2)
        for b in params.biases:
            assert np.all(b == 0.0)

    def test_weight_variance_near_glorot_target(self):
        spec = MlpSpec(input_dim=120, hidden_width=120, hidden_layers=1, output_dim=120)
        params = init_params(spec, seed=5)
        for w in params.weights:
            assert w.size >= 10_000
            target = 2.0 / (w.shape[0] + w.shape[1])  # uniform(-L, L) variance L^2/3
            assert abs(w.var() - target) < 0.2 * target

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            MlpSpec(input_dim=0, hidden_width=4, hidden_layers=1, output_dim=1)


class TestForward:
    def test_zero_params_give_zero_output(self):
        spec = small_spec()
        zeros = MlpParams(spec,
                          tuple(np.zeros_like(w) for w in init_params(spec, 0).weights),
                          tuple(np.zeros_like(b) for b in init_params(spec, 0).biases))
        out, _ = forward(zeros, np.random.default_rng(0).normal(size=(7, 3)))
        assert np.all(out == 0.0)

    def test_single_linear_layer_identity(self):
        spec = MlpSpec(input_dim=3, hidden_width=1, hidden_layers=0, output_dim=3)
        params = MlpParams(spec, (np.eye(3),), (np.zeros(3),))
        x = np.random.default_rng(1).normal(size=(5, 3))
        out, _ = forward(params, x)
        assert np.array_equal(out, x)

    def test_hand_computed_tanh_composition(self):
        # 1-2-1 net evaluated against direct scalar arithmetic
        spec = MlpSpec(input_dim=1, hidden_width=2, hidden_layers=1, output_dim=1)
        w1 = np.array([[0.3, -0.2]])
        b1 = np.array([0.1, 0.4])
        w2 = np.array([[0.5], [-1.2]])
        b2 = np.array([0.25])
        params = MlpParams(spec, (w1, w2), (b1, b2))
        x = 0.7
        expected = (0.5 * math.tanh(0.3 * x + 0.1)
                    - 1.2 * math.tanh(-0.2 * x + 0.4) + 0.25)
        out, _ = forward(params, np.array([[x]]))
        assert out[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        params = init_params(small_spec(), seed=0)
        with pytest.raises(ValueError):
            forward(params, np.zeros((4, 5)))

    def test_row_order_equivariance(self):
        params = init_params(small_spec(), seed=3)
        x = np.random.default_rng(4).normal(size=(9, 3))
        perm = np.random.default_rng(5).permutation(9)
        out, _ = forward(params, x)
        out_perm, _ = forward(params, x[perm])
        assert np.array_equal(out[perm], out_perm)


class TestBackward:
    def test_zero_output_grad_gives_zero_gradients(self):
        params = init_params(small_spec(), seed=1)
        x = np.random.default_rng(2).normal(size=(6, 3))
        _, tape = forward(params, x)
        grads = backward(params, tape, np.zeros((6, 2)))
        for g in grads.weights + grads.biases:
            assert np.all(g == 0.0)

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(7)
        params = init_params(MlpSpec(3, 5, 2, 2), seed=21)
        x = rng.normal(size=(8, 3))
        weight = rng.normal(size=(8, 2))
        assert max_relative_gradient_error(params, x, weight) < 1e-5

    def test_row_duplication_preserves_averaged_gradient(self):
        rng = np.random.default_rng(8)
        params = init_params(small_spec(), seed=9)
        x = rng.normal(size=(5, 3))
        resid_weight = rng.normal(size=(5, 2))
        _, tape = forward(params, x)
        grads = backward(params, tape, resid_weight / 5.0)
        x2 = np.vstack([x, x])
        _, tape2 = forward(params, x2)
        grads2 = backward(params, tape2, np.vstack([resid_weight, resid_weight]) / 10.0)
        for a, b in zip(grads.weights, grads2.weights):
            assert np.allclose(a, b, atol=1e-12, rtol=0.0)

    def test_stale_tape_rejected(self):
        params = init_params(small_spec(), seed=1)
        other = init_params(small_spec(), seed=2)
        x = np.zeros((2, 3))
        _, tape = forward(params, x)
        with pytest.raises(ValueError):
            backward(other, tape, np.zeros((2, 2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = init_params(small_spec(), seed=1)
        state = AdamState.init(params)
        zero = GradientBundle(tuple(np.zeros_like(w) for w in params.weights),
                              tuple(np.zeros_like(b) for b in params.biases))
        new_params, new_state = adam_step(params, zero, state)
        assert new_state.step_count == 1
        for a, b in zip(params.weights, new_params.weights):
            assert np.array_equal(a, b)

    def test_scalar_first_step_hand_formula(self):
        spec = MlpSpec(input_dim=1, hidden_width=1, hidden_layers=0, output_dim=1)
        params = MlpParams(spec, (np.array([[0.5]]),), (np.array([0.0]),))
        state = AdamState.init(params, lr=0.01)
        g = 0.3
        grads = GradientBundle((np.array([[g]]),), (np.array([0.0]),))
        new_params, _ = adam_step(params, grads, state)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = 0.5 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert new_params.weights[0][0, 0] == pytest.approx(expected, abs=1e-15)

    def test_two_steps_match_sequential_replay(self):
        rng = np.random.default_rng(3)
        params = init_params(small_spec(), seed=4)
        state = AdamState.init(params, lr=0.05)
        gs = [GradientBundle(tuple(rng.normal(size=w.shape) for w in params.weights),
                             tuple(rng.normal(size=b.shape) for b in params.biases))
              for _ in range(2)]
        p_seq, s_seq = params, state
        for g in gs:
            p_seq, s_seq = adam_step(p_seq, g, s_seq)
        p_replay, s_replay = params, AdamState.init(params, lr=0.05)
        for g in gs:
            p_replay, s_replay = adam_step(p_replay, g, s_replay)
        assert s_seq.step_count == s_replay.step_count == 2
        for a, b in zip(p_seq.weights, p_replay.weights):
            assert np.array_equal(a, b)

    def test_nan_gradient_rejected_with_location(self):
        params = init_params(small_spec(), seed=4)
        state = AdamState.init(params)
        bad_w = [np.zeros_like(w) for w in params.weights]
        bad_w[1][0, 0] = float("nan")
        grads = GradientBundle(tuple(bad_w), tuple(np.zeros_like(b) for b in params.biases))
        with pytest.raises(NumericalError, match=r"weights\[1\]"):
            adam_step(params, grads, state)

    def test_descent_on_synthetic_regression(self):
        # smoke property: 200 steps cut the MSE by at least 90 percent
        rng = np.random.default_rng(12)
        x = rng.normal(size=(256, 2))
        target = (0.8 * x[:, 0] - 0.5 * x[:, 1] + 0.3)[:, None]
        spec = MlpSpec(input_dim=2, hidden_width=16, hidden_layers=1, output_dim=1)
        params = init_params(spec, seed=1)
        state = AdamState.init(params, lr=0.01)

        def mse(p):
            out, _ = forward(p, x)
            return float(np.mean((out - target) ** 2))

        initial = mse(params)
        for _ in range(200):
            out, tape = forward(params, x)
            grad_out = 2.0 * (out - target) / x.shape[0]
            grads = backward(params, tape, grad_out)
            params, state = adam_step(params, grads, state)
        assert mse(params) < 0.1 * initial


class TestSerialization:
    def test_round_trip_bit_exact(self):
        spec = MlpSpec(input_dim=4, hidden_width=6, hidden_layers=3, output_dim=5)
        params = init_params(spec, seed=99)
        blob = params_to_bytes(params)
        restored = params_from_bytes(spec, blob)
        for a, b in zip(params.weights, restored.weights):
            assert np.array_equal(a, b)
        for a, b in zip(params.biases, restored.biases):
            assert np.array_equal(a, b)

    def test_manifest_round_trip(self):
        spec = MlpSpec(input_dim=21, hidden_width=50, hidden_layers=3, output_dim=21)
        manifest = spec_manifest(spec, seed=7)
        assert spec_from_manifest(manifest) == spec
        assert manifest["layer_dims"] == [21, 50, 50, 50, 21]

    def test_truncated_blob_rejected(self):
        spec = small_spec()
        blob = params_to_bytes(init_params(spec, seed=1))
        with pytest.raises(ConfigError):
            params_from_bytes(spec, blob[:-8])


class TestGradientProperty:
    def test_many_random_nets(self):
        # reduced-count version of the acceptance gradient sweep
        rng = np.random.default_rng(2024)
        for _ in range(20):
            spec = MlpSpec(input_dim=int(rng.integers(1, 4)),
                           hidden_width=int(rng.integers(2, 6)),
                           hidden_layers=int(rng.integers(0, 3)),
                           output_dim=int(rng.integers(1, 4)))
            params = init_params(spec, seed=int(rng.integers(0, 2 ** 31)))
            x = rng.normal(size=(int(rng.integers(2, 9)), spec.input_dim))
            weight = rng.normal(size=(x.shape[0], spec.output_dim))
            assert max_relative_gradient_error(params, x, weight) < 1e-5
