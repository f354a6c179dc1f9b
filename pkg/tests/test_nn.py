import numpy as np
import pytest

from agvrnd.nn import (LOG_STD_MIN, ActorCritic, AdamState, CheckpointError, Dense, MlpParams, adam_step,
                       backward, clip_grad_norm, forward, gaussian_entropy, gaussian_log_prob, init_mlp,
                       load_arrays, orthogonal, sample_action, save_arrays, GaussianPolicyOutput)

from oracles import central_difference, max_relative_error


def _mlp64(sizes, seed, activation="relu"):
    rng = np.random.default_rng(seed)
    params = init_mlp(sizes, rng, hidden_activation=activation, dtype=np.float64)
    for layer in params.layers:
        layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
    return params


class TestForward:
    def test_zero_weights_give_zero(self):
        p = MlpParams([Dense(np.zeros((4, 3)), np.zeros(4)), Dense(np.zeros((2, 4)), np.zeros(2), "identity")])
        y, _ = forward(p, np.ones((5, 3)))
        np.testing.assert_array_equal(y, 0.0)

    def test_identity_layer(self):
        p = MlpParams([Dense(np.eye(3), np.zeros(3), "identity")])
        x = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(forward(p, x)[0], x)

    def test_hand_computed_two_layer(self):
        w1 = np.array([[1.0, -1.0], [2.0, 0.5], [0.0, 1.0]])
        b1 = np.array([0.0, -1.0, 0.5])
        w2 = np.array([[1.0, 1.0, -2.0]])
        b2 = np.array([0.25])
        p = MlpParams([Dense(w1, b1, "relu"), Dense(w2, b2, "identity")])
        x = np.array([[1.0, 2.0]])
        # hidden pre-activations: [-1, 2, 2.5] -> relu [0, 2, 2.5]; output 0 + 2 - 5 + 0.25
        assert forward(p, x)[0][0, 0] == pytest.approx(-2.75)

    def test_dimension_mismatch(self):
        p = _mlp64([3, 4, 2], 0)
        with pytest.raises(ValueError):
            forward(p, np.ones((2, 5)))

    def test_chain_validation(self):
        with pytest.raises(ValueError):
            MlpParams([Dense(np.zeros((4, 3)), np.zeros(4)), Dense(np.zeros((2, 5)), np.zeros(2))])


class TestBackward:
    def test_linear_sum_loss(self):
        p = MlpParams([Dense(np.arange(6.0).reshape(2, 3), np.zeros(2), "identity")])
        x = np.array([[1.0, 2.0, 3.0]])
        _, cache = forward(p, x)
        grads, _ = backward(p, cache, np.ones((1, 2)))
        np.testing.assert_array_equal(grads[0], np.outer(np.ones(2), x[0]))
        np.testing.assert_array_equal(grads[1], np.ones(2))

    def test_zero_output_grad(self):
        p = _mlp64([3, 5, 2], 1)
        _, cache = forward(p, np.random.default_rng(0).normal(size=(4, 3)))
        grads, g_in = backward(p, cache, np.zeros((4, 2)))
        assert all(np.all(g == 0) for g in grads) and np.all(g_in == 0)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_finite_differences(self, activation):
        rng = np.random.default_rng(3)
        for trial in range(5):
            p = _mlp64([4, 6, 5, 3], trial, activation)
            x = rng.normal(size=(7, 4))
            w = rng.normal(size=(7, 3))

            def loss():
                return float(np.sum(forward(p, x)[0] * w))

            _, cache = forward(p, x)
            grads, _ = backward(p, cache, w)
            numeric = central_difference(loss, p.arrays())
            assert max_relative_error(grads, numeric) <= 1e-4


class TestInit:
    def test_orthogonal(self):
        q = orthogonal((5, 8), 2.0, np.random.default_rng(0))
        np.testing.assert_allclose(q @ q.T, 4.0 * np.eye(5), atol=1e-12)

    def test_actor_critic_heads(self):
        ac = ActorCritic.create(10, 2, np.random.default_rng(0), hidden=(16, 16))
        assert ac.trunk.in_dim == 10
        assert ac.mean_head.weight.shape == (2, 16)
        np.testing.assert_array_equal(ac.log_std, 0.0)
        np.testing.assert_allclose(np.linalg.norm(ac.mean_head.weight, axis=1), 0.01, rtol=1e-5)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState.for_params(p, lr=0.1)
        adam_step(p, [np.zeros(2)], state)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_first_step_closed_form(self):
        g = 0.3
        p = [np.array([1.0])]
        state = AdamState.for_params(p, lr=0.01)
        adam_step(p, [np.array([g])], state)
        m_hat = (1 - 0.9) * g / (1 - 0.9)
        v_hat = (1 - 0.999) * g * g / (1 - 0.999)
        assert p[0][0] == pytest.approx(1.0 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-14)

    def test_two_steps_closed_form(self):
        g1, g2, lr = 0.5, -0.2, 0.05
        p = [np.array([0.0])]
        state = AdamState.for_params(p, lr=lr)
        adam_step(p, [np.array([g1])], state)
        adam_step(p, [np.array([g2])], state)
        m = 0.1 * g1
        v = 0.001 * g1 * g1
        step1 = lr * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        m = 0.9 * m + 0.1 * g2
        v = 0.999 * v + 0.001 * g2 * g2
        step2 = lr * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert p[0][0] == pytest.approx(-step1 - step2, rel=1e-12)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = [rng.normal(size=(3, 3))]
            state = AdamState.for_params(p)
            for _ in range(10):
                adam_step(p, [rng.normal(size=(3, 3))], state)
            return p[0]
        np.testing.assert_array_equal(run(), run())

    def test_minimizes_quadratic(self):
        p = [np.array([3.0, -4.0])]
        state = AdamState.for_params(p, lr=0.05)
        for _ in range(2000):
            adam_step(p, [2 * p[0]], state)
        assert np.linalg.norm(p[0]) < 1e-2

    def test_shape_mismatch(self):
        p = [np.zeros(2)]
        with pytest.raises(ValueError):
            adam_step(p, [np.zeros(3)], AdamState.for_params(p))

    def test_clip_grad_norm(self):
        g = [np.array([3.0]), np.array([4.0])]
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        assert np.hypot(g[0][0], g[1][0]) == pytest.approx(1.0, rel=1e-5)


class TestGaussian:
    def test_log_prob_at_mean(self):
        lp = gaussian_log_prob(np.zeros((1, 2)), np.zeros(2), np.zeros((1, 2)))
        assert lp[0] == pytest.approx(-np.log(2 * np.pi))
        assert lp[0] == pytest.approx(-1.8379, abs=1e-4)

    def test_degenerate_std(self):
        rng = np.random.default_rng(0)
        out = GaussianPolicyOutput(np.array([[0.3, -0.2]]), np.full(2, LOG_STD_MIN))
        s = sample_action(out, rng)
        np.testing.assert_allclose(s.action, out.mean, atol=0.05)

    def test_sample_statistics(self):
        rng = np.random.default_rng(1)
        n = 20000
        mean = np.tile([0.2, -0.1], (n, 1))
        log_std = np.log(np.array([0.3, 0.5]))
        s = sample_action(GaussianPolicyOutput(mean, log_std), rng)
        se = np.exp(log_std) / np.sqrt(n)
        assert np.all(np.abs(s.raw.mean(axis=0) - [0.2, -0.1]) < 4 * se)
        np.testing.assert_allclose(s.raw.std(axis=0), np.exp(log_std), rtol=0.03)
        assert np.all(np.abs(s.action) <= 1.0)
        np.testing.assert_allclose(s.log_prob, gaussian_log_prob(mean, log_std, s.raw))

    def test_density_integrates_to_one(self):
        grid = np.linspace(-6, 6, 1201)
        xs, ys = np.meshgrid(grid, grid)
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        lp = gaussian_log_prob(np.array([0.5, -0.3]), np.log(np.array([0.7, 1.1])), pts)
        total = np.exp(lp).sum() * (grid[1] - grid[0]) ** 2
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_entropy_closed_form(self):
        log_std = np.array([0.1, -0.4])
        assert gaussian_entropy(log_std) == pytest.approx(np.sum(0.5 * np.log(2 * np.pi * np.e * np.exp(2 * log_std))))


class TestCheckpointFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32),
                  "scalar_ish": np.array([7.0], dtype=np.float32)}
        save_arrays(tmp_path / "x.bin", arrays)
        back = load_arrays(tmp_path / "x.bin")
        assert list(back) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
            assert back[k].dtype == np.float32

    def test_actor_critic_exact(self, tmp_path):
        ac = ActorCritic.create(76, 2, np.random.default_rng(4))
        save_arrays(tmp_path / "ac.bin", ac.named_params())
        back = ActorCritic.from_named(load_arrays(tmp_path / "ac.bin"))
        obs = np.random.default_rng(5).normal(size=(8, 76))
        m1, v1, _ = ac.forward(obs)
        m2, v2, _ = back.forward(obs)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(v1, v2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "x.bin")

    def test_truncated(self, tmp_path):
        save_arrays(tmp_path / "x.bin", {"a": np.ones((10, 10), dtype=np.float32)})
        data = (tmp_path / "x.bin").read_bytes()
        (tmp_path / "x.bin").write_bytes(data[:-7])
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "x.bin")
