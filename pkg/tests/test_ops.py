import math

import numpy as np
import pytest

from budbreak.errors import ShapeError
from budbreak.nn import (
    activation_forward,
    affine_forward,
    bce_loss,
    gru_cell_backward,
    gru_cell_forward,
)


def gru_oracle(params, x, h):
    """Straight transcription of the five GRU equations, kept independent of
    the library implementation on purpose."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    z = sig(params["wz"] @ x + params["uz"] @ h + params["bz"])
    r = sig(params["wr"] @ x + params["ur"] @ h + params["br"])
    n = np.tanh(params["wn"] @ x + params["bin"] + r * (params["un"] @ h + params["bhn"]))
    return (1.0 - z) * n + z * h


def random_gru_params(rng, in_dim, hidden, scale=0.5):
    return {
        "wz": rng.uniform(-scale, scale, (hidden, in_dim)),
        "wr": rng.uniform(-scale, scale, (hidden, in_dim)),
        "wn": rng.uniform(-scale, scale, (hidden, in_dim)),
        "uz": rng.uniform(-scale, scale, (hidden, hidden)),
        "ur": rng.uniform(-scale, scale, (hidden, hidden)),
        "un": rng.uniform(-scale, scale, (hidden, hidden)),
        "bz": rng.uniform(-scale, scale, hidden),
        "br": rng.uniform(-scale, scale, hidden),
        "bin": rng.uniform(-scale, scale, hidden),
        "bhn": rng.uniform(-scale, scale, hidden),
    }


class TestAffine:
    def test_identity(self):
        out = affine_forward(np.eye(2), np.zeros(2), np.array([3.0, 4.0]))
        assert np.array_equal(out, [3.0, 4.0])

    def test_hand_sum(self):
        out = affine_forward(np.array([[1.0, 1.0]]), np.array([1.0]), np.array([2.0, 3.0]))
        assert np.array_equal(out, [6.0])

    def test_zero_weights_pass_bias(self):
        out = affine_forward(np.zeros((2, 2)), np.array([5.0, 6.0]), np.array([9.0, 9.0]))
        assert np.array_equal(out, [5.0, 6.0])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
            affine_forward(np.zeros((2, 3)), np.zeros(2), np.zeros(2))


class TestActivations:
    def test_sigmoid_zero(self):
        assert activation_forward("sigmoid", np.array([0.0]))[0] == 0.5

    def test_tanh_zero(self):
        assert activation_forward("tanh", np.array([0.0]))[0] == 0.0

    def test_relu(self):
        assert np.array_equal(activation_forward("relu", np.array([-2.0, 3.0])), [0.0, 3.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown activation"):
            activation_forward("gelu", np.array([0.0]))


class TestGruForward:
    def test_zero_fixed_point(self):
        rng = np.random.default_rng(0)
        params = {k: np.zeros_like(v) for k, v in random_gru_params(rng, 3, 4).items()}
        h_next, _ = gru_cell_forward(params, rng.standard_normal(3), np.zeros(4))
        assert np.array_equal(h_next, np.zeros(4))

    def test_saturated_update_gate_keeps_state(self):
        rng = np.random.default_rng(1)
        params = {k: np.zeros_like(v) for k, v in random_gru_params(rng, 3, 4).items()}
        params["bz"] = np.full(4, 50.0)
        h0 = rng.standard_normal(4)
        h_next, _ = gru_cell_forward(params, rng.standard_normal(3), h0)
        np.testing.assert_allclose(h_next, h0, rtol=1e-12)

    def test_matches_transcription_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            params = random_gru_params(rng, 5, 7)
            x = rng.standard_normal(5)
            h = rng.standard_normal(7)
            h_next, _ = gru_cell_forward(params, x, h)
            np.testing.assert_allclose(h_next, gru_oracle(params, x, h), rtol=1e-12, atol=1e-14)

    def test_output_in_convex_hull_of_h_and_n(self):
        # with |h| <= 1 the next state stays in [-1, 1]
        rng = np.random.default_rng(3)
        for _ in range(50):
            params = random_gru_params(rng, 4, 6, scale=2.0)
            h = rng.uniform(-1.0, 1.0, 6)
            h_next, _ = gru_cell_forward(params, rng.standard_normal(4), h)
            assert np.all(np.abs(h_next) <= 1.0)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(4)
        params = random_gru_params(rng, 3, 4)
        with pytest.raises(ShapeError):
            gru_cell_forward(params, np.zeros(5), np.zeros(4))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        params = random_gru_params(rng, 3, 4)
        x, h = rng.standard_normal(3), rng.standard_normal(4)
        a, _ = gru_cell_forward(params, x, h)
        b, _ = gru_cell_forward(params, x, h)
        assert np.array_equal(a, b)


def fd_grad(loss_fn, arr, h=1e-5):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        lp = loss_fn()
        arr[idx] = orig - h
        lm = loss_fn()
        arr[idx] = orig
        g[idx] = (lp - lm) / (2 * h)
    return g


def rel_err(a, n, floor=1e-3):
    return np.abs(a - n) / np.maximum.reduce([np.abs(a), np.abs(n), np.full_like(a, floor)])


class TestGruBackward:
    def test_zero_upstream_grad(self):
        rng = np.random.default_rng(6)
        params = random_gru_params(rng, 3, 4)
        _, cache = gru_cell_forward(params, rng.standard_normal(3), rng.standard_normal(4))
        grad_params, grad_x, grad_h = gru_cell_backward(cache, np.zeros(4))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grad_params.values())
        assert np.array_equal(grad_x, np.zeros(3))
        assert np.array_equal(grad_h, np.zeros(4))

    def test_scalar_dims_match_finite_differences(self):
        rng = np.random.default_rng(7)
        params = random_gru_params(rng, 1, 1)
        x = rng.standard_normal(1)
        h = rng.standard_normal(1)
        w = rng.standard_normal(1)  # probe vector: loss = w . h_next

        def loss():
            h_next, _ = gru_cell_forward(params, x, h)
            return float(w @ h_next)

        _, cache = gru_cell_forward(params, x, h)
        grad_params, grad_x, grad_h = gru_cell_backward(cache, w)
        for name in params:
            assert rel_err(grad_params[name], fd_grad(loss, params[name])).max() < 1e-6
        assert rel_err(grad_x, fd_grad(loss, x)).max() < 1e-6
        assert rel_err(grad_h, fd_grad(loss, h)).max() < 1e-6

    def test_sequence_bptt_matches_finite_differences(self):
        # 10 steps, parameter gradients accumulated across the sequence
        rng = np.random.default_rng(8)
        in_dim, hidden, steps = 2, 3, 10
        params = random_gru_params(rng, in_dim, hidden)
        xs = rng.standard_normal((steps, in_dim))
        w = rng.standard_normal(hidden)

        def loss():
            h = np.zeros(hidden)
            for t in range(steps):
                h, _ = gru_cell_forward(params, xs[t], h)
            return float(w @ h)

        h = np.zeros(hidden)
        caches = []
        for t in range(steps):
            h, cache = gru_cell_forward(params, xs[t], h)
            caches.append(cache)
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        grad_h = w.copy()
        for cache in reversed(caches):
            grad_params, _, grad_h = gru_cell_backward(cache, grad_h)
            for k in acc:
                acc[k] += grad_params[k]
        for name in params:
            assert rel_err(acc[name], fd_grad(loss, params[name])).max() < 1e-4, name

    @pytest.mark.parametrize("seed", range(20))
    def test_randomized_shapes_match_finite_differences(self, seed):
        # 20 seeds x 5 instances = 100 randomized gradient checks
        rng = np.random.default_rng(100 + seed)
        for _ in range(5):
            in_dim = int(rng.integers(1, 5))
            hidden = int(rng.integers(1, 6))
            params = random_gru_params(rng, in_dim, hidden)
            x = rng.standard_normal(in_dim)
            h = rng.standard_normal(hidden)
            w = rng.standard_normal(hidden)

            def loss():
                h_next, _ = gru_cell_forward(params, x, h)
                return float(w @ h_next)

            _, cache = gru_cell_forward(params, x, h)
            grad_params, grad_x, grad_h = gru_cell_backward(cache, w)
            for name in params:
                assert rel_err(grad_params[name], fd_grad(loss, params[name])).max() < 1e-4
            assert rel_err(grad_x, fd_grad(loss, x)).max() < 1e-4
            assert rel_err(grad_h, fd_grad(loss, h)).max() < 1e-4


class TestBce:
    def test_half_prob(self):
        loss, _ = bce_loss(np.array([0.5]), np.array([1.0]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2), rel=1e-12)

    def test_near_perfect(self):
        loss, _ = bce_loss(np.array([1.0 - 1e-9]), np.array([1.0]), np.array([1.0]))
        assert loss < 1e-6

    def test_mask_ignores_steps(self):
        loss, grad = bce_loss(np.array([0.5, 0.9]), np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert loss == pytest.approx(math.log(2), rel=1e-12)
        assert grad[1] == 0.0

    def test_all_zero_mask_raises(self):
        with pytest.raises(ValueError, match="no labeled steps"):
            bce_loss(np.array([0.5]), np.array([1.0]), np.array([0.0]))

    def test_nonnegative_and_zero_only_at_match(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            n = int(rng.integers(1, 20))
            p = rng.uniform(0.0, 1.0, n)
            y = (rng.random(n) < 0.5).astype(float)
            mask = (rng.random(n) < 0.8).astype(float)
            if mask.sum() == 0:
                continue
            loss, _ = bce_loss(p, y, mask)
            assert loss >= 0.0
        # exact match leaves only the clamp residual
        loss, _ = bce_loss(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.ones(2))
        assert 0.0 <= loss < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 0.95, 8)
        y = (rng.random(8) < 0.5).astype(float)
        mask = np.ones(8)
        _, grad = bce_loss(p, y, mask)
        num = fd_grad(lambda: bce_loss(p, y, mask)[0], p)
        assert rel_err(grad, num).max() < 1e-6
