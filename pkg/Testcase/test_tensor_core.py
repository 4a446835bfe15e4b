"""
Tests for tensor_core: forward examples, finite-difference gradients for every
differentiable op, graph traversal rules and the two optimizers.
"""
import math

import numpy as np
import pytest

from Heightfusion_lib.errors import ConfigError, GraphError, ShapeError
from Heightfusion_lib.tensor_core import (SGD, Adam, Tensor, adam_step, adaptive_avg_pool2d, add,
                                          bilinear_upsample, concat, conv2d, gradient_check, kaiming_uniform,
                                          max_pool2d, mul, relu, scale, sgd_step, slice_axis, smooth_l1_loss,
                                          tensor_sum)

GRAD_TOL = 1e-4
SEEDS = range(5)


def _weighted(out: Tensor, seed: int) -> Tensor:
    """Scalarise an op output with fixed random weights so every element matters."""
    w = np.random.default_rng(100 + seed).normal(size=out.shape)
    return tensor_sum(mul(out, Tensor(w)))


# =============================================================================
# Forward examples
# =============================================================================

class TestForward:

    def test_conv2d_identity_kernel(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(conv2d(x, w).data, x.data)

    def test_conv2d_3x3_sum_on_ones(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))

    def test_conv2d_padding_stride_shape(self):
        x = Tensor(np.zeros((2, 3, 8, 8)))
        out = conv2d(x, Tensor(np.zeros((5, 3, 3, 3))), Tensor(np.zeros(5)), stride=2, padding=1)
        assert out.shape == (2, 5, 4, 4)

    def test_conv2d_matches_naive_loop(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_conv2d_is_linear_in_input_and_weight(self, rng):
        x1, x2 = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
        w1, w2 = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3, 2, 3, 3))
        conv = lambda x, w: conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        np.testing.assert_allclose(conv(2.5 * x1 - 0.75 * x2, w1), 2.5 * conv(x1, w1) - 0.75 * conv(x2, w1),
                                   rtol=0, atol=1e-10)
        np.testing.assert_allclose(conv(x1, 2.5 * w1 - 0.75 * w2), 2.5 * conv(x1, w1) - 0.75 * conv(x1, w2),
                                   rtol=0, atol=1e-10)

    @pytest.mark.parametrize("kernel,stride", [(2, 2), (3, 1), (3, 3), (2, 1)])
    def test_max_pool_matches_naive_loop(self, rng, kernel, stride):
        x = rng.normal(size=(1, 2, 6, 6))
        out = max_pool2d(Tensor(x), kernel, stride).data
        n_out = (6 - kernel) // stride + 1
        expected = np.empty((1, 2, n_out, n_out))
        for c in range(2):
            for i in range(n_out):
                for j in range(n_out):
                    expected[0, c, i, j] = max(x[0, c, i * stride + a, j * stride + b]
                                               for a in range(kernel) for b in range(kernel))
        np.testing.assert_array_equal(out, expected)

    @pytest.mark.parametrize("bins", [1, 2, 3, 4, 5, 6])
    def test_adaptive_pool_on_ramp_matches_naive_loop(self, bins):
        ramp = np.arange(36.0).reshape(1, 1, 6, 6)
        out = adaptive_avg_pool2d(Tensor(ramp), bins, bins).data
        for i in range(bins):
            r0, r1 = math.floor(i * 6 / bins), math.ceil((i + 1) * 6 / bins)
            for j in range(bins):
                c0, c1 = math.floor(j * 6 / bins), math.ceil((j + 1) * 6 / bins)
                cells = [ramp[0, 0, r, c] for r in range(r0, r1) for c in range(c0, c1)]
                assert out[0, 0, i, j] == pytest.approx(sum(cells) / len(cells), abs=1e-12)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_conv2d_zero_extent_output(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_max_pool_example(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert max_pool2d(x, 2, 2).data.reshape(()) == 4.0

    def test_max_pool_tie_routes_gradient_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        tensor_sum(max_pool2d(x, 2, 2)).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_bilinear_constant_plane_is_exact(self):
        x = Tensor(np.full((1, 2, 3, 5), 7.25))
        out = bilinear_upsample(x, 12, 20)
        assert out.shape == (1, 2, 12, 20)
        assert np.all(out.data == 7.25)

    def test_bilinear_same_size_is_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        np.testing.assert_array_equal(bilinear_upsample(x, 4, 4).data, x.data)

    def test_bilinear_half_pixel_values(self):
        x = Tensor(np.array([0.0, 4.0]).reshape(1, 1, 1, 2))
        out = bilinear_upsample(x, 1, 4).data.ravel()
        np.testing.assert_allclose(out, [0.0, 1.0, 3.0, 4.0])

    def test_bilinear_rejects_downscale(self):
        with pytest.raises(ShapeError):
            bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), 2, 2)

    def test_adaptive_pool_uneven_bins(self):
        x = Tensor(np.arange(5.0).reshape(1, 1, 1, 5))
        out = adaptive_avg_pool2d(x, 1, 2).data.ravel()
        # bins [0, 3) and [2, 5)
        np.testing.assert_allclose(out, [1.0, 3.0])

    def test_adaptive_pool_to_one_is_mean(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        out = adaptive_avg_pool2d(Tensor(x), 1, 1).data
        np.testing.assert_allclose(out[..., 0, 0], x.mean(axis=(2, 3)))

    def test_concat_then_slice_recovers_inputs(self, rng):
        a, b = Tensor(rng.normal(size=(1, 2, 3, 3))), Tensor(rng.normal(size=(1, 1, 3, 3)))
        joined = concat([a, b], axis=1)
        assert joined.shape == (1, 3, 3, 3)
        np.testing.assert_array_equal(slice_axis(joined, 1, 2, 3).data, b.data)

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3)))], axis=1)

    def test_smooth_l1_branches(self):
        pred = Tensor(np.array([0.5, 3.0]))
        target = Tensor(np.zeros(2))
        # 0.5 * 0.25 = 0.125 and 3 - 0.5 = 2.5
        assert smooth_l1_loss(pred, target).item() == pytest.approx((0.125 + 2.5) / 2)

    def test_smooth_l1_rejects_bad_beta(self):
        with pytest.raises(ConfigError):
            smooth_l1_loss(Tensor(np.zeros(2)), Tensor(np.zeros(2)), beta=0.0)

    def test_kaiming_uniform_bound(self, rng):
        w = kaiming_uniform((8, 4, 3, 3), rng)
        assert w.requires_grad
        assert np.abs(w.data).max() <= np.sqrt(6.0 / 36)


# =============================================================================
# Gradients (central differences, eps = 1e-4)
# =============================================================================

class TestGradients:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
        f = lambda x, w, b: _weighted(conv2d(x, w, b, stride=2, padding=1), seed)
        assert gradient_check(f, [x, w, b]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d_unpadded_1x1(self, seed):
        r = np.random.default_rng(seed)
        x, w = r.normal(size=(1, 3, 4, 4)), r.normal(size=(2, 3, 1, 1))
        assert gradient_check(lambda x, w: _weighted(conv2d(x, w), seed), [x, w]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        x = np.random.default_rng(seed).normal(size=(2, 3, 4))
        # keep samples away from the kink
        x = np.where(np.abs(x) < 0.05, 0.5, x)
        assert gradient_check(lambda x: _weighted(relu(x), seed), [x]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_max_pool(self, seed):
        # distinct values so the argmax is stable under the perturbation
        x = np.random.default_rng(seed).permutation(64).reshape(1, 1, 8, 8).astype(float)
        assert gradient_check(lambda x: _weighted(max_pool2d(x, 2, 2), seed), [x]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_adaptive_avg_pool(self, seed):
        x = np.random.default_rng(seed).normal(size=(1, 2, 7, 5))
        assert gradient_check(lambda x: _weighted(adaptive_avg_pool2d(x, 3, 2), seed), [x]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_bilinear_upsample(self, seed):
        x = np.random.default_rng(seed).normal(size=(1, 2, 3, 4))
        assert gradient_check(lambda x: _weighted(bilinear_upsample(x, 7, 9), seed), [x]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_bilinear_upsample_conserves_gradient_mass(self, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(1, 2, 3, 5)), requires_grad=True)
        out = bilinear_upsample(x, 11, 16)
        g = r.normal(size=out.shape)
        tensor_sum(mul(out, Tensor(g))).backward()
        assert x.grad.sum() == pytest.approx(g.sum(), abs=1e-9)
        np.testing.assert_allclose(x.grad.sum(axis=(2, 3)), g.sum(axis=(2, 3)), atol=1e-9)

    @pytest.mark.parametrize("target,beta", [(1.7, 1.0), (-3.0, 1.0), (2.0, 0.5)])
    def test_smooth_l1_of_dot_product_against_hand_derivative(self, rng, target, beta):
        x = rng.normal(size=5)
        w = Tensor(rng.normal(size=5) * 0.3, requires_grad=True)
        pred = tensor_sum(mul(w, Tensor(x)))
        smooth_l1_loss(pred, Tensor(np.asarray(target)), beta=beta).backward()
        d = float(w.data @ x) - target
        expected = (d / beta if abs(d) < beta else math.copysign(1.0, d)) * x
        np.testing.assert_allclose(w.grad, expected, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_and_slice(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(1, 2, 3, 3)), r.normal(size=(1, 3, 3, 3))

        def f(a, b):
            joined = concat([a, b], axis=1)
            return _weighted(slice_axis(joined, 1, 1, 4), seed)
        assert gradient_check(f, [a, b]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_mul_scale(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
        f = lambda a, b: _weighted(scale(add(mul(a, b), a), -1.5), seed)
        assert gradient_check(f, [a, b]) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_smooth_l1(self, seed):
        r = np.random.default_rng(seed)
        pred, target = r.normal(scale=2.0, size=(2, 1, 4, 4)), r.normal(scale=2.0, size=(2, 1, 4, 4))
        # keep |pred - target| away from beta, where the second derivative jumps
        d = pred - target
        pred = np.where(np.abs(np.abs(d) - 1.0) < 0.05, target + 0.5, pred)
        f = lambda p: smooth_l1_loss(p, Tensor(target))
        assert gradient_check(f, [pred]) < GRAD_TOL


# =============================================================================
# Graph rules
# =============================================================================

class TestBackward:

    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            scale(x, 2.0).backward()

    def test_detached_root(self):
        with pytest.raises(GraphError):
            tensor_sum(Tensor(np.ones(3))).backward()

    def test_shared_input_gradients_add(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        tensor_sum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_diamond_graph_visits_each_node_once(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        h = scale(x, 2.0)
        tensor_sum(add(h, h)).backward()
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        loss = tensor_sum(scale(x, 3.0))
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_target_requiring_grad_rejected(self):
        with pytest.raises(GraphError):
            smooth_l1_loss(Tensor(np.zeros(2)), Tensor(np.zeros(2), requires_grad=True))


# =============================================================================
# Optimizers
# =============================================================================

def _quadratic_params(value):
    p = Tensor(np.array([value]), requires_grad=True)
    return {"p": p}


def _grad_of_square(params):
    tensor_sum(mul(params["p"], params["p"])).backward()


class TestOptimizers:

    def test_sgd_single_step(self):
        params = _quadratic_params(1.0)
        _grad_of_square(params)
        sgd_step(params, lr=0.1)
        np.testing.assert_allclose(params["p"].data, [0.8])
        np.testing.assert_array_equal(params["p"].grad, [0.0])

    def test_sgd_momentum_second_step(self):
        params = _quadratic_params(1.0)
        opt = SGD(params, lr=0.1, momentum=0.9)
        _grad_of_square(params)
        opt.step()                 # v = 2.0, p = 0.8
        _grad_of_square(params)
        opt.step()                 # v = 0.9*2 + 1.6 = 3.4, p = 0.8 - 0.34
        np.testing.assert_allclose(params["p"].data, [0.46])
        np.testing.assert_allclose(opt.state_arrays()["p"], [3.4])

    def test_adam_first_step_moves_by_lr(self):
        params = _quadratic_params(1.0)
        _grad_of_square(params)
        state = adam_step(params, lr=0.01)
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(params["p"].data, [0.99], atol=1e-9)
        assert state["t"] == 1

    def test_adam_class_minimises(self):
        params = _quadratic_params(2.0)
        opt = Adam(params, lr=0.1)
        for _ in range(200):
            _grad_of_square(params)
            opt.step()
        assert abs(params["p"].data[0]) < 0.25

    def test_adam_ten_steps_match_reference_loop(self):
        start = [1.0, -0.5, 3.0]
        params = {"p": Tensor(np.array(start), requires_grad=True)}
        opt = Adam(params, lr=0.05)
        for _ in range(10):
            _grad_of_square(params)
            opt.step()

        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        expected = []
        for p in start:
            m = v = 0.0
            for t in range(1, 11):
                g = 2.0 * p
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            expected.append(p)
        np.testing.assert_allclose(params["p"].data, expected, rtol=1e-12)
        assert opt.state["t"] == 10

    def test_zero_lr_leaves_parameters(self):
        params = _quadratic_params(1.5)
        _grad_of_square(params)
        sgd_step(params, lr=0.0, momentum=0.9)
        assert params["p"].data[0] == 1.5

    def test_missing_gradient(self):
        with pytest.raises(GraphError):
            sgd_step(_quadratic_params(1.0), lr=0.1)
