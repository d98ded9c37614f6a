"""Dense/conv layers, backprop gradients, Nadam, soft updates, FLOPs."""

import numpy as np
import pytest

from sparseran import nn


def finite_difference_grads(net, x, loss_fn, h=1e-5):
    """Central finite differences of loss_fn(net.forward(x)) w.r.t. params."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            hi = loss_fn(net.forward(x)[0])
            p[idx] = orig - h
            lo = loss_fn(net.forward(x)[0])
            p[idx] = orig
            g[idx] = (hi - lo) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, tol=1e-4):
    for a, n in zip(analytic, numeric):
        scale = max(float(np.max(np.abs(n))), 1e-8)
        assert float(np.max(np.abs(a - n))) / scale < tol


class TestForward:
    def test_identity_dense_layer(self):
        rng = np.random.default_rng(0)
        layer = nn.Dense(3, 3, rng)
        layer.weight[:] = np.eye(3)
        layer.bias[:] = 0.0
        net = nn.Network([layer, nn.Activation("identity")])
        x = rng.normal(size=(4, 3))
        out, _ = net.forward(x)
        assert np.allclose(out, x)

    def test_zero_weights_relu_gives_zero(self):
        rng = np.random.default_rng(0)
        layer = nn.Dense(3, 2, rng)
        layer.weight[:] = 0.0
        net = nn.Network([layer, nn.Activation("relu")])
        out, _ = net.forward(rng.normal(size=(5, 3)))
        assert np.all(out == 0.0)

    def test_two_layer_hand_computed(self):
        rng = np.random.default_rng(0)
        l1 = nn.Dense(2, 2, rng)
        l1.weight[:] = [[1.0, 2.0], [3.0, 4.0]]
        l1.bias[:] = [0.5, -0.5]
        l2 = nn.Dense(2, 1, rng)
        l2.weight[:] = [[1.0, -1.0]]
        l2.bias[:] = [0.25]
        net = nn.Network([l1, nn.Activation("tanh"), l2])
        x = np.array([[1.0, -1.0]])
        hidden = np.tanh(np.array([[1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]]))
        expected = hidden[0, 0] - hidden[0, 1] + 0.25
        out, _ = net.forward(x)
        assert abs(out[0, 0] - expected) < 1e-12

    def test_shape_error_names_layer(self):
        rng = np.random.default_rng(0)
        net = nn.Network([nn.Dense(3, 2, rng), nn.Dense(2, 1, rng)])
        with pytest.raises(ValueError, match="layer 0"):
            net.forward(np.zeros((1, 4)))

    def test_conv_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        conv = nn.Conv2D(2, 3, kernel=2, stride=2, input_width=4, rng=rng)
        x = rng.normal(size=(2, 2, 4, 4))
        out, _ = conv.forward(x)
        expected = np.zeros_like(out)
        for b in range(2):
            for o in range(3):
                for i in range(conv.out_width):
                    for j in range(conv.out_width):
                        patch = x[b, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                        expected[b, o, i, j] = (
                            np.sum(patch * conv.weight[o]) + conv.bias[o]
                        )
        assert np.allclose(out, expected, atol=1e-12)

    def test_conv_width_validation(self):
        with pytest.raises(ValueError):
            nn.conv_output_width(5, kernel=2, stride=2)
        assert nn.conv_output_width(8, kernel=2, stride=2) == 4


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        net = nn.Network([nn.Dense(3, 2, rng), nn.Activation("sigmoid")])
        x = rng.normal(size=(4, 3))
        out, caches = net.forward(x)
        _, grads = net.backward(np.zeros_like(out), caches)
        assert all(np.all(g == 0.0) for g in grads)

    def test_dense_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        for activation in ("relu", "tanh", "sigmoid", "identity"):
            net = nn.Network(
                [
                    nn.Dense(4, 5, rng),
                    nn.Activation(activation),
                    nn.Dense(5, 2, rng),
                ]
            )
            x = rng.normal(size=(3, 4))
            out, caches = net.forward(x)
            _, analytic = net.backward(np.ones_like(out), caches)
            numeric = finite_difference_grads(net, x, np.sum)
            assert_grads_close(analytic, numeric)

    def test_conv_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        net = nn.Network(
            [
                nn.Conv2D(1, 2, kernel=3, stride=1, input_width=4, rng=rng),
                nn.Activation("relu"),
                nn.Flatten(),
                nn.Dense(8, 1, rng),
            ]
        )
        x = rng.normal(size=(2, 1, 4, 4))
        out, caches = net.forward(x)
        _, analytic = net.backward(np.ones_like(out), caches)
        numeric = finite_difference_grads(net, x, np.sum)
        assert_grads_close(analytic, numeric)

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net = nn.Network([nn.Dense(3, 2, rng), nn.Activation("tanh")])
        x = rng.normal(size=(1, 3))
        out, caches = net.forward(x)
        dx, _ = net.backward(np.ones_like(out), caches)
        h = 1e-6
        for i in range(3):
            bumped = x.copy()
            bumped[0, i] += h
            hi = np.sum(net.forward(bumped)[0])
            bumped[0, i] -= 2 * h
            lo = np.sum(net.forward(bumped)[0])
            assert abs(dx[0, i] - (hi - lo) / (2 * h)) < 1e-6


class TestNadam:
    def test_zero_gradient_is_noop(self):
        params = [np.array([1.0, -2.0])]
        opt = nn.Nadam(params, learning_rate=0.1)
        opt.step(params, [np.zeros(2)])
        assert np.array_equal(params[0], [1.0, -2.0])

    def test_descends_against_constant_gradient(self):
        params = [np.array([0.0])]
        opt = nn.Nadam(params, learning_rate=0.01)
        for _ in range(50):
            opt.step(params, [np.array([2.0])])
        assert params[0][0] < 0.0

    def test_two_step_scalar_recurrence(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        params = [np.array([1.0])]
        opt = nn.Nadam(params, lr, beta1=b1, beta2=b2, epsilon=eps)
        grads = [0.5, -0.25]
        # reference recurrence computed step by step by hand
        p, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            nesterov = b1 * m_hat + (1 - b1) * g / (1 - b1**t)
            p -= lr * nesterov / (np.sqrt(v_hat) + eps)
            opt.step(params, [np.array([g])])
        assert abs(params[0][0] - p) < 1e-12

    def test_invalid_decay_rates_rejected(self):
        with pytest.raises(ValueError):
            nn.Nadam([np.zeros(1)], 0.1, beta1=1.0)


class TestSoftUpdate:
    def test_full_delta_copies(self):
        target = [np.array([0.0, 0.0])]
        current = [np.array([1.0, 2.0])]
        nn.soft_update(target, current, 1.0)
        assert np.array_equal(target[0], current[0])

    def test_fixed_point(self):
        target = [np.array([3.0])]
        nn.soft_update(target, [np.array([3.0])], 0.05)
        assert target[0][0] == pytest.approx(3.0)

    def test_hand_example(self):
        target = [np.array([0.0])]
        nn.soft_update(target, [np.array([1.0])], 0.05)
        assert target[0][0] == pytest.approx(0.05, abs=1e-12)

    def test_convex_combination(self):
        rng = np.random.default_rng(0)
        target = [rng.normal(size=5)]
        current = [rng.normal(size=5)]
        lo = np.minimum(target[0], current[0])
        hi = np.maximum(target[0], current[0])
        nn.soft_update(target, current, 0.3)
        assert np.all(target[0] >= lo - 1e-12)
        assert np.all(target[0] <= hi + 1e-12)

    def test_delta_range(self):
        with pytest.raises(ValueError):
            nn.soft_update([np.zeros(1)], [np.zeros(1)], 0.0)


class TestFlops:
    def test_single_pixel_conv(self):
        spec = nn.LayerSpec(
            kind="conv", in_channels=1, out_channels=1, kernel=4, stride=1,
            input_width=4,
        )
        assert nn.flops_estimate([spec]) == 16

    def test_strided_conv(self):
        spec = nn.LayerSpec(
            kind="conv", in_channels=3, out_channels=2, kernel=2, stride=2,
            input_width=8,
        )
        assert nn.flops_estimate([spec]) == 6144

    def test_zero_channels(self):
        spec = nn.LayerSpec(
            kind="conv", in_channels=0, out_channels=2, kernel=2, stride=2,
            input_width=8,
        )
        assert nn.flops_estimate([spec]) == 0

    def test_multiplicative_in_channels(self):
        def conv(ci, co):
            return nn.LayerSpec(
                kind="conv", in_channels=ci, out_channels=co, kernel=2,
                stride=2, input_width=8,
            )

        base = nn.flops_estimate([conv(1, 1)])
        assert nn.flops_estimate([conv(3, 1)]) == 3 * base
        assert nn.flops_estimate([conv(1, 5)]) == 5 * base

    def test_dense_contribution(self):
        spec = nn.LayerSpec(kind="dense", input_size=7, output_size=3)
        assert nn.flops_estimate([spec]) == 21

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            nn.flops_estimate([nn.LayerSpec(kind="pooling")])


class TestWeightIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        net = nn.Network([nn.Dense(3, 2, rng), nn.Activation("relu")])
        path = tmp_path / "weights.npz"
        nn.save_weights(path, {"net": net})
        clone = nn.Network([nn.Dense(3, 2, np.random.default_rng(1))])
        nn.load_weights(path, {"net": clone})
        assert np.array_equal(clone.parameters()[0], net.parameters()[0])

    def test_shape_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(0)
        net = nn.Network([nn.Dense(3, 2, rng)])
        path = tmp_path / "weights.npz"
        nn.save_weights(path, {"net": net})
        other = nn.Network([nn.Dense(4, 2, rng)])
        with pytest.raises(ValueError):
            nn.load_weights(path, {"net": other})
