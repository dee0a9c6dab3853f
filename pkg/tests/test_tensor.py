import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scaled import tensor as T
from scaled.tensor import AdamState, Tensor, adam_step, backward, gradcheck


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestTensorBasics:
    def test_data_length_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == int(np.prod(t.shape)) == 24

    def test_no_grad_leaf_never_accumulates(self):
        a = Tensor(np.ones(3, dtype=np.float64))
        b = leaf([1.0, 2.0, 3.0])
        backward(T.tensor_sum(T.mul(a, b)))
        assert a.grad is None
        np.testing.assert_array_equal(b.grad, [1, 1, 1])

    def test_inputs_precede_outputs(self):
        x = leaf(np.arange(4.0))
        y = T.mul(T.add(x, 1.0), T.sub(x, 2.0))
        z = T.tensor_sum(T.leaky_relu(y))
        stack = [z.node]
        while stack:
            node = stack.pop()
            for inp in node.inputs:
                if inp.node is not None:
                    assert inp.node.id < node.id
                    stack.append(inp.node)

    def test_each_node_visited_once(self):
        x = leaf(np.arange(3.0))
        calls = []
        y = T.add(x, x)
        orig = y.node.backward

        def counting(g):
            calls.append(1)
            return orig(g)

        y.node.backward = counting
        backward(T.tensor_sum(T.mul(y, y)))
        assert len(calls) == 1
        np.testing.assert_allclose(x.grad, 8 * np.arange(3.0))

    def test_fan_in_accumulates(self):
        x = leaf([2.0])
        backward(T.tensor_sum(T.add(T.mul(x, x), T.mul(x, 3.0))))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_backward_needs_scalar(self):
        with pytest.raises(ValueError):
            backward(T.mul(leaf([1.0, 2.0]), 2.0))


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        w[np.arange(3), np.arange(3)] = 1
        out = T.conv2d(x, Tensor(w), Tensor(np.zeros(3, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_convolution(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 10.0

    def test_same_padding_keeps_size(self, rng):
        out = T.conv2d(Tensor(rng.standard_normal((1, 2, 7, 9))), Tensor(rng.standard_normal((4, 2, 3, 3))),
                       padding=1)
        assert out.shape == (1, 4, 7, 9)

    def test_matches_scipy_correlation(self, rng):
        from scipy.signal import correlate

        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        xp = np.pad(x[0], ((0, 0), (1, 1), (1, 1)))
        want = np.stack([correlate(xp, w[o], mode="valid")[0] + b[o] for o in range(3)])
        np.testing.assert_allclose(out[0], want, rtol=1e-12, atol=1e-12)

    def test_gradcheck(self, rng):
        proj = rng.standard_normal((1, 2, 8, 8))
        err = gradcheck(lambda x, w, b: T.tensor_sum(T.mul(T.conv2d(x, w, b, padding=1), proj)),
                        [rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((2, 3, 3, 3)),
                         rng.standard_normal(2)])
        assert err < 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestElementwise:
    def test_leaky_relu_values(self):
        out = T.leaky_relu(Tensor(np.array([-1.0, 2.0, 0.0])), 0.1)
        np.testing.assert_allclose(out.data, [-0.1, 2.0, 0.0])

    def test_leaky_relu_gradient_negative_side(self):
        x = leaf([-1.0])
        backward(T.tensor_sum(T.leaky_relu(x, 0.1)))
        np.testing.assert_allclose(x.grad, [0.1])

    def test_mse_values(self):
        assert T.mse(Tensor(np.zeros(2)), Tensor(np.array([1.0, 3.0]))).item() == 5.0
        a = np.arange(5.0)
        assert T.mse(Tensor(a), Tensor(a)).item() == 0.0

    def test_mse_gradient(self, rng):
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        x = leaf(a)
        backward(T.mse(x, Tensor(b)))
        np.testing.assert_allclose(x.grad, 2 * (a - b) / 6)
        assert gradcheck(lambda p, q: T.mse(p, q), [a, b]) < 1e-4

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.mse(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_broadcast_gradient_is_reduced(self):
        x = leaf(np.ones((2, 3)))
        b = leaf(np.ones((1, 3)))
        backward(T.tensor_sum(T.mul(x, b)))
        assert b.grad.shape == (1, 3)
        np.testing.assert_allclose(b.grad, [[2.0, 2.0, 2.0]])

    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
    def test_binary_gradcheck(self, op, rng):
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 2.0, (1, 4))
        assert gradcheck(lambda p, q: T.tensor_sum(op(p, q)), [a, b]) < 1e-4


class TestStopGradient:
    def test_forward_identity(self, rng):
        x = Tensor(rng.standard_normal(5))
        np.testing.assert_array_equal(T.stop_gradient(x).data, x.data)

    def test_zero_derivative(self):
        x = leaf([1.0, -2.0])
        y = T.add(T.stop_gradient(x), 0.0)
        assert not y.requires_grad

    def test_product_rule_with_blocked_branch(self):
        x = leaf([3.0, -1.5])
        backward(T.tensor_sum(T.mul(x, T.stop_gradient(x))))
        np.testing.assert_allclose(x.grad, [3.0, -1.5])


class TestStdDev:
    def test_constant_is_zero(self):
        assert T.std_dev(Tensor(np.full(5, 0.3))).item() == 0.0

    def test_pair(self):
        assert T.std_dev(Tensor(np.array([1.0, 3.0]))).item() == 1.0

    def test_closed_form_gradient(self, rng):
        v = rng.standard_normal(16)
        x = leaf(v)
        backward(T.std_dev(x))
        np.testing.assert_allclose(x.grad, (v - v.mean()) / (16 * v.std()), rtol=1e-12)

    def test_gradcheck(self, rng):
        assert gradcheck(T.std_dev, [rng.standard_normal(16)]) < 1e-4

    def test_grouped(self, rng):
        v = rng.standard_normal((2, 3, 4, 4))
        out = T.std_dev(Tensor(v), axis=(1, 2, 3))
        assert out.shape == (2, 1, 1, 1)
        np.testing.assert_allclose(out.data.ravel(), v.reshape(2, -1).std(axis=1))

    def test_zero_spread_gradient_is_finite(self):
        x = leaf(np.full(4, 2.0))
        backward(T.std_dev(x))
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_needs_two_elements(self):
        with pytest.raises(ValueError):
            T.std_dev(Tensor(np.array([1.0])))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.zeros((2, 2)))
        backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_conv_mse_gradcheck(self, rng):
        t = rng.standard_normal((1, 1, 6, 6))
        err = gradcheck(lambda x, w: T.mse(T.conv2d(x, w, padding=1), Tensor(t)),
                        [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((1, 2, 3, 3))])
        assert err < 1e-4

    def test_repeatable(self, rng):
        xv, wv = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        grads = []
        for _ in range(2):
            x, w = leaf(xv), leaf(wv)
            backward(T.mean(T.leaky_relu(T.conv2d(x, w, padding=1))))
            grads.append((x.grad, w.grad))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), st.permutations([0, 1, 2]))
    def test_fan_in_order_independent(self, v, perm):
        # the same three terms summed in a different order give the same gradient
        def grad_for(order):
            x = leaf(v)
            terms = [T.mul(x, x), T.mul(x, 2.0), T.leaky_relu(x)]
            acc = terms[order[0]]
            for i in order[1:]:
                acc = T.add(acc, terms[i])
            backward(T.tensor_sum(acc))
            return x.grad

        np.testing.assert_allclose(grad_for([0, 1, 2]), grad_for(perm), rtol=1e-6)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        st_ = AdamState(lr=0.1)
        adam_step(p, {"w": np.zeros(2)}, st_)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = {"w": Tensor(np.array([0.5]))}
        adam_step(p, {"w": np.array([1.0])}, AdamState(lr=1e-3))
        np.testing.assert_allclose(0.5 - p["w"].data, [1e-3], rtol=1e-4)

    def test_moments_match_param_shape_and_step_counts(self, rng):
        p = {"a": Tensor(rng.standard_normal((2, 3))), "b": Tensor(rng.standard_normal(4))}
        state = AdamState()
        for k in range(1, 4):
            adam_step(p, {"a": np.ones((2, 3), np.float32)}, state)
            assert state.step == k
        for name in p:
            assert state.m[name].shape == p[name].shape
            assert state.v[name].shape == p[name].shape

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            g = np.random.Generator(np.random.Philox(7))
            p = {"w": Tensor(g.standard_normal(5).astype(np.float32))}
            state = AdamState(lr=0.01)
            for _ in range(10):
                adam_step(p, {"w": g.standard_normal(5).astype(np.float32)}, state)
            runs.append(p["w"].data.tobytes())
        assert runs[0] == runs[1]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)}, AdamState())
