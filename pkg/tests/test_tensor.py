import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from canmdtc import tensor as T
from canmdtc.tensor import DomainError, GraphError, ShapeError, Tensor, finite_diff_check, make_rng

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_column_product(self):
        out = T.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[5.0], [6.0]])))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[2, 3\].*\[2, 3\]|\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formulas(self):
        rng = make_rng(1)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        g = rng.normal(size=(3, 2))
        T.sum(T.mul_const(T.matmul(a, b), g)).backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


class TestSoftmax:
    def test_zero_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor(np.zeros((1, 2)))).data, [[0.5, 0.5]])

    def test_log_ratio(self):
        out = T.softmax_rows(Tensor(np.array([[math.log(1.0), math.log(3.0)]]))).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax_rows(Tensor(np.array([[1000.0, 1000.0]]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    @given(arrays(np.float64, (3, 4), elements=finite), finite)
    def test_rows_sum_to_one_and_shift_invariant(self, x, shift):
        p = T.softmax_rows(Tensor(x)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax_rows(Tensor(x + shift)).data, p, atol=1e-12)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor(np.array([-3.0, 2.0]))).data, [0.0, 2.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = leaf([0.0, 1.0, -1.0])
        T.sum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            T.log(Tensor(np.array([1.0, 0.0])))
        with pytest.raises(DomainError):
            T.log(Tensor(np.array([-2.0])))

    def test_clamp_min_keeps_nan(self):
        out = T.clamp_min(Tensor(np.array([np.nan, 1e-20, 0.5])), 1e-12).data
        assert np.isnan(out[0])
        np.testing.assert_array_equal(out[1:], [1e-12, 0.5])

    def test_dropout_eval_is_identity(self):
        x = Tensor(make_rng(0).normal(size=(5, 7)))
        np.testing.assert_array_equal(T.dropout(x, 0.4, False, None).data, x.data)

    def test_dropout_train_is_inverted(self):
        x = Tensor(np.ones((200, 200)))
        out = T.dropout(x, 0.4, True, make_rng(3)).data
        kept = out != 0
        np.testing.assert_allclose(out[kept], 1.0 / 0.6)
        assert abs(kept.mean() - 0.6) < 0.01

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_dropout_rate_bounds(self, p):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.ones(3)), p, True, make_rng(0))

    def test_concat_discriminator_width(self):
        f, c = Tensor(np.zeros((4, 128))), Tensor(np.full((4, 2), 0.5))
        assert T.concat_lastaxis([f, c]).shape == (4, 130)

    def test_add_bias_is_the_only_broadcast(self):
        out = T.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
        with pytest.raises(ShapeError):
            T.add_bias(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_grad_reverse_value_identity_gradient_negated(self):
        x = leaf([1.0, -2.0])
        y = T.grad_reverse(x, 0.5)
        np.testing.assert_array_equal(y.data, x.data)
        T.sum(y).backward()
        np.testing.assert_array_equal(x.grad, [-0.5, -0.5])


class TestConv:
    def naive(self, tokens, weight, bias, k):
        padded = tokens
        if len(tokens) < k:
            padded = np.vstack([tokens, np.zeros((k - len(tokens), tokens.shape[1]))])
        windows = [padded[t : t + k].reshape(-1) for t in range(len(padded) - k + 1)]
        responses = np.array([[w @ win + b for win in windows] for w, b in zip(weight, bias)])
        return responses.max(axis=1)

    def test_window_count(self):
        rng = make_rng(0)
        tokens = rng.normal(size=(5, 2))
        weight, bias = np.zeros((1, 6)), np.zeros(1)
        # a kernel that reads only the first token of each window picks the max of tokens 0..2
        weight[0, 0] = 1.0
        out = T.conv1d_maxpool(Tensor(tokens), Tensor(weight), Tensor(bias), 3).data
        assert out.shape == (1,)
        assert out[0] == tokens[:3, 0].max()

    def test_zero_everything_gives_bias(self):
        bias = np.array([0.3, -1.2, 4.0])
        out = T.conv1d_maxpool(Tensor(np.zeros((6, 4))), Tensor(np.zeros((3, 12))), Tensor(bias), 3)
        np.testing.assert_array_equal(out.data, bias)

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_matches_window_loop(self, k):
        rng = make_rng(k)
        tokens, weight, bias = rng.normal(size=(7, 5)), rng.normal(size=(6, k * 5)), rng.normal(size=6)
        out = T.conv1d_maxpool(Tensor(tokens), Tensor(weight), Tensor(bias), k).data
        np.testing.assert_allclose(out, self.naive(tokens, weight, bias, k), atol=1e-12, rtol=0)

    def test_short_sequence_is_padded(self):
        rng = make_rng(9)
        tokens, weight, bias = rng.normal(size=(2, 3)), rng.normal(size=(4, 15)), rng.normal(size=4)
        out = T.conv1d_maxpool(Tensor(tokens), Tensor(weight), Tensor(bias), 5).data
        np.testing.assert_allclose(out, self.naive(tokens, weight, bias, 5), atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = leaf(3.0)
        (x * x).backward()
        assert x.grad == 6.0

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(GraphError):
            T.relu(x).backward()

    def test_repeated_backward_accumulates(self):
        x = leaf([1.0, 2.0])
        T.sum(T.scale(x, 2.0)).backward()
        T.sum(T.scale(x, 2.0)).backward()
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])

    def test_shared_operand_gets_summed_contributions(self):
        x = leaf([1.5, -2.0])
        y = T.add(T.scale(x, 3.0), T.mul(x, x))
        T.sum(y).backward()
        np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)

    def test_only_leaves_keep_gradients(self):
        x = leaf([1.0, 2.0])
        h = T.relu(x)
        T.sum(h).backward()
        assert h.grad is None
        assert x.grad is not None

    def test_grad_shape_matches_data(self):
        x = leaf(np.ones((3, 2)))
        assert x.grad.shape == x.data.shape

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 9))
    def test_half_batch_gradients_add_up(self, seed, n):
        rng = make_rng(seed)
        w = leaf(rng.normal(size=(4, 3)))
        x = rng.normal(size=(n, 4))
        targets = rng.integers(0, 3, size=n)

        def batch_loss(rows):
            p = T.softmax_rows(T.matmul(Tensor(x[rows]), w))
            return T.sum(T.scale(T.log(T.pick(p, targets[rows])), -1.0))

        batch_loss(np.arange(n)).backward()
        full = w.grad.copy()
        w.zero_grad()
        batch_loss(np.arange(n // 2)).backward()
        batch_loss(np.arange(n // 2, n)).backward()
        np.testing.assert_allclose(w.grad, full, atol=1e-10)

    def test_deterministic_forward_backward(self):
        def run():
            rng = make_rng(42)
            w = leaf(rng.normal(size=(5, 3)))
            x = Tensor(rng.normal(size=(4, 5)))
            out = T.sum(T.dropout(T.relu(T.matmul(x, w)), 0.4, True, rng))
            out.backward()
            return out.data.tobytes() + w.grad.tobytes()

        assert run() == run()

    def test_rng_bit_identical(self):
        assert make_rng(5).random(10).tobytes() == make_rng(5).random(10).tobytes()


class TestFiniteDiff:
    def test_sum_is_exact(self):
        x = leaf(make_rng(0).normal(size=(3, 3)))
        assert finite_diff_check(T.sum, x) < 1e-9

    def test_nll_softmax_matmul_chain(self):
        rng = make_rng(2)
        x = Tensor(rng.normal(size=(4, 6)))
        w = leaf(rng.normal(size=(6, 3)))
        y = rng.integers(0, 3, size=4)
        f = lambda w: T.mean(T.scale(T.log(T.pick(T.softmax_rows(T.matmul(x, w)), y)), -1.0))  # noqa: E731
        assert finite_diff_check(f, w) < 1e-4

    def test_relu_kink_excluded(self):
        x = leaf([0.0, 0.7, -0.3])
        assert finite_diff_check(lambda x: T.sum(T.relu(x)), x) < 1e-8

    def test_detects_a_wrong_gradient(self):
        # gradient-reversed identity has the wrong sign on purpose
        x = leaf([0.5, 1.0])
        assert finite_diff_check(lambda x: T.sum(T.grad_reverse(x, 1.0)), x) > 1.0

    def test_restores_input(self):
        data = make_rng(4).normal(size=5)
        x = leaf(data.copy())
        finite_diff_check(lambda x: T.sum(T.exp(x)), x)
        np.testing.assert_array_equal(x.data, data)
