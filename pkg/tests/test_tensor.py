"""Tensor engine tests: frozen hand-computed values plus finite-difference checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab import tensor as T
from moelab.tensor import NonFiniteError, Tensor

from conftest import assert_grads_match


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        assert np.array_equal(out.data, a.data)

    def test_hand_values(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_matches_loop(self, rng):
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(4, 5, 2))
        out = T.matmul(Tensor(a), Tensor(b))
        for i in range(4):
            assert np.array_equal(out.data[i], a[i] @ b[i])

    def test_vector_operand_rejected(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=8)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 7.5)).data
        assert np.abs(a - b).max() < 1e-12

    def test_log_weights(self):
        out = T.softmax(Tensor([math.log(1), math.log(2), math.log(3)]))
        assert np.abs(out.data - np.array([1 / 6, 2 / 6, 3 / 6])).max() < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_rows_sum_to_one(self, values):
        out = T.softmax(Tensor(values)).data
        assert abs(out.sum() - 1.0) < 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_rows_sum_axis(self, rng):
        out = T.softmax(Tensor(rng.normal(size=(5, 7))), axis=-1).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


class TestRmsNorm:
    def test_hand_values(self):
        out = T.rms_norm(Tensor([3.0, 4.0]), Tensor([1.0, 1.0]), eps=0.0)
        r = math.sqrt(12.5)
        assert np.abs(out.data - np.array([3.0 / r, 4.0 / r])).max() < 1e-15

    def test_zero_input(self):
        out = T.rms_norm(Tensor(np.zeros(4)), Tensor(np.ones(4)), eps=1e-6)
        assert np.array_equal(out.data, np.zeros(4))

    def test_gain_linearity(self):
        x = Tensor([3.0, 4.0])
        one = T.rms_norm(x, Tensor([1.0, 1.0]), eps=0.0).data
        two = T.rms_norm(x, Tensor([2.0, 2.0]), eps=0.0).data
        assert np.allclose(two, 2.0 * one, rtol=0, atol=1e-15)

    def test_gain_shape_error(self):
        with pytest.raises(ValueError):
            T.rms_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        out = T.cross_entropy(Tensor(np.zeros((3, 64))), np.array([5, 0, 63]))
        assert abs(out.item() - math.log(64)) < 1e-12

    def test_confident_correct(self, rng):
        logits = np.zeros((1, 16))
        logits[0, 3] = 10.0
        out = T.cross_entropy(Tensor(logits), np.array([3]))
        assert out.item() < math.log(16)

    def test_hand_value(self):
        out = T.cross_entropy(Tensor([[0.0, math.log(3)]]), np.array([1]))
        assert abs(out.item() - math.log(4 / 3)) < 1e-15

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 4))), np.array([-1, 0]))


class TestTopK:
    def test_descending_order(self):
        idx, vals = T.top_k(np.array([0.1, 0.4, 0.2, 0.3]), 3)
        assert idx.tolist() == [1, 3, 2]
        assert vals.tolist() == [0.4, 0.3, 0.2]

    def test_tie_lowest_index_wins(self):
        idx, _ = T.top_k(np.array([0.5, 0.5, 0.5, 0.5]), 2)
        assert idx.tolist() == [0, 1]

    def test_partial_ties(self):
        idx, _ = T.top_k(np.array([0.3, 0.7, 0.3, 0.7, 0.1]), 3)
        assert idx.tolist() == [1, 3, 0]

    def test_repeat_calls_identical(self, rng):
        x = rng.normal(size=(6, 9))
        a = T.top_k(x, 4)
        b = T.top_k(x, 4)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_matches_sort_oracle(self, rng):
        for _ in range(50):
            x = rng.integers(0, 4, size=12).astype(np.float64)  # many ties
            idx, vals = T.top_k(x, 5)
            order = sorted(range(12), key=lambda i: (-x[i], i))[:5]
            assert idx.tolist() == order
            assert vals.tolist() == [x[i] for i in order]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            T.top_k(np.zeros(3), 4)
        with pytest.raises(ValueError):
            T.top_k(np.zeros(3), 0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic(self, rng):
        x = Tensor(rng.normal(size=6), requires_grad=True)
        T.mul(T.tsum(T.mul(x, x)), 0.5).backward()
        assert np.allclose(x.grad, x.data, rtol=0, atol=1e-15)

    def test_nonscalar_seed_rejected(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, 2.0).backward()

    def test_accumulation_over_uses(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        T.tsum(T.add(x, x)).backward()
        assert np.array_equal(x.grad, 2.0 * np.ones(4))

    def test_diamond_graph_visits_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.mul(x, 3.0)
        T.tsum(T.add(y, y)).backward()
        assert np.array_equal(x.grad, [6.0])


class TestGradients:
    """Finite-difference checks per op, randomized small shapes."""

    def test_matmul(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        w = rng.normal(size=(3, 2))
        assert_grads_match(lambda: T.tsum(T.mul(T.matmul(a, b), Tensor(w))), [a, b])

    def test_matmul_batched(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        w = rng.normal(size=(2, 3, 3))
        assert_grads_match(lambda: T.tsum(T.mul(T.matmul(a, b), Tensor(w))), [a, b])

    def test_add_mul_broadcast(self, rng):
        a = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        c = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert_grads_match(lambda: T.tsum(T.mul(T.add(a, b), c)), [a, b, c])

    def test_softmax(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = rng.normal(size=(4, 6))
        assert_grads_match(lambda: T.tsum(T.mul(T.softmax(x, axis=-1), Tensor(w))), [x])

    def test_logsumexp(self, rng):
        x = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
        w = rng.normal(size=5)
        assert_grads_match(lambda: T.tsum(T.mul(T.logsumexp(x, axis=-1), Tensor(w))), [x])

    def test_rms_norm(self, rng):
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=5), requires_grad=True)
        w = rng.normal(size=(4, 5))
        assert_grads_match(lambda: T.tsum(T.mul(T.rms_norm(x, g), Tensor(w))), [x, g])

    def test_glu(self, rng):
        a = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = rng.normal(size=(3, 6))
        assert_grads_match(lambda: T.tsum(T.mul(T.glu(a, b), Tensor(w))), [a, b])

    def test_cross_entropy(self, rng):
        x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        targets = rng.integers(0, 8, size=5)
        assert_grads_match(lambda: T.cross_entropy(x, targets), [x])

    def test_take_rows_with_duplicates(self, rng):
        w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        ids = np.array([0, 2, 2, 5, 0, 0])
        c = rng.normal(size=(6, 3))
        assert_grads_match(lambda: T.tsum(T.mul(T.take_rows(w, ids), Tensor(c))), [w])

    def test_scatter_rows(self, rng):
        v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        ids = np.array([5, 0, 5, 2])
        c = rng.normal(size=(7, 3))
        assert_grads_match(lambda: T.tsum(T.mul(T.scatter_rows(v, ids, 7), Tensor(c))), [v])

    def test_take_along_last(self, rng):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        idx = np.array([[0, 5], [1, 1], [3, 2], [4, 0]])
        c = rng.normal(size=(4, 2))
        assert_grads_match(lambda: T.tsum(T.mul(T.take_along_last(x, idx), Tensor(c))), [x])

    def test_narrow_concat(self, rng):
        x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        c = rng.normal(size=(3, 8))

        def build():
            lo = T.narrow(x, -1, 0, 4)
            hi = T.narrow(x, -1, 4, 4)
            return T.tsum(T.mul(T.concat([T.mul(hi, -1.0), lo], axis=-1), Tensor(c)))

        assert_grads_match(build, [x])

    def test_reshape_transpose(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        c = rng.normal(size=(4, 6))
        assert_grads_match(
            lambda: T.tsum(T.mul(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)), Tensor(c))),
            [x],
        )

    def test_causal_attention(self, rng):
        q = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        c = rng.normal(size=(2, 5, 4))
        assert_grads_match(lambda: T.tsum(T.mul(T.causal_attention(q, k, v), Tensor(c))), [q, k, v])

    def test_mean_axis(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = rng.normal(size=5)
        assert_grads_match(lambda: T.tsum(T.mul(T.tmean(x, axis=0), Tensor(w))), [x])


class TestCausalMask:
    def test_future_perturbation_invisible(self, rng):
        q = rng.normal(size=(1, 6, 4))
        k = rng.normal(size=(1, 6, 4))
        v = rng.normal(size=(1, 6, 4))
        base = T.causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
        k2, v2 = k.copy(), v.copy()
        k2[0, 4] += 3.0
        v2[0, 4] -= 1.0
        bump = T.causal_attention(Tensor(q), Tensor(k2), Tensor(v2)).data
        assert np.array_equal(base[0, :4], bump[0, :4])
        assert not np.array_equal(base[0, 4:], bump[0, 4:])


class TestNaNPolicy:
    def test_overflow_raises_at_op(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                T.mul(Tensor([1e308]), 10.0)

    def test_nonfinite_leaf_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])


class TestIndexErrors:
    def test_take_rows_out_of_range(self, rng):
        w = Tensor(rng.normal(size=(4, 3)))
        with pytest.raises(IndexError):
            T.take_rows(w, np.array([0, 4]))

    def test_scatter_rows_out_of_range(self, rng):
        v = Tensor(rng.normal(size=(2, 3)))
        with pytest.raises(IndexError):
            T.scatter_rows(v, np.array([0, 5]), 5)


class TestDeterminism:
    def test_forward_bit_identical(self, rng):
        x = rng.normal(size=(4, 6))
        g = rng.normal(size=6)
        a = T.rms_norm(T.softmax(Tensor(x), axis=-1), Tensor(g)).data
        b = T.rms_norm(T.softmax(Tensor(x), axis=-1), Tensor(g)).data
        assert np.array_equal(a, b)
