import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sta_lab.tensor import (
    ShapeError,
    Tensor,
    concat,
    count_macs,
    mac_counter,
    matmul,
    no_grad,
    softmax,
    where_const,
)

from _oracles import gradcheck


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).data, a)

    def test_projector(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(matmul(Tensor(p), Tensor(b)).data, [[5, 6], [0, 0]])

    def test_grad_of_sum(self, rng):
        a, b = leaf([[1.0, 2.0]]), Tensor(np.array([[3.0], [4.0]]))
        matmul(a, b).sum().backward()
        np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
        assert gradcheck(lambda a: matmul(a, Tensor(np.array([[3.0], [4.0]]))), [a.data], rng) < 1e-8

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_grad(self, rng):
        err = gradcheck(matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))], rng)
        assert err < 1e-6

    def test_counts_macs(self):
        with mac_counter() as box:
            matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
        assert box[0] == 2 * 3 * 4 * 5


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])

    def test_saturation_no_overflow(self):
        out = softmax(Tensor(np.array([1000.0, 0.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_ln2(self):
        out = softmax(Tensor(np.array([np.log(2.0), 0.0]))).data
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_mask_gives_exact_zero(self):
        mask = np.array([True, False, True])
        out = softmax(Tensor(np.array([0.3, 5.0, -1.0])), mask=mask).data
        assert out[1] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one_f64(self, x):
        np.testing.assert_allclose(softmax(Tensor(x), axis=-1).data.sum(-1), 1.0, atol=1e-12)

    def test_rows_sum_to_one_f32(self, rng):
        x = rng.standard_normal((4, 7)).astype(np.float32) * 10
        out = softmax(Tensor(x), axis=1).data
        assert out.dtype == np.float32
        np.testing.assert_allclose(out.sum(1), 1.0, atol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_quadratic(self):
        x = leaf([1.0, 2.0, 3.0])
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ShapeError):
            leaf([1.0, 2.0]).backward()

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        y = x * 3.0
        (y * y + y).sum().backward()
        # d/dx (9x² + 3x) = 18x + 3
        np.testing.assert_allclose(x.grad, [39.0])

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_deterministic_gradients(self, rng):
        a = rng.standard_normal((3, 4))
        grads = []
        for _ in range(2):
            x = leaf(a)
            ((x.exp() * x).sum(axis=1) ** 2).sum().backward()
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])


@pytest.mark.parametrize(
    "name, fn, shapes",
    [
        ("add_broadcast", lambda a, b: a + b, [(2, 3), (3,)]),
        ("sub_mul", lambda a, b: (a - b) * a, [(2, 3), (2, 3)]),
        ("div", lambda a, b: a / (b * b + 1.0), [(2, 3), (2, 3)]),
        ("pow", lambda a: (a * a + 1.0) ** 1.5, [(4,)]),
        ("exp_log", lambda a: (a.exp() + 1.0).log(), [(3, 2)]),
        ("sqrt", lambda a: (a * a + 0.5).sqrt(), [(5,)]),
        ("tanh", lambda a: a.tanh(), [(5,)]),
        ("mean_axis", lambda a: a.mean(axis=(0, 2), keepdims=True), [(2, 3, 4)]),
        ("reshape_transpose", lambda a: a.reshape(3, 4).transpose(1, 0) * 2.0, [(2, 6)]),
        ("getitem", lambda a: a[1:, ::2], [(3, 4)]),
        ("fancy_getitem", lambda a: a[np.array([0, 2, 0])], [(3, 2)]),
        ("softmax", lambda a: softmax(a, axis=0), [(4, 3)]),
        ("concat", lambda a, b: concat([a, b], axis=1), [(2, 2, 2), (2, 3, 2)]),
    ],
)
def test_op_gradients(name, fn, shapes, rng):
    assert gradcheck(fn, [rng.standard_normal(s) for s in shapes], rng) < 1e-6, name


def test_where_const_routes_gradient(rng):
    cond = np.array([True, False, True])
    x, y = leaf(rng.standard_normal(3)), leaf(rng.standard_normal(3))
    where_const(cond, x, y).sum().backward()
    np.testing.assert_array_equal(x.grad, cond.astype(float))
    np.testing.assert_array_equal(y.grad, (~cond).astype(float))


def test_mac_counter_nests_and_resets():
    with mac_counter() as outer:
        count_macs(3)
        with mac_counter() as inner:
            count_macs(5)
    assert inner[0] == 5
    assert outer[0] == 8
