"""Engine-level checks: forward values, backward semantics, finite differences."""

import numpy as np
import pytest

from mambasplat import autodiff as ad
from mambasplat.errors import DimensionError, UsageError


def test_matmul_identity():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    out = ad.matmul(ad.tensor(np.eye(2)), ad.tensor(a))
    np.testing.assert_allclose(out.data, a)


def test_matmul_hand_value():
    out = ad.matmul(ad.tensor([[1.0, 2.0], [3.0, 4.0]]), ad.tensor([[1.0], [1.0]]))
    np.testing.assert_allclose(out.data, [[3.0], [7.0]])


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    with ad.precision("double"):
        rng = np.random.default_rng(0)
        a = ad.tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
        b = ad.tensor(rng.normal(0, 1, (4, 2)), requires_grad=True)
        err = ad.gradcheck(lambda: ad.tensor_sum(ad.matmul(a, b)), [a, b])
        assert err < 1e-6


def test_backward_square():
    x = ad.tensor(3.0, requires_grad=True)
    (x * x).backward()
    np.testing.assert_allclose(x.grad, 6.0)


def test_backward_accumulates_across_uses():
    x = ad.tensor(2.0, requires_grad=True)
    (x + x).backward()
    np.testing.assert_allclose(x.grad, 2.0)


def test_backward_twice_doubles_exactly():
    x = ad.tensor(np.array([1.5, -0.5]), requires_grad=True)
    loss = ad.tensor_sum(x * x)
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_backward_requires_scalar():
    x = ad.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (x * x).backward()


def test_softmax_uniform_for_equal_logits():
    for k in (2, 5, 17):
        out = ad.softmax(ad.tensor(np.full(k, 0.7)))
        np.testing.assert_allclose(out.data, np.full(k, 1.0 / k), atol=1e-7)


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.tensor(0.0)).item() == pytest.approx(0.5)


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(1)
    x = ad.tensor(rng.normal(2.0, 3.0, (5, 16)))
    out = ad.layer_norm(x, ad.tensor(np.ones(16)), ad.tensor(np.zeros(16)))
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-3)


def test_broadcast_add_and_error():
    out = ad.add(ad.tensor(np.ones((4, 3))), ad.tensor(np.arange(3.0)))
    np.testing.assert_allclose(out.data[0], [1.0, 2.0, 3.0])
    with pytest.raises(DimensionError):
        ad.add(ad.tensor(np.ones((4, 3))), ad.tensor(np.ones(5)))


def test_broadcast_gradient_reduces_correctly():
    with ad.precision("double"):
        b = ad.tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        x = ad.tensor(np.arange(12.0).reshape(4, 3))
        loss = ad.tensor_sum(ad.mul(x, b) * ad.mul(x, b))
        loss.backward()
        expected = (2 * (x.data * b.data) * x.data).sum(axis=0)
        np.testing.assert_allclose(b.grad, expected, rtol=1e-12)


def test_depthwise_conv_identity_kernel():
    x = ad.tensor(np.random.default_rng(2).normal(0, 1, (7, 3)))
    out = ad.depthwise_conv1d(x, ad.tensor(np.ones((1, 3))), causal=True)
    np.testing.assert_array_equal(out.data, x.data)


def test_depthwise_conv_delay_kernel():
    x = ad.tensor(np.arange(12.0).reshape(6, 2))
    kernel = ad.tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))  # y[l] = x[l-1]
    out = ad.depthwise_conv1d(x, kernel, causal=True)
    np.testing.assert_array_equal(out.data[0], 0.0)
    np.testing.assert_array_equal(out.data[1:], x.data[:-1])


def test_depthwise_conv_gradcheck():
    with ad.precision("double"):
        rng = np.random.default_rng(3)
        x = ad.tensor(rng.normal(0, 1, (9, 4)), requires_grad=True)
        k = ad.tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
        err = ad.gradcheck(
            lambda: ad.tensor_sum(ad.depthwise_conv1d(x, k, causal=True) ** 2.0), [x, k])
        assert err < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_composed_graph_matches_finite_differences(seed):
    # add/mul/matmul/exp/sigmoid/softplus/softmax/layer_norm/getitem/concat in one graph
    with ad.precision("double"):
        rng = np.random.default_rng(seed)
        a = ad.tensor(rng.normal(0, 1, (4, 5)), requires_grad=True)
        b = ad.tensor(rng.normal(0, 1, (5, 3)), requires_grad=True)
        g = ad.tensor(rng.normal(0, 0.5, 3), requires_grad=True)

        def build():
            h = ad.matmul(ad.silu(a), b)
            h = ad.layer_norm(h, g, ad.tensor(np.zeros(3)))
            h = ad.softmax(h, axis=1)
            top = ad.concat([h[:2, :], ad.exp(h[2:, :] * -1.0)], axis=0)
            return ad.tensor_mean(top * top) + ad.tensor_sum(ad.softplus(h[:, 0]))

        err = ad.gradcheck(build, [a, b, g], samples=10, rng=rng)
        assert err < 1e-4


def test_getitem_fancy_index_scatter_adds():
    x = ad.tensor(np.arange(5.0), requires_grad=True)
    idx = np.array([0, 2, 2])
    out = x[idx]
    ad.tensor_sum(out).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 2.0, 0.0, 0.0])


def test_clamp_gradient_mask():
    x = ad.tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    ad.tensor_sum(ad.clamp(x, 0.0, 1.0) * 2.0).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0])


def test_normalize_rows_unit_and_fallback():
    x = ad.tensor(np.array([[3.0, 4.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]),
                  requires_grad=True)
    out = ad.normalize_rows(x, fallback=(1.0, 0.0, 0.0, 0.0))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0)
    np.testing.assert_array_equal(out.data[1], [1.0, 0.0, 0.0, 0.0])
    ad.tensor_sum(out).backward()
    np.testing.assert_array_equal(x.grad[1], 0.0)  # degenerate row gets no gradient


def test_ops_deterministic():
    rng = np.random.default_rng(4)
    a = rng.normal(0, 1, (64, 64)).astype(np.float32)
    b = rng.normal(0, 1, (64, 64)).astype(np.float32)
    r1 = ad.matmul(ad.tensor(a), ad.tensor(b)).data
    r2 = ad.matmul(ad.tensor(a), ad.tensor(b)).data
    np.testing.assert_array_equal(r1, r2)


def test_precision_context_switches_dtype():
    assert ad.tensor(1.0).data.dtype == np.float32
    with ad.precision("double"):
        assert ad.tensor(1.0).data.dtype == np.float64
    assert ad.tensor(1.0).data.dtype == np.float32
