import numpy as np
import pytest

from depthbench.errors import GraphError, ShapeError
from depthbench.tensor import (Graph, Tensor, add, backward, block_mean_pool,
                               concat_channels, conv2d_1x1, conv2d_3x3_pad1,
                               downsample_avg_x2, grad_check, mean_all, mul,
                               mul_scalar, primitive_forward, silu,
                               slice_channels, softmax_channels, sum_all,
                               upsample_bilinear_x2)


def test_block_mean_pool_hand_case():
    x = Tensor(np.arange(1, 17, dtype=np.float64).reshape(1, 4, 4))
    out = block_mean_pool(x, (2, 2))
    np.testing.assert_array_equal(out.data, [[[3.5, 5.5], [11.5, 13.5]]])


def test_block_mean_pool_grid_must_divide():
    x = Tensor(np.zeros((1, 6, 4)))
    with pytest.raises(ShapeError, match="6x4"):
        block_mean_pool(x, (4, 2))


def test_silu_zero_and_shape():
    x = Tensor(np.zeros((2, 3, 3)))
    out = silu(x)
    assert out.shape == (2, 3, 3)
    np.testing.assert_array_equal(out.data, np.zeros((2, 3, 3)))


def test_conv1x1_identity_kernel_is_exact():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 5, 4)))
    eye = np.eye(3)[:, :, None, None]
    out = conv2d_1x1(x, Tensor(eye))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_shape_errors_name_offender():
    x = Tensor(np.zeros((3, 4, 4)))
    with pytest.raises(ShapeError, match="conv2d_1x1"):
        conv2d_1x1(x, Tensor(np.zeros((2, 5, 1, 1))))
    with pytest.raises(ShapeError, match="conv2d_3x3_pad1"):
        conv2d_3x3_pad1(x, Tensor(np.zeros((2, 3, 2, 2))))


def test_concat_requires_matching_spatial():
    with pytest.raises(ShapeError, match="concat_channels"):
        concat_channels([Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 3, 4)))])


def test_concat_then_slice_roundtrip():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 4, 4)))
    b = Tensor(rng.normal(size=(3, 4, 4)))
    cat = concat_channels([a, b])
    np.testing.assert_array_equal(slice_channels(cat, 0, 2).data, a.data)
    np.testing.assert_array_equal(slice_channels(cat, 2, 5).data, b.data)


def test_softmax_channels_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(2)
    y = softmax_channels(Tensor(rng.normal(size=(5, 6, 7)) * 3))
    np.testing.assert_allclose(y.data.sum(axis=0), 1.0, atol=1e-12)
    assert (y.data > 0).all()


def test_upsample_bilinear_x2_half_pixel_hand_case():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = upsample_bilinear_x2(x)
    expected = np.array([
        [1.0, 1.25, 1.75, 2.0],
        [1.5, 1.75, 2.25, 2.5],
        [2.5, 2.75, 3.25, 3.5],
        [3.0, 3.25, 3.75, 4.0],
    ])
    np.testing.assert_allclose(out.data[0], expected, atol=1e-12)


def test_downsample_avg_x2_matches_block_means():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6, 8))
    out = downsample_avg_x2(Tensor(x))
    expected = x.reshape(2, 3, 2, 4, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(out.data, expected, atol=1e-15)


def test_primitive_forward_dispatch_matches_direct_calls():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 4, 4)))
    w = Tensor(rng.normal(size=(3, 2, 1, 1)))
    np.testing.assert_array_equal(
        primitive_forward("conv2d_1x1", [x], w).data, conv2d_1x1(x, w).data)
    np.testing.assert_array_equal(
        primitive_forward("mul_scalar", [x], scalar=2.5).data,
        mul_scalar(x, 2.5).data)
    np.testing.assert_array_equal(
        primitive_forward("block_mean_pool", [x], grid=(2, 2)).data,
        block_mean_pool(x, (2, 2)).data)
    with pytest.raises(ShapeError, match="unknown primitive"):
        primitive_forward("transpose", [x])


def test_graph_records_nodes_and_mixing_graphs_fails():
    g1, g2 = Graph(), Graph()
    a = g1.leaf(np.ones((1, 2, 2)))
    b = g2.leaf(np.ones((1, 2, 2)))
    assert add(a, Tensor(np.ones((1, 2, 2)))).graph is g1
    with pytest.raises(GraphError, match="different graphs"):
        add(a, b)


def test_backward_mean_gradient_is_constant():
    g = Graph()
    x = g.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    grads = backward(mean_all(x))
    np.testing.assert_array_equal(grads[x.node].data, np.full((2, 2), 0.25))


def test_backward_silu_gradient_at_zero():
    g = Graph()
    x = g.leaf(np.zeros((2, 2)))
    grads = backward(mean_all(silu(x)))
    np.testing.assert_allclose(grads[x.node].data, np.full((2, 2), 0.5 / 4),
                               atol=1e-15)


def test_backward_rejects_non_scalar_and_off_graph():
    g = Graph()
    x = g.leaf(np.ones((2, 2)))
    with pytest.raises(GraphError, match="scalar"):
        backward(add(x, x))
    with pytest.raises(GraphError, match="not on a graph"):
        backward(Tensor(np.asarray(1.0)))


def test_identical_inputs_give_bit_identical_results():
    def build():
        rng = np.random.default_rng(11)
        g = Graph()
        x = g.leaf(rng.normal(size=(2, 4, 4)))
        w = g.leaf(rng.normal(size=(2, 2, 3, 3)))
        loss = mean_all(silu(conv2d_3x3_pad1(x, w)))
        return loss.item(), backward(loss)[x.node].data.copy()

    l1, g1 = build()
    l2, g2 = build()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_grad_check_quadratic():
    errs = grad_check(lambda p: sum_all(mul(p["x"], p["x"])),
                      {"x": np.random.default_rng(5).normal(size=(3, 3))})
    assert errs["x"] < 1e-7


def test_grad_check_constant_loss_is_exactly_zero():
    errs = grad_check(lambda p: mean_all(Tensor(np.ones((2, 2)))),
                      {"x": np.ones((2, 2))})
    assert errs["x"] == 0.0


def test_grad_check_rejects_non_finite_loss():
    with pytest.raises(FloatingPointError, match="non-finite"):
        grad_check(lambda p: mul_scalar(sum_all(p["x"]), np.inf),
                   {"x": np.ones((2, 2))})


def test_composite_of_primitives_matches_finite_differences():
    rng = np.random.default_rng(6)
    r = rng.normal(size=(2, 8, 8))

    def builder(p):
        y = conv2d_3x3_pad1(silu(conv2d_1x1(p["x"], p["w1"])), p["w2"])
        return mean_all(mul(softmax_channels(y), Tensor(r)))

    errs = grad_check(builder, {
        "x": rng.normal(size=(4, 8, 8)),
        "w1": rng.normal(size=(3, 4, 1, 1)),
        "w2": rng.normal(size=(2, 3, 3, 3)),
    }, seed=6)
    assert max(errs.values()) < 1e-5
