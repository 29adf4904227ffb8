import numpy as np
import pytest

from awdvision.engine import ops

from helpers import numeric_grad, rel_err

GRAD_TOL = 1e-4


def weighted_sum(y, w):
    return float((y * w).sum())


def check_grads(forward, backward, inputs, wrt, n_outputs_like=None, seed=0):
    """FD-check the gradient of sum(w * forward(inputs)) w.r.t. inputs[wrt]."""
    rng = np.random.default_rng(seed)
    y, cache = forward(*inputs)
    w = rng.standard_normal(y.shape)
    grads = backward(w, cache)
    if not isinstance(grads, tuple):
        grads = (grads,)
    for idx in wrt:
        def f(x, idx=idx):
            args = list(inputs)
            args[idx] = x
            out, _ = forward(*args)
            return weighted_sum(out, w)

        num = numeric_grad(f, inputs[idx].copy())
        assert rel_err(grads[idx], num) < GRAD_TOL, f"arg {idx}"


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    k = np.ones((1, 1, 1, 1))
    y, _ = ops.conv2d(x, k, stride=1, padding=0)
    np.testing.assert_array_equal(y, x)


def test_conv2d_averaging_constant():
    c = 3.7
    x = np.full((1, 1, 4, 4), c)
    k = np.full((1, 1, 2, 2), 0.25)
    y, _ = ops.conv2d(x, k, stride=2, padding=0)
    assert y.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(y, c)


def test_conv2d_output_shape_formula():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 11, 9))
    k = rng.standard_normal((5, 3, 3, 3))
    for stride, pad in [(1, 0), (2, 1), (3, 2), (2, 0)]:
        y, _ = ops.conv2d(x, k, stride=stride, padding=pad)
        oh = (11 + 2 * pad - 3) // stride + 1
        ow = (9 + 2 * pad - 3) // stride + 1
        assert y.shape == (2, 5, oh, ow)


def test_conv2d_shape_mismatch_names_both_shapes():
    x = np.zeros((1, 2, 5, 5))
    k = np.zeros((3, 4, 3, 3))
    with pytest.raises(ValueError, match=r"1, 2, 5, 5.*3, 4, 3, 3"):
        ops.conv2d(x, k)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    check_grads(lambda a, b: ops.conv2d(a, b, 1, 0), ops.conv2d_backward,
                [x, k], wrt=[0, 1], seed=seed)


@pytest.mark.parametrize("stride,pad", [(2, 1), (2, 0), (3, 1)])
def test_conv2d_gradients_strided(stride, pad):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 7, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    check_grads(lambda a, b: ops.conv2d(a, b, stride, pad), ops.conv2d_backward,
                [x, k], wrt=[0, 1])


# ---------------------------------------------------------------------------
# depthwise conv
# ---------------------------------------------------------------------------

def test_depthwise_identity_kernel():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 5, 5))
    k = np.zeros((3, 1, 3, 3))
    k[:, 0, 1, 1] = 1.0
    y, _ = ops.depthwise_conv2d(x, k, padding=1)
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_depthwise_no_cross_channel_mixing():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 6))
    x[:, 1] = 0.0
    k = rng.standard_normal((2, 1, 3, 3))
    y, _ = ops.depthwise_conv2d(x, k, padding=1)
    np.testing.assert_array_equal(y[:, 1], np.zeros((1, 6, 6)))
    assert np.abs(y[:, 0]).max() > 0


def test_depthwise_channel_mismatch():
    with pytest.raises(ValueError, match="depthwise"):
        ops.depthwise_conv2d(np.zeros((1, 3, 5, 5)), np.zeros((2, 1, 3, 3)), padding=1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_depthwise_gradients(seed):
    rng = np.random.default_rng(seed + 10)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((3, 1, 3, 3))
    check_grads(lambda a, b: ops.depthwise_conv2d(a, b, 1),
                ops.depthwise_conv2d_backward, [x, k], wrt=[0, 1], seed=seed)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def test_dense_identity_weight():
    x = np.random.default_rng(4).standard_normal((3, 4))
    y, _ = ops.dense(x, np.eye(4), np.zeros(4))
    np.testing.assert_allclose(y, x)


def test_dense_zero_weight_gives_bias():
    b = np.array([1.0, -2.0])
    y, _ = ops.dense(np.ones((3, 5)), np.zeros((2, 5)), b)
    np.testing.assert_array_equal(y, np.tile(b, (3, 1)))


def test_dense_dim_mismatch():
    with pytest.raises(ValueError, match="dense"):
        ops.dense(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed + 20)
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    check_grads(ops.dense, ops.dense_backward, [x, w, b], wrt=[0, 1, 2], seed=seed)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_relu_values():
    y, _ = ops.relu(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 2.0])


def test_sigmoid_at_zero():
    y, _ = ops.sigmoid(np.array([0.0]))
    assert y[0] == 0.5


def test_sigmoid_range_open_interval():
    y, _ = ops.sigmoid(np.array([-500.0, -30.0, 30.0, 500.0]))
    assert np.all(y > 0) and np.all(y < 1)


def test_identity_is_linear_activation():
    x = np.random.default_rng(0).standard_normal(7)
    y, _ = ops.identity(x)
    np.testing.assert_array_equal(y, x)


def test_gelu_gradient_matches_finite_differences():
    x = np.array([-2.3, -0.7, -0.01, 0.4, 1.9, 3.2])
    _, cache = ops.gelu(x)
    analytic = ops.gelu_backward(np.ones_like(x), cache)
    numeric = numeric_grad(lambda v: float(ops.gelu(v)[0].sum()), x.copy())
    assert rel_err(analytic, numeric) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_activation_gradients(seed):
    rng = np.random.default_rng(seed + 30)
    # keep relu inputs away from the kink
    x = rng.standard_normal((3, 4)) + np.sign(rng.standard_normal((3, 4))) * 0.1
    check_grads(ops.relu, ops.relu_backward, [x], wrt=[0], seed=seed)
    check_grads(ops.gelu, ops.gelu_backward, [x], wrt=[0], seed=seed)
    check_grads(ops.sigmoid, ops.sigmoid_backward, [x], wrt=[0], seed=seed)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_pools_constant_map():
    x = np.full((2, 3, 4, 5), 0.8)
    avg, _ = ops.global_avg_pool(x)
    mx, _ = ops.global_max_pool(x)
    np.testing.assert_allclose(avg, 0.8)
    np.testing.assert_allclose(mx, 0.8)
    assert avg.shape == mx.shape == (2, 3, 1, 1)


def test_pools_small_fixture():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    avg, _ = ops.global_avg_pool(x)
    mx, _ = ops.global_max_pool(x)
    assert avg[0, 0, 0, 0] == 2.5
    assert mx[0, 0, 0, 0] == 4.0


def test_max_pool_backward_first_argmax_in_scan_order():
    x = np.array([[1.0, 5.0], [5.0, 0.0]]).reshape(1, 1, 2, 2)
    _, cache = ops.global_max_pool(x)
    dx = ops.global_max_pool_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx.reshape(2, 2), [[0.0, 1.0], [0.0, 0.0]])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_avg_pool_gradients(seed):
    rng = np.random.default_rng(seed + 40)
    x = rng.standard_normal((2, 3, 4, 5))
    check_grads(ops.global_avg_pool, ops.global_avg_pool_backward, [x], wrt=[0],
                seed=seed)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_max_pool_gradients(seed):
    rng = np.random.default_rng(seed + 50)
    x = rng.standard_normal((2, 3, 4, 5))
    check_grads(ops.global_max_pool, ops.global_max_pool_backward, [x], wrt=[0],
                seed=seed)


def test_channel_pool_single_channel():
    x = np.random.default_rng(5).standard_normal((1, 1, 3, 3))
    y, _ = ops.channel_pool(x)
    np.testing.assert_allclose(y[:, 0], x[:, 0])
    np.testing.assert_allclose(y[:, 1], x[:, 0])


def test_channel_pool_zero_one_maps():
    x = np.stack([np.zeros((4, 4)), np.ones((4, 4))])[None]
    y, _ = ops.channel_pool(x)
    np.testing.assert_allclose(y[0, 0], 0.5)
    np.testing.assert_allclose(y[0, 1], 1.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_channel_pool_gradients(seed):
    rng = np.random.default_rng(seed + 60)
    x = rng.standard_normal((2, 4, 3, 3))
    check_grads(ops.channel_pool, ops.channel_pool_backward, [x], wrt=[0], seed=seed)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_already_normalized_input():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 8, 3, 3))
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    y, _ = ops.layer_norm(x, np.ones(8), np.zeros(8), eps=1e-6)
    np.testing.assert_allclose(y, x, atol=1e-5)


def test_layer_norm_constant_input_gives_beta():
    beta = np.array([0.3, -0.4, 0.1])
    x = np.full((1, 3, 2, 2), 7.0)
    y, _ = ops.layer_norm(x, np.ones(3), beta, eps=1e-6)
    np.testing.assert_allclose(y, np.broadcast_to(beta[None, :, None, None], y.shape),
                               atol=1e-9)


def test_layer_norm_per_position_statistics():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 16, 4, 4))
    y, _ = ops.layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-7)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed + 70)
    x = rng.standard_normal((2, 5, 3, 2))
    g = rng.standard_normal(5)
    b = rng.standard_normal(5)
    check_grads(lambda a, p, q: ops.layer_norm(a, p, q, 1e-6),
                ops.layer_norm_backward, [x, g, b], wrt=[0, 1, 2], seed=seed)


# ---------------------------------------------------------------------------
# broadcast arithmetic
# ---------------------------------------------------------------------------

def test_multiply_by_ones_is_identity():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4, 4))
    y, _ = ops.multiply(x, np.ones((2, 3, 1, 1)))
    np.testing.assert_array_equal(y, x)


def test_multiply_by_zeros():
    x = np.random.default_rng(9).standard_normal((2, 3, 4, 4))
    y, _ = ops.multiply(x, np.zeros((2, 1, 4, 4)))
    np.testing.assert_array_equal(y, np.zeros_like(x))


def test_non_broadcastable_rejected():
    with pytest.raises(ValueError, match="broadcast"):
        ops.add(np.zeros((2, 3, 4, 4)), np.zeros((2, 2, 1, 1)))
    with pytest.raises(ValueError, match="broadcast"):
        ops.multiply(np.zeros((2, 3, 1, 1)), np.zeros((2, 3, 4, 4)))


@pytest.mark.parametrize("bshape", [(2, 3, 1, 1), (2, 1, 4, 5), (1,)])
def test_broadcast_gradients(bshape):
    rng = np.random.default_rng(11)
    a = rng.standard_normal((2, 3, 4, 5))
    b = rng.standard_normal(bshape)
    check_grads(ops.add, ops.add_backward, [a, b], wrt=[0, 1])
    check_grads(ops.multiply, ops.multiply_backward, [a, b], wrt=[0, 1])


# ---------------------------------------------------------------------------
# module-level invariants
# ---------------------------------------------------------------------------

def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    y1, _ = ops.conv2d(x, k, 2, 1)
    y2, _ = ops.conv2d(x.copy(), k.copy(), 2, 1)
    assert y1.tobytes() == y2.tobytes()


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    xc, kc = x.copy(), k.copy()
    y, cache = ops.conv2d(x, k, 1, 1)
    ops.conv2d_backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(x, xc)
    np.testing.assert_array_equal(k, kc)

    g, b = rng.standard_normal(3), rng.standard_normal(3)
    gc, bc = g.copy(), b.copy()
    y, cache = ops.layer_norm(x, g, b)
    ops.layer_norm_backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(x, xc)
    np.testing.assert_array_equal(g, gc)
    np.testing.assert_array_equal(b, bc)


def test_composition_matches_chained_backwards():
    """Backward of dense-then-gelu equals the chain of both backwards."""
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)

    def fused(xv):
        h, _ = ops.dense(xv, w, b)
        y, _ = ops.gelu(h)
        return float(y.sum())

    h, dcache = ops.dense(x, w, b)
    y, gcache = ops.gelu(h)
    dh = ops.gelu_backward(np.ones_like(y), gcache)
    dx, _, _ = ops.dense_backward(dh, dcache)
    numeric = numeric_grad(fused, x.copy())
    assert rel_err(dx, numeric) < GRAD_TOL
