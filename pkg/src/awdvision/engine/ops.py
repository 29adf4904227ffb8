"""Differentiable array kernels: forward/backward pairs on numpy arrays.

Conventions
-----------
- activations: (N, C, H, W); dense inputs: (N, F); dense weights: (O, F)
- conv kernels: (O, I, KH, KW); depthwise kernels: (C, 1, KH, KW)
- forwards return ``(y, cache)``; the matching ``*_backward(dy, cache)``
  returns gradients in input order
- all kernels are dtype-preserving (float32 for training, float64 for
  gradient checking) and never write into their inputs
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _shape_error(op, detail):
    return ValueError(f"{op}: {detail}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride):
    """Gather conv windows of padded input into a (N*OH*OW, I*KH*KW) matrix."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    _, _, oh, ow, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _dilate(y, stride):
    """Insert stride-1 zeros between spatial elements (transposed-conv helper)."""
    if stride == 1:
        return y
    n, c, h, w = y.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=y.dtype)
    out[:, :, ::stride, ::stride] = y
    return out


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlate NCHW input with an OIHW kernel.

    Output spatial dims are ``floor((H + 2p - KH) / s) + 1`` per axis.
    Padding is zero-fill.
    """
    n, ci, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ci != ck:
        raise _shape_error(
            "conv2d", f"input channels {x.shape} do not match kernel {kernel.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise _shape_error(
            "conv2d", f"kernel {kernel.shape} larger than padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    y = cols @ kernel.reshape(o, -1).T
    y = y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    cache = (cols, x.shape, kernel, stride, padding)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    """Gradients of conv2d w.r.t. input and kernel."""
    cols, x_shape, kernel, stride, padding = cache
    n, ci, h, w = x_shape
    o, _, kh, kw = kernel.shape
    _, _, oh, ow = dy.shape

    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    dk = (dy_mat.T @ cols).reshape(kernel.shape)

    # input gradient as a transposed convolution: dilate dy by the stride,
    # full-correlate with the flipped kernel (O and I axes swapped), then
    # crop the forward padding off the result
    dyd = _dilate(dy, stride)
    kflip = np.flip(kernel, axis=(2, 3)).transpose(1, 0, 2, 3)
    dyp = np.pad(dyd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    cols2, gh, gw = _im2col(np.ascontiguousarray(dyp), kh, kw, 1)
    full = (cols2 @ kflip.reshape(ci, -1).T).reshape(n, gh, gw, ci).transpose(0, 3, 1, 2)
    # trailing rows/cols never covered by a window (when (H+2p-KH) % s != 0)
    # stay at zero gradient
    dxp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=dy.dtype)
    dxp[:, :, :gh, :gw] = full
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dx), dk


def depthwise_conv2d(x, kernel, padding=0):
    """Per-channel spatial convolution (stride 1, no channel mixing).

    Kernel is (C, 1, KH, KW); with padding = KH // 2 the spatial size is
    preserved for odd kernels.
    """
    n, c, h, w = x.shape
    ck, one, kh, kw = kernel.shape
    if ck != c or one != 1:
        raise _shape_error(
            "depthwise_conv2d",
            f"kernel {kernel.shape} does not match input channels {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    y = np.einsum("nchwkl,ckl->nchw", win, kernel[:, 0], optimize=True)
    cache = (x, xp, kernel, padding)
    return np.ascontiguousarray(y), cache


def depthwise_conv2d_backward(dy, cache):
    x, xp, kernel, padding = cache
    _, _, kh, kw = kernel.shape
    n, c, h, w = x.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dk = np.einsum("nchwkl,nchw->ckl", win, dy, optimize=True)[:, None]

    grow, gcol = kh - 1 - padding, kw - 1 - padding
    dyp = np.pad(dy, ((0, 0), (0, 0), (max(grow, 0), max(grow, 0)),
                      (max(gcol, 0), max(gcol, 0))))
    if grow < 0:
        dyp = dyp[:, :, -grow:grow, :]
    if gcol < 0:
        dyp = dyp[:, :, :, -gcol:gcol]
    wflip = np.flip(kernel[:, 0], axis=(1, 2))
    dwin = sliding_window_view(dyp, (kh, kw), axis=(2, 3))
    dx = np.einsum("nchwkl,ckl->nchw", dwin, wflip, optimize=True)
    return np.ascontiguousarray(dx), dk


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x, weight, bias):
    """Affine map: (N, F) @ (O, F)^T + (O,)."""
    if x.shape[1] != weight.shape[1]:
        raise _shape_error(
            "dense", f"input {x.shape} does not match weight {weight.shape}")
    y = x @ weight.T + bias
    return y, (x, weight)


def dense_backward(dy, cache):
    x, weight = cache
    dx = dy @ weight
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dy, cache):
    return dy * (cache > 0)


def gelu(x):
    """Exact (erf-based) Gaussian error linear unit."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2)), x


def gelu_backward(dy, cache):
    x = cache
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (cdf + x * pdf)


def sigmoid(x):
    # split by sign for overflow-free evaluation
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep saturated values inside the open interval (0, 1)
    one = out.dtype.type(1)
    zero = out.dtype.type(0)
    np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)
    return out, out


def sigmoid_backward(dy, cache):
    s = cache
    return dy * s * (1.0 - s)


def identity(x):
    """Linear activation of the regression output."""
    return x, None


def identity_backward(dy, cache):
    return dy


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def global_avg_pool(x):
    """Mean over H, W: (N, C, H, W) -> (N, C, 1, 1)."""
    y = x.mean(axis=(2, 3), keepdims=True)
    return y, x.shape


def global_avg_pool_backward(dy, cache):
    n, c, h, w = cache
    return np.broadcast_to(dy / (h * w), cache).copy()


def global_max_pool(x):
    """Max over H, W; backward routes to the first argmax in scan order."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    y = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)
    return y, (x.shape, idx)


def global_max_pool_backward(dy, cache):
    shape, idx = cache
    n, c, h, w = shape
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    np.put_along_axis(dx, idx[:, :, None], dy.reshape(n, c, 1), axis=2)
    return dx.reshape(shape)


def channel_pool(x):
    """Stack per-position channel mean and channel max: (N, C, H, W) -> (N, 2, H, W)."""
    avg = x.mean(axis=1)
    idx = x.argmax(axis=1)
    mx = np.take_along_axis(x, idx[:, None], axis=1)[:, 0]
    y = np.stack([avg, mx], axis=1)
    return y, (x.shape, idx)


def channel_pool_backward(dy, cache):
    shape, idx = cache
    n, c, h, w = shape
    dx = np.broadcast_to(dy[:, 0:1] / c, shape).copy()
    dmax = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dmax, idx[:, None], dy[:, 1:2], axis=1)
    return dx + dmax


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the channel axis per spatial position (NCHW).

    gamma and beta are per-channel (C,) affine parameters.
    """
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    c = xhat.shape[1]
    dxhat = dy * gamma[None, :, None, None]
    dx = (inv_std / c) * (
        c * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# broadcast arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    """Sum a gradient back down to the original (broadcast) operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, f"shapes {a.shape} and {b.shape} do not broadcast")
    if shape != a.shape:
        raise _shape_error(
            op, f"second operand {b.shape} must broadcast to first {a.shape}")


def add(a, b):
    """Elementwise sum, b broadcastable to a."""
    _check_broadcast("add", a, b)
    return a + b, (a.shape, b.shape)


def add_backward(dy, cache):
    a_shape, b_shape = cache
    return _unbroadcast(dy, a_shape), _unbroadcast(dy, b_shape)


def multiply(a, b):
    """Elementwise product, b broadcastable to a (attention recalibration)."""
    _check_broadcast("multiply", a, b)
    return a * b, (a, b)


def multiply_backward(dy, cache):
    a, b = cache
    da = _unbroadcast(dy * b, a.shape)
    db = _unbroadcast(dy * a, b.shape)
    return da, db
