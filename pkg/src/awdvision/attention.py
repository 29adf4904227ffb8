"""Channel, spatial, combined (CBAM-style) and squeeze-excitation attention.

Each block owns its parameters, caches activations during a training forward
pass, and hand-chains the backward pass, accumulating into parameter grads
and returning the input gradient. Channel gates have shape (N, C, 1, 1),
spatial gates (N, 1, H, W); both are sigmoid outputs, strictly inside (0, 1).
"""

import numpy as np

from awdvision.engine import Parameter, trunc_normal
from awdvision.engine import ops
from awdvision.errors import ConfigError

SPATIAL_KERNEL = 7  # fixed 7x7 per the architecture


def _init(rng, shape, dtype):
    return trunc_normal(rng, shape, std=0.02, dtype=dtype)


class ChannelAttention:
    """Per-channel gate from avg- and max-pooled descriptors.

    Both descriptors pass through one shared two-layer MLP (C -> C/r -> C,
    ReLU hidden, biases on both layers); the gate is the sigmoid of the sum
    of the two MLP outputs.
    """

    def __init__(self, channels, reduction=16, rng=None, dtype=np.float32,
                 prefix="attn.ca"):
        if channels % reduction != 0:
            raise ConfigError(
                f"channels {channels} not divisible by reduction {reduction}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.channels = channels
        self.w0 = Parameter(f"{prefix}.w0", _init(rng, (hidden, channels), dtype))
        self.b0 = Parameter(f"{prefix}.b0", np.zeros(hidden, dtype=dtype))
        self.w1 = Parameter(f"{prefix}.w1", _init(rng, (channels, hidden), dtype))
        self.b1 = Parameter(f"{prefix}.b1", np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.w0, self.b0, self.w1, self.b1]

    def _mlp(self, v):
        h, c1 = ops.dense(v, self.w0.value, self.b0.value)
        a, c2 = ops.relu(h)
        o, c3 = ops.dense(a, self.w1.value, self.b1.value)
        return o, (c1, c2, c3)

    def _mlp_backward(self, do, caches):
        c1, c2, c3 = caches
        da, dw1, db1 = ops.dense_backward(do, c3)
        dh = ops.relu_backward(da, c2)
        dv, dw0, db0 = ops.dense_backward(dh, c1)
        self.w1.grad += dw1
        self.b1.grad += db1
        self.w0.grad += dw0
        self.b0.grad += db0
        return dv

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise ValueError(
                f"channel attention built for C={self.channels}, got input {x.shape}")
        n, c = x.shape[0], x.shape[1]
        pa, ca = ops.global_avg_pool(x)
        pm, cm = ops.global_max_pool(x)
        oa, mlp_a = self._mlp(pa.reshape(n, c))
        om, mlp_m = self._mlp(pm.reshape(n, c))
        gate, cs = ops.sigmoid(oa + om)
        m = gate.reshape(n, c, 1, 1)
        if train:
            self._cache = (ca, cm, mlp_a, mlp_m, cs, x.shape)
        return m

    def backward(self, dm):
        ca, cm, mlp_a, mlp_m, cs, x_shape = self._cache
        n, c = x_shape[0], x_shape[1]
        ds = ops.sigmoid_backward(dm.reshape(n, c), cs)
        dpa = self._mlp_backward(ds, mlp_a).reshape(n, c, 1, 1)
        dpm = self._mlp_backward(ds, mlp_m).reshape(n, c, 1, 1)
        dx = ops.global_avg_pool_backward(dpa, ca)
        dx += ops.global_max_pool_backward(dpm, cm)
        return dx


class SpatialAttention:
    """Per-position gate: 7x7 conv (plus scalar bias) over the stacked
    channel-mean and channel-max maps, then sigmoid.

    ``pad_mode`` is "zeros" (training default) or "wrap" (circular padding,
    used to test translation equivariance).
    """

    def __init__(self, rng=None, dtype=np.float32, prefix="attn.sa",
                 pad_mode="zeros"):
        if pad_mode not in ("zeros", "wrap"):
            raise ConfigError(f"unknown pad_mode {pad_mode!r}")
        rng = rng or np.random.default_rng(0)
        k = SPATIAL_KERNEL
        self.w = Parameter(f"{prefix}.w", _init(rng, (1, 2, k, k), dtype))
        self.b = Parameter(f"{prefix}.b", np.zeros(1, dtype=dtype))
        self.pad_mode = pad_mode
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=True):
        pad = SPATIAL_KERNEL // 2
        cp, cc = ops.channel_pool(x)
        if self.pad_mode == "wrap":
            if x.shape[2] < pad or x.shape[3] < pad:
                raise ValueError(f"wrap padding needs H,W >= {pad}, got {x.shape}")
            cpp = np.pad(cp, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="wrap")
            z, cv = ops.conv2d(cpp, self.w.value, stride=1, padding=0)
        else:
            z, cv = ops.conv2d(cp, self.w.value, stride=1, padding=pad)
        z = z + self.b.value[0]
        m, cs = ops.sigmoid(z)
        if train:
            self._cache = (cc, cv, cs)
        return m

    def backward(self, dm):
        cc, cv, cs = self._cache
        dz = ops.sigmoid_backward(dm, cs)
        self.b.grad += dz.sum(dtype=dz.dtype, keepdims=False).reshape(1)
        dcp, dw = ops.conv2d_backward(dz, cv)
        self.w.grad += dw
        if self.pad_mode == "wrap":
            dcp = _fold_wrap(dcp, SPATIAL_KERNEL // 2)
        return ops.channel_pool_backward(dcp, cc)


def _fold_wrap(g, pad):
    """Fold gradients of a wrap-padded array back onto the core region."""
    rows = g[:, :, pad:-pad, :].copy()
    rows[:, :, -pad:, :] += g[:, :, :pad, :]
    rows[:, :, :pad, :] += g[:, :, -pad:, :]
    core = rows[:, :, :, pad:-pad].copy()
    core[:, :, :, -pad:] += rows[:, :, :, :pad]
    core[:, :, :, :pad] += rows[:, :, :, -pad:]
    return core


class CBAM:
    """Channel gate then spatial gate, applied sequentially to the features."""

    def __init__(self, channels, reduction=16, rng=None, dtype=np.float32,
                 prefix="attn"):
        rng = rng or np.random.default_rng(0)
        self.channel = ChannelAttention(channels, reduction, rng, dtype,
                                        prefix=f"{prefix}.ca")
        self.spatial = SpatialAttention(rng, dtype, prefix=f"{prefix}.sa")
        self._cache = None

    def params(self):
        return self.channel.params() + self.spatial.params()

    def forward(self, x, train=True):
        mc = self.channel.forward(x, train)
        x1, c1 = ops.multiply(x, mc)
        ms = self.spatial.forward(x1, train)
        x2, c2 = ops.multiply(x1, ms)
        if train:
            self._cache = (c1, c2)
        return x2

    def backward(self, dy):
        c1, c2 = self._cache
        dx1, dms = ops.multiply_backward(dy, c2)
        dx1 += self.spatial.backward(dms)
        dx, dmc = ops.multiply_backward(dx1, c1)
        dx += self.channel.backward(dmc)
        return dx


class SEBlock:
    """Squeeze-and-excitation: average-pool squeeze, bottleneck MLP
    (ReLU then sigmoid) and per-channel rescale. No max-pool path."""

    def __init__(self, channels, reduction=16, rng=None, dtype=np.float32,
                 prefix="attn.se"):
        if channels % reduction != 0:
            raise ConfigError(
                f"channels {channels} not divisible by reduction {reduction}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.channels = channels
        self.w0 = Parameter(f"{prefix}.w0", _init(rng, (hidden, channels), dtype))
        self.b0 = Parameter(f"{prefix}.b0", np.zeros(hidden, dtype=dtype))
        self.w1 = Parameter(f"{prefix}.w1", _init(rng, (channels, hidden), dtype))
        self.b1 = Parameter(f"{prefix}.b1", np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.w0, self.b0, self.w1, self.b1]

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise ValueError(
                f"SE block built for C={self.channels}, got input {x.shape}")
        n, c = x.shape[0], x.shape[1]
        p, cp = ops.global_avg_pool(x)
        h, c1 = ops.dense(p.reshape(n, c), self.w0.value, self.b0.value)
        a, c2 = ops.relu(h)
        o, c3 = ops.dense(a, self.w1.value, self.b1.value)
        g, cs = ops.sigmoid(o)
        gate = g.reshape(n, c, 1, 1)
        y, cm = ops.multiply(x, gate)
        if train:
            self._cache = (cp, c1, c2, c3, cs, cm, x.shape)
        return y

    def backward(self, dy):
        cp, c1, c2, c3, cs, cm, x_shape = self._cache
        n, c = x_shape[0], x_shape[1]
        dx, dgate = ops.multiply_backward(dy, cm)
        dg = ops.sigmoid_backward(dgate.reshape(n, c), cs)
        da, dw1, db1 = ops.dense_backward(dg, c3)
        dh = ops.relu_backward(da, c2)
        dp, dw0, db0 = ops.dense_backward(dh, c1)
        self.w1.grad += dw1
        self.b1.grad += db1
        self.w0.grad += dw0
        self.b0.grad += db0
        dx += ops.global_avg_pool_backward(dp.reshape(n, c, 1, 1), cp)
        return dx
