"""Scaled-down ConvNeXt-style feature extractor with a regression head.

Layout: patchify stem (4x4 conv, stride 4, then channel layer norm), four
stages of residual blocks with 2x2 stride-2 downsampling between stages
(pre-norm), one optional attention block after the last stage, global
average pooling, and a ReLU dense head ending in a single linear output
(water height in cm).

Each block is depthwise 7x7 conv -> layer norm -> pointwise expand (4x) ->
GELU -> pointwise project -> residual add.
"""

from dataclasses import asdict, dataclass

import numpy as np

from awdvision.attention import CBAM, SEBlock
from awdvision.engine import Parameter, ops, trunc_normal
from awdvision.errors import ConfigError

LN_EPS = 1e-6
ATTENTION_KINDS = ("none", "cbam", "se")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; the checkpoint sidecar serializes it."""

    stage_depths: tuple = (1, 1, 3, 1)
    stage_widths: tuple = (16, 32, 64, 128)
    attention: str = "cbam"
    attention_reduction: int = 16
    head_dims: tuple = (512, 256, 128, 64, 32)
    input_channels: int = 3
    stem_kernel: int = 4
    stem_stride: int = 4
    expansion: int = 4
    dw_kernel: int = 7

    def __post_init__(self):
        if len(self.stage_depths) != 4:
            raise ConfigError(f"need exactly 4 stage depths, got {self.stage_depths}")
        if len(self.stage_widths) != 4:
            raise ConfigError(f"need exactly 4 stage widths, got {self.stage_widths}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage depths must be >= 1, got {self.stage_depths}")
        if any(w < 1 for w in self.stage_widths):
            raise ConfigError(f"stage widths must be >= 1, got {self.stage_widths}")
        if self.expansion != 4:
            raise ConfigError(f"bottleneck expansion is fixed at 4, got {self.expansion}")
        if self.dw_kernel != 7:
            raise ConfigError(f"depthwise kernel is fixed at 7, got {self.dw_kernel}")
        if (self.stem_kernel, self.stem_stride) != (4, 4):
            raise ConfigError(
                f"stem is fixed at 4x4 stride 4, got kernel {self.stem_kernel} "
                f"stride {self.stem_stride}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, "
                              f"got {self.attention!r}")
        if not self.head_dims or any(d < 1 for d in self.head_dims):
            raise ConfigError(f"bad head dims {self.head_dims}")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")

    @classmethod
    def desk(cls, attention="cbam", **kw):
        """CPU-trainable preset: depths 1:1:3:1, widths 16/32/64/128."""
        return cls(stage_depths=(1, 1, 3, 1), stage_widths=(16, 32, 64, 128),
                   attention=attention, **kw)

    @classmethod
    def full_scale(cls, attention="cbam", **kw):
        """Reference-scale preset: depths 3:3:9:3, base width 96."""
        return cls(stage_depths=(3, 3, 9, 3), stage_widths=(96, 192, 384, 768),
                   attention=attention, **kw)

    def to_dict(self):
        d = asdict(self)
        for k in ("stage_depths", "stage_widths", "head_dims"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("stage_depths", "stage_widths", "head_dims"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv(object):
    """Bias-free convolution (a layer norm always follows it here)."""

    def __init__(self, name, rng, in_ch, out_ch, k, stride, dtype):
        self.w = Parameter(f"{name}.w", trunc_normal(rng, (out_ch, in_ch, k, k),
                                                     dtype=dtype))
        self.stride = stride
        self._cache = None

    def params(self):
        return [self.w]

    def forward(self, x, train=True):
        y, cache = ops.conv2d(x, self.w.value, stride=self.stride, padding=0)
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dw = ops.conv2d_backward(dy, self._cache)
        self.w.grad += dw
        return dx


class LayerNorm(object):
    def __init__(self, name, channels, dtype):
        self.g = Parameter(f"{name}.g", np.ones(channels, dtype=dtype))
        self.b = Parameter(f"{name}.b", np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.g, self.b]

    def forward(self, x, train=True):
        y, cache = ops.layer_norm(x, self.g.value, self.b.value, LN_EPS)
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dg, db = ops.layer_norm_backward(dy, self._cache)
        self.g.grad += dg
        self.b.grad += db
        return dx


class Dense(object):
    def __init__(self, name, rng, in_dim, out_dim, dtype):
        self.w = Parameter(f"{name}.w", trunc_normal(rng, (out_dim, in_dim),
                                                     dtype=dtype))
        self.b = Parameter(f"{name}.b", np.zeros(out_dim, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=True):
        y, cache = ops.dense(x, self.w.value, self.b.value)
        if train:
            self._cache = cache
        return y

    def backward(self, dy):
        dx, dw, db = ops.dense_backward(dy, self._cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class ConvNeXtBlock(object):
    """Residual inverted-bottleneck block; input and output shapes match."""

    def __init__(self, name, rng, channels, expansion, dw_kernel, dtype):
        self.dw = Parameter(f"{name}.dw.w",
                            trunc_normal(rng, (channels, 1, dw_kernel, dw_kernel),
                                         dtype=dtype))
        self.norm = LayerNorm(f"{name}.norm", channels, dtype)
        self.expand = Dense(f"{name}.expand", rng, channels, channels * expansion,
                            dtype)
        self.project = Dense(f"{name}.project", rng, channels * expansion, channels,
                             dtype)
        self.pad = dw_kernel // 2
        self._cache = None

    def params(self):
        return ([self.dw] + self.norm.params() + self.expand.params()
                + self.project.params())

    def forward(self, x, train=True):
        y, dw_cache = ops.depthwise_conv2d(x, self.dw.value, padding=self.pad)
        y = self.norm.forward(y, train)
        n, c, h, w = y.shape
        flat = y.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        hidden = self.expand.forward(flat, train)
        act, gelu_cache = ops.gelu(hidden)
        out = self.project.forward(act, train)
        out = out.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if train:
            self._cache = (dw_cache, gelu_cache, (n, c, h, w))
        return out + x

    def backward(self, dy):
        dw_cache, gelu_cache, (n, c, h, w) = self._cache
        dflat = dy.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        dact = self.project.backward(dflat)
        dhidden = ops.gelu_backward(dact, gelu_cache)
        dnorm = self.expand.backward(dhidden).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dconv = self.norm.backward(np.ascontiguousarray(dnorm))
        dx, ddw = ops.depthwise_conv2d_backward(dconv, dw_cache)
        self.dw.grad += ddw
        return dx + dy


class Downsample(object):
    """Stage transition: layer norm then 2x2 stride-2 convolution."""

    def __init__(self, name, rng, in_ch, out_ch, dtype):
        self.norm = LayerNorm(f"{name}.norm", in_ch, dtype)
        self.conv = Conv(f"{name}.conv", rng, in_ch, out_ch, 2, 2, dtype)

    def params(self):
        return self.norm.params() + self.conv.params()

    def forward(self, x, train=True):
        return self.conv.forward(self.norm.forward(x, train), train)

    def backward(self, dy):
        return self.norm.backward(self.conv.backward(dy))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model(object):
    def __init__(self, cfg, seed, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)

        self.stem_conv = Conv("stem.conv", rng, cfg.input_channels,
                              cfg.stage_widths[0], cfg.stem_kernel,
                              cfg.stem_stride, dtype)
        self.stem_norm = LayerNorm("stem.norm", cfg.stage_widths[0], dtype)

        self.downsamples = []
        self.stages = []
        for i, (depth, width) in enumerate(zip(cfg.stage_depths, cfg.stage_widths)):
            if i > 0:
                self.downsamples.append(
                    Downsample(f"stages.{i}.down", rng, cfg.stage_widths[i - 1],
                               width, dtype))
            blocks = [ConvNeXtBlock(f"stages.{i}.blocks.{j}", rng, width,
                                    cfg.expansion, cfg.dw_kernel, dtype)
                      for j in range(depth)]
            self.stages.append(blocks)

        final_width = cfg.stage_widths[-1]
        if cfg.attention == "cbam":
            self.attention = CBAM(final_width, cfg.attention_reduction, rng, dtype)
        elif cfg.attention == "se":
            self.attention = SEBlock(final_width, cfg.attention_reduction, rng, dtype)
        else:
            self.attention = None

        self.head = []
        in_dim = final_width
        for k, out_dim in enumerate(cfg.head_dims):
            self.head.append(Dense(f"head.{k}", rng, in_dim, out_dim, dtype))
            in_dim = out_dim
        self.out_layer = Dense("head.out", rng, in_dim, 1, dtype)

        self._cache = None

    # -- parameters --------------------------------------------------------

    def parameters(self):
        out = self.stem_conv.params() + self.stem_norm.params()
        for i in range(4):
            if i > 0:
                out += self.downsamples[i - 1].params()
            for block in self.stages[i]:
                out += block.params()
        if self.attention is not None:
            out += self.attention.params()
        for layer in self.head:
            out += layer.params()
        out += self.out_layer.params()
        return out

    def num_params(self):
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {p.name: p.value for p in self.parameters()}

    def load_state(self, state):
        params = self.parameters()
        names = {p.name for p in params}
        missing = names - set(state)
        extra = set(state) - names
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for p in params:
            value = np.asarray(state[p.name], dtype=self.dtype)
            if value.shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {value.shape} != {p.value.shape}")
            p.value = np.ascontiguousarray(value)

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValueError(
                f"expected (N, {self.cfg.input_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32 or x.shape[2] < 32 or x.shape[3] < 32:
            raise ValueError(
                f"input spatial dims must be multiples of 32, got {x.shape}")

    def forward(self, x, train=True):
        """Predict water height (cm): (N, C, H, W) -> (N, 1)."""
        self._check_input(x)
        y = self.stem_norm.forward(self.stem_conv.forward(x, train), train)
        for i in range(4):
            if i > 0:
                y = self.downsamples[i - 1].forward(y, train)
            for block in self.stages[i]:
                y = block.forward(y, train)
        if self.attention is not None:
            y = self.attention.forward(y, train)
        pooled, pool_cache = ops.global_avg_pool(y)
        n, c = pooled.shape[0], pooled.shape[1]
        v = pooled.reshape(n, c)
        relu_caches = []
        for layer in self.head:
            v = layer.forward(v, train)
            v, rc = ops.relu(v)
            relu_caches.append(rc)
        out = self.out_layer.forward(v, train)
        if train:
            self._cache = (pool_cache, relu_caches, (n, c))
        return out

    def backward(self, dy):
        pool_cache, relu_caches, (n, c) = self._cache
        dv = self.out_layer.backward(dy)
        for layer, rc in zip(reversed(self.head), reversed(relu_caches)):
            dv = ops.relu_backward(dv, rc)
            dv = layer.backward(dv)
        dpool = dv.reshape(n, c, 1, 1)
        dfeat = ops.global_avg_pool_backward(dpool, pool_cache)
        if self.attention is not None:
            dfeat = self.attention.backward(dfeat)
        for i in range(3, -1, -1):
            for block in reversed(self.stages[i]):
                dfeat = block.backward(dfeat)
            if i > 0:
                dfeat = self.downsamples[i - 1].backward(dfeat)
        dfeat = self.stem_norm.backward(dfeat)
        return self.stem_conv.backward(dfeat)


def build_model(cfg, seed, dtype=np.float32):
    """Deterministically initialize a model from a config and a seed."""
    return Model(cfg, seed, dtype)


def head_param_count(cfg):
    """Closed-form parameter count of the dense head (weights + biases)."""
    dims = [cfg.stage_widths[-1]] + list(cfg.head_dims) + [1]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
