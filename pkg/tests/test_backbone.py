import numpy as np
import pytest

from awdvision.backbone import ModelConfig, build_model, head_param_count
from awdvision.engine import ops
from awdvision.errors import ConfigError

from helpers import numeric_grad_sampled, rel_err

MICRO = dict(stage_depths=(1, 1, 1, 1), stage_widths=(4, 4, 8, 8),
             attention_reduction=2, head_dims=(8, 4))


def micro_model(attention="cbam", seed=0, dtype=np.float64):
    return build_model(ModelConfig(attention=attention, **MICRO), seed, dtype)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_same_seed_bit_identical_parameters():
    a = build_model(ModelConfig.desk(), seed=7)
    b = build_model(ModelConfig.desk(), seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.name == pb.name
        assert pa.value.tobytes() == pb.value.tobytes()


def test_different_seed_differs():
    a = build_model(ModelConfig.desk(), seed=1)
    b = build_model(ModelConfig.desk(), seed=2)
    assert any(pa.value.tobytes() != pb.value.tobytes()
               for pa, pb in zip(a.parameters(), b.parameters()))


def test_parameter_names_unique():
    model = build_model(ModelConfig.desk(), seed=0)
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))


def test_desk_preset_stage_shapes_on_224():
    model = build_model(ModelConfig.desk(), seed=0)
    x = np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32)
    y = model.stem_norm.forward(model.stem_conv.forward(x, False), False)
    sizes = []
    for i in range(4):
        if i > 0:
            y = model.downsamples[i - 1].forward(y, False)
        for block in model.stages[i]:
            y = block.forward(y, False)
        sizes.append(y.shape[2:])
    assert sizes == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert y.shape[1] == 128


def test_head_param_count_closed_form():
    cfg = ModelConfig.desk()
    # independent arithmetic for the 128 -> 512/256/128/64/32 -> 1 stack
    want = (128 * 512 + 512 + 512 * 256 + 256 + 256 * 128 + 128
            + 128 * 64 + 64 + 64 * 32 + 32 + 32 * 1 + 1)
    assert head_param_count(cfg) == want
    model = build_model(cfg, seed=0)
    got = sum(p.value.size for p in model.parameters() if p.name.startswith("head."))
    assert got == want


def test_total_param_count_matches_formula_for_any_cfg():
    cfg = ModelConfig(stage_depths=(2, 1, 2, 1), stage_widths=(8, 16, 24, 32),
                      attention="none", head_dims=(16, 8))
    model = build_model(cfg, seed=3)
    dw, exp = 7, 4
    want = 0
    want += 8 * cfg.input_channels * 4 * 4  # stem conv
    want += 8 + 8  # stem norm
    widths = cfg.stage_widths
    for i, (d, w) in enumerate(zip(cfg.stage_depths, widths)):
        if i > 0:
            want += widths[i - 1] * 2 + widths[i - 1] * w * 2 * 2  # down: norm+conv
        per_block = (w * dw * dw) + 2 * w + (w * w * exp + w * exp) \
            + (w * exp * w + w)
        want += d * per_block
    dims = [widths[-1], 16, 8, 1]
    want += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    assert model.num_params() == want


def test_full_scale_preset_stage_compute_ratio():
    cfg = ModelConfig.full_scale()
    assert cfg.stage_depths == (3, 3, 9, 3)
    assert cfg.stage_widths == (96, 192, 384, 768)


def test_config_validation_names_violated_invariant():
    with pytest.raises(ConfigError, match="4 stage depths"):
        ModelConfig(stage_depths=(1, 1, 1))
    with pytest.raises(ConfigError, match="expansion"):
        ModelConfig(expansion=2)
    with pytest.raises(ConfigError, match="depthwise kernel"):
        ModelConfig(dw_kernel=5)
    with pytest.raises(ConfigError, match="attention"):
        ModelConfig(attention="transformer")
    with pytest.raises(ConfigError, match="stem"):
        ModelConfig(stem_kernel=3)


def test_config_round_trips_through_dict():
    cfg = ModelConfig.desk(attention="se")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# forward behavior
# ---------------------------------------------------------------------------

def test_forward_output_shape_and_finite():
    model = micro_model()
    x = np.random.default_rng(1).standard_normal((3, 3, 32, 32))
    y = model.forward(x, train=False)
    assert y.shape == (3, 1)
    assert np.all(np.isfinite(y))


def test_identical_rows_in_batch_give_identical_outputs():
    model = micro_model()
    one = np.random.default_rng(2).standard_normal((1, 3, 32, 32))
    x = np.concatenate([one, one], axis=0)
    y = model.forward(x, train=False)
    assert y[0, 0] == y[1, 0]


def test_wrong_input_dims_rejected():
    model = micro_model()
    with pytest.raises(ValueError, match="multiples of 32"):
        model.forward(np.zeros((1, 3, 48, 48)))
    with pytest.raises(ValueError, match="expected"):
        model.forward(np.zeros((1, 4, 32, 32)))


def test_zeroed_project_weights_make_blocks_identity():
    model = micro_model(attention="none")
    for stage in model.stages:
        for block in stage:
            block.project.w.value[:] = 0.0
            block.project.b.value[:] = 0.0
    x = np.random.default_rng(3).standard_normal((1, 3, 32, 32))
    y_blocks = model.forward(x, train=False)

    skipped = micro_model(attention="none")
    state = {p.name: p.value for p in model.parameters()}
    for p in skipped.parameters():
        p.value = state[p.name].copy()
    for stage in skipped.stages:
        stage.clear()  # no residual blocks at all
    y_skipped = skipped.forward(x, train=False)
    np.testing.assert_allclose(y_blocks, y_skipped, atol=1e-12)


def test_cbam_zero_params_quarter_scaling_composes():
    base = micro_model(attention="cbam", seed=5)
    for p in base.attention.params():
        p.value[:] = 0.0
    plain = micro_model(attention="none", seed=5)
    shared = {p.name: p.value for p in base.parameters()}
    for p in plain.parameters():
        p.value = shared[p.name].copy()

    x = np.random.default_rng(4).standard_normal((2, 3, 32, 32))
    got = base.forward(x, train=False)

    # replay: pre-attention features of the plain model, scaled by 0.25,
    # pushed through the same pooling and head
    y = plain.stem_norm.forward(plain.stem_conv.forward(x, False), False)
    for i in range(4):
        if i > 0:
            y = plain.downsamples[i - 1].forward(y, False)
        for block in plain.stages[i]:
            y = block.forward(y, False)
    feats = 0.25 * y
    pooled, _ = ops.global_avg_pool(feats)
    v = pooled.reshape(pooled.shape[0], pooled.shape[1])
    for layer in plain.head:
        v, _ = ops.relu(layer.forward(v, False))
    want = plain.out_layer.forward(v, False)
    np.testing.assert_allclose(got, want, atol=1e-10)
    assert not np.allclose(got, plain.forward(x, train=False))


def test_state_dict_round_trip_and_mismatch():
    model = micro_model(seed=11)
    state = {k: v.copy() for k, v in model.state_dict().items()}
    other = micro_model(seed=12)
    other.load_state(state)
    x = np.random.default_rng(5).standard_normal((1, 3, 32, 32))
    np.testing.assert_array_equal(model.forward(x, train=False),
                                  other.forward(x, train=False))
    bad = dict(state)
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError, match="missing"):
        other.load_state(bad)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("attention", ["none", "cbam", "se"])
def test_micro_model_end_to_end_gradients(attention):
    model = micro_model(attention=attention, seed=1)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 32, 32))
    w = rng.standard_normal((2, 1))

    model.zero_grad()
    y = model.forward(x, train=True)
    dx = model.backward(w)

    def loss_of_input(v):
        return float((model.forward(v, train=False) * w).sum())

    idxs = rng.choice(x.size, size=12, replace=False)
    num = numeric_grad_sampled(loss_of_input, x.copy(), idxs)
    assert rel_err(dx.reshape(-1)[idxs], num) < 1e-3

    for p in model.parameters()[:: max(1, len(model.parameters()) // 8)]:
        def loss_of_param(v, p=p):
            old = p.value
            p.value = v
            out = float((model.forward(x, train=False) * w).sum())
            p.value = old
            return out

        pidx = rng.choice(p.value.size, size=min(3, p.value.size), replace=False)
        num = numeric_grad_sampled(loss_of_param, p.value.copy(), pidx)
        assert rel_err(p.grad.reshape(-1)[pidx], num) < 1e-3, p.name
