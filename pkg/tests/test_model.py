import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vslowfast.autodiff import Tensor, ops
from vslowfast.autodiff.tensor import ShapeError
from vslowfast.model import FAST_FIRST, ConfigError, ModelConfig, VSlowFast, avga, localization_map

MICRO = ModelConfig(category_count=3, vision_channels=(2, 3, 4), slow_layers=5, fast_layers=4,
                    slow_alpha=2, fast_alpha=1, unet_channels=(2, 3), image_size=16)


def _inputs(rng, cfg=MICRO, b=2, h=16, w=32):
    return rng.random((b, h, w)), rng.random((b, 3, cfg.image_size, cfg.image_size))


def _randomize_heads(model, rng):
    for net in (model.slow, model.fast):
        if net is not None:
            net.head.weight.data[...] = rng.normal(size=net.head.weight.shape)
            net.head.bias.data[...] = rng.normal(size=net.head.bias.shape)


# ---------------------------------------------------------------- avga

def test_avga_unit_vector_selects_channel(rng):
    f = rng.normal(size=(4, 3, 5))
    e = np.zeros(4)
    e[1] = 1.0
    out = avga(Tensor(e), Tensor(f)).data
    np.testing.assert_array_equal(out[1], f[1])
    assert not out[[0, 2, 3]].any()
    assert not avga(Tensor(np.zeros((1, 4))), Tensor(f)).data.any()


def test_avga_loop_oracle(rng):
    e, f = rng.normal(size=3), rng.normal(size=(3, 4, 5))
    ref = np.zeros_like(f)
    for i in range(3):
        for j in range(3):
            ref[i] += e[i] * e[j] * f[j]
    assert np.max(np.abs(avga(Tensor(e), Tensor(f)).data - ref)) < 1e-12


def test_avga_channel_mismatch():
    with pytest.raises(ShapeError):
        avga(Tensor(np.ones(3)), Tensor(np.ones((4, 2, 2))))
    with pytest.raises(ShapeError):
        avga(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4, 2, 2))))


@given(seed=st.integers(0, 2**31), c=st.integers(1, 6), h=st.integers(1, 5), w=st.integers(1, 5),
       scale=st.floats(-4, 4))
def test_avga_shape_and_bilinearity(seed, c, h, w, scale):
    r = np.random.default_rng(seed)
    e, f = r.normal(size=c), r.normal(size=(c, h, w))
    base = avga(Tensor(e), Tensor(f)).data
    assert base.shape == f.shape
    np.testing.assert_allclose(avga(Tensor(scale * e), Tensor(f)).data, scale ** 2 * base,
                               atol=1e-10 * max(1.0, scale ** 2))


# ---------------------------------------------------------------- localization

def test_localization_map_examples(rng):
    e = rng.normal(size=3)
    grid, pooled = localization_map(e, np.broadcast_to(e[:, None, None], (3, 2, 4)).copy())
    np.testing.assert_allclose(grid, 1 / (1 + np.exp(-e @ e)))
    grid, pooled = localization_map(np.zeros(3), rng.normal(size=(3, 2, 2)))
    np.testing.assert_array_equal(grid, 0.5)
    assert pooled == 0.5


def test_localization_map_loop_oracle(rng):
    e, f = rng.normal(size=4), rng.normal(size=(4, 3, 5))
    grid, pooled = localization_map(e, f)
    ref = np.empty((3, 5))
    for y in range(3):
        for x in range(5):
            ref[y, x] = 1 / (1 + np.exp(-sum(e[c] * f[c, y, x] for c in range(4))))
    assert np.max(np.abs(grid - ref)) < 1e-12
    assert pooled == ref.max()
    with pytest.raises(ShapeError):
        localization_map(np.ones(3), np.ones((4, 2, 2)))


# ---------------------------------------------------------------- vision

def test_vision_shapes_and_embedding_is_mean(rng):
    model = VSlowFast(MICRO)
    vf = model.vision_forward(rng.random((2, 3, 16, 16)))
    assert vf.fmap.shape == (2, 3, 1, 1)
    cfg = MICRO.replace(image_size=32)
    vf = VSlowFast(cfg).vision_forward(rng.random((2, 3, 32, 32)))
    assert vf.fmap.shape == (2, 3, 2, 2)
    ref = np.array([[np.mean([vf.fmap.data[b, c, y, x] for y in range(2) for x in range(2)])
                     for c in range(3)] for b in range(2)])
    assert np.max(np.abs(vf.embedding.data - ref)) < 1e-12


def test_vision_zero_head_gives_zero_embedding():
    model = VSlowFast(MICRO)
    model.vision.head.weight.data[...] = 0
    model.vision.head.bias.data[...] = 0
    assert not model.vision_forward(np.zeros((1, 3, 16, 16))).embedding.data.any()


def test_vision_rejects_bad_images():
    model = VSlowFast(MICRO)
    with pytest.raises(ShapeError):
        model.vision_forward(np.zeros((1, 1, 16, 16)))
    with pytest.raises(ShapeError):
        model.vision_forward(np.zeros((1, 3, 32, 32)))


# ---------------------------------------------------------------- streams

def test_zero_heads_give_half_masks(rng):
    slow, fast, _ = VSlowFast(MICRO).eval()(*_inputs(rng))
    assert np.all(slow.mask.data == 0.5) and np.all(fast.mask.data == 0.5)


def test_slow_logits_repeat_alpha_times(rng):
    model = VSlowFast(MICRO, zero_head=False).eval()
    mag, img = _inputs(rng)
    slow, fast, _ = model(mag, img)
    assert slow.logits_low.shape == (2, 1, 16, 16)
    assert slow.logits_full.shape == (2, 1, 16, 32)
    np.testing.assert_array_equal(slow.logits_full.data[..., ::2], slow.logits_full.data[..., 1::2])
    assert fast.logits_low.shape == (2, 1, 16, 32)


def test_alpha_one_is_full_resolution(rng):
    cfg = MICRO.replace(fast_layers=0, slow_alpha=1)
    slow, fast, _ = VSlowFast(cfg, zero_head=False).eval()(*_inputs(rng, cfg))
    assert fast is None and slow.logits_low.shape == slow.logits_full.shape


def test_fast_residual_identity(rng):
    model = VSlowFast(MICRO, zero_head=False).eval()
    for p in model.fast.parameters():
        p.data[...] = 0.0
    mag, img = _inputs(rng)
    slow, fast, _ = model(mag, img)
    assert np.array_equal(fast.mask.data, slow.mask.data)


def test_fast_mask_is_sigmoid_of_residual_when_slow_is_zero(rng):
    model = VSlowFast(MICRO, zero_head=False).eval()
    for p in model.slow.parameters():
        p.data[...] = 0.0
    slow, fast, _ = model(*_inputs(rng))
    assert not slow.logits_full.data.any()
    np.testing.assert_array_equal(fast.mask.data, ops.sigmoid(fast.logits_low).data)


def test_fast_stream_matches_hand_composition(rng):
    model = VSlowFast(MICRO, zero_head=False).eval()
    _randomize_heads(model, rng)
    mag, img = _inputs(rng)
    slow, fast, vf = model(mag, img)
    x = Tensor(np.log1p(mag[:, None]))
    low = model.slow(ops.temporal_downsample(x, 2), vf.embedding)
    slow_logits = np.repeat(low.data, 2, axis=-1)
    slow_mask = 1 / (1 + np.exp(-slow_logits))
    sep = slow_mask * mag[:, None]
    fast_in = Tensor(np.concatenate([np.log1p(mag[:, None]), np.log1p(sep)], axis=1))
    resid = model.fast(fast_in, vf.embedding).data
    ref = 1 / (1 + np.exp(-(slow_logits + resid)))
    assert np.max(np.abs(fast.mask.data - ref)) < 1e-12


def test_mask_range_and_separated_bound(rng):
    model = VSlowFast(MICRO, zero_head=False).eval()
    _randomize_heads(model, rng)
    mag, img = _inputs(rng)
    for out in model(mag, img)[:2]:
        assert np.all((out.mask.data > 0) & (out.mask.data < 1))
        assert np.all(out.separated.data <= mag[:, None])


def test_fast_first_ordering(rng):
    cfg = MICRO.replace(ordering=FAST_FIRST)
    model = VSlowFast(cfg, zero_head=False).eval()
    assert model.fast.enc[0].weight.shape[1] == 1 and model.slow.enc[0].weight.shape[1] == 2
    slow, fast, _ = model(*_inputs(rng))
    assert model.final(slow, fast) is slow


def test_forward_is_deterministic(rng):
    mag, img = _inputs(rng)
    a = VSlowFast(MICRO, seed=3, zero_head=False).eval()(mag, img)
    b = VSlowFast(MICRO, seed=3, zero_head=False).eval()(mag, img)
    assert np.array_equal(a[1].mask.data, b[1].mask.data)


def test_input_shape_errors(rng):
    model = VSlowFast(MICRO)
    _, img = _inputs(rng)
    with pytest.raises(ShapeError):
        model(rng.random((2, 16, 24)), img)  # 24 not divisible by 16 * 2
    with pytest.raises(ShapeError):
        model(rng.random((2, 12, 32)), img)
    with pytest.raises(ShapeError):
        model(rng.random((3, 16, 32)), img)


def test_params_independent_of_alpha():
    base = sum(p.size for p in VSlowFast(MICRO).parameters())
    for s, f in [(4, 1), (8, 2), (16, 4)]:
        assert sum(p.size for p in VSlowFast(MICRO.replace(slow_alpha=s, fast_alpha=f)).parameters()) == base


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(slow_alpha=1, fast_alpha=1)
    with pytest.raises(ConfigError):
        ModelConfig(slow_alpha=1, fast_alpha=2, ordering=FAST_FIRST)
    with pytest.raises(ConfigError):
        ModelConfig(ordering="sideways")
    with pytest.raises(ConfigError):
        ModelConfig(image_size=40)
    with pytest.raises(ConfigError):
        ModelConfig(slow_layers=3)
    ModelConfig(fast_layers=0, slow_alpha=16)


def test_config_json_round_trip(tmp_path):
    MICRO.save(tmp_path / "m.json")
    assert ModelConfig.load(tmp_path / "m.json") == MICRO
    d = MICRO.to_dict()
    assert json.loads(json.dumps(d)) == d
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**d, "dropout": 0.1})
