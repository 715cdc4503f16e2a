import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mafnet import tensor as T
from mafnet.model import (
    ConvParams, EncoderConfig, FeaturePair, MmaParams, ModelConfig, ModelParams, describe,
    encoder_forward, init_params, map_tensors, mma_forward, model_forward, named_tensors,
    parameter_count, predicted_count,
)
from mafnet.tensor import DimensionError, Tensor


def _inputs(size, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    rgb = Tensor(rng.uniform(-1, 1, (3, size, size)).astype(dtype))
    th = Tensor(rng.uniform(-1, 1, (1, size, size)).astype(dtype))
    return rgb, th


@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig.toy()
    return cfg, init_params(cfg, seed=0)


def test_toy_shapes_64(toy):
    cfg, p = toy
    rgb, th = _inputs(64)
    with T.no_grad():
        pairs = encoder_forward(rgb, th, p, cfg)
        d = mma_forward(pairs, p)
    assert [pr.rgb.shape for pr in pairs] == [(1, 32, 8, 8), (1, 64, 4, 4), (1, 64, 2, 2)]
    assert all(pr.rgb.shape == pr.thermal.shape for pr in pairs)
    assert d.shape == (1, 1, 8, 8)
    assert (d.data >= 0).all()


def test_paper_scale_shapes_256():
    cfg = ModelConfig.paper()
    p = init_params(cfg, seed=0)
    rgb, th = _inputs(256)
    with T.no_grad():
        pairs = encoder_forward(rgb, th, p, cfg)
        d = mma_forward(pairs, p)
    assert [pr.rgb.shape[1:] for pr in pairs] == [(256, 32, 32), (512, 16, 16), (512, 8, 8)]
    assert d.shape == (1, 1, 32, 32)


@settings(max_examples=4, deadline=None)
@given(h=st.sampled_from([64, 128]), w=st.sampled_from([64, 128]))
def test_shape_contract_non_square(h, w):
    cfg = ModelConfig.toy()
    p = init_params(cfg, seed=1)
    rng = np.random.default_rng(h * w)
    rgb = Tensor(rng.uniform(-1, 1, (3, h, w)).astype(np.float32))
    th = Tensor(rng.uniform(-1, 1, (1, h, w)).astype(np.float32))
    with T.no_grad():
        d = model_forward(rgb, th, p, cfg)
    assert d.shape == (1, 1, h // 8, w // 8)
    assert (d.data >= 0).all()


@pytest.mark.parametrize("h,w", [(32, 64), (64, 96), (100, 64)])
def test_divisibility_error(toy, h, w):
    cfg, p = toy
    with pytest.raises(DimensionError):
        encoder_forward(Tensor(np.zeros((3, h, w))), Tensor(np.zeros((1, h, w))), p, cfg)


def test_modality_mismatch_error(toy):
    cfg, p = toy
    with pytest.raises(DimensionError):
        encoder_forward(Tensor(np.zeros((3, 64, 64))), Tensor(np.zeros((1, 128, 64))), p, cfg)
    with pytest.raises(DimensionError):
        encoder_forward(Tensor(np.zeros((3, 64, 64))), Tensor(np.zeros((3, 64, 64))), p, cfg)


def test_single_maf_module_touches_only_last_stage():
    cfg = ModelConfig(encoder=EncoderConfig(num_maf_modules=1, patch_sizes=(1,), maf_depths=(2,)))
    p = init_params(cfg, seed=0)
    assert cfg.encoder.maf_stages == (5,)
    rgb, th = _inputs(64)
    plain = dataclasses.replace(p, maf_modules=[])
    plain_cfg = ModelConfig(encoder=EncoderConfig(num_maf_modules=0, patch_sizes=(), maf_depths=()))
    with T.no_grad():
        fused = encoder_forward(rgb, th, p, cfg)
        raw = encoder_forward(rgb, th, plain, plain_cfg)
    for a, b in zip(fused[:2], raw[:2]):
        assert np.array_equal(a.rgb.data, b.rgb.data)
        assert np.array_equal(a.thermal.data, b.thermal.data)
    assert not np.array_equal(fused[2].rgb.data, raw[2].rgb.data)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(num_maf_modules=2, patch_sizes=(2,), maf_depths=(2, 2))
    with pytest.raises(ValueError):
        EncoderConfig(dim=10, num_heads=4)


def test_zero_thermal_forward(toy):
    cfg, p = toy
    rgb, _ = _inputs(64)
    with T.no_grad():
        d = model_forward(rgb, Tensor(np.zeros((1, 64, 64), np.float32)), p, cfg)
    assert np.isfinite(d.data).all()
    assert (d.data >= 0).all()


def test_zero_final_layer_gives_zero_count(toy):
    cfg, p = toy
    out = ConvParams(Tensor(np.zeros_like(p.mma.out.weight.data)), Tensor(np.zeros_like(p.mma.out.bias.data)))
    q = dataclasses.replace(p, mma=dataclasses.replace(p.mma, out=out))
    rgb, th = _inputs(64)
    with T.no_grad():
        d = model_forward(rgb, th, q, cfg)
    assert not d.data.any()
    assert predicted_count(d)[0] == 0.0


def test_negative_biases_saturate(toy):
    cfg, p = toy
    q = map_tensors(p, lambda t: Tensor(t.data.copy()))
    for name, t in named_tensors(q):
        if name.endswith("bias"):
            t.data[...] = -1e4
    rgb, th = _inputs(64)
    with T.no_grad():
        d = model_forward(rgb, th, q, cfg)
    assert not d.data.any()
    assert predicted_count(d)[0] == 0.0


def test_deterministic_forward():
    cfg = ModelConfig.toy()
    rgb, th = _inputs(64, seed=3)
    with T.no_grad():
        a = model_forward(rgb, th, init_params(cfg, seed=7), cfg)
        b = model_forward(rgb, th, init_params(cfg, seed=7), cfg)
        c = model_forward(rgb, th, init_params(cfg, seed=8), cfg)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.tobytes() != c.data.tobytes()


def test_batched_forward_matches_single(toy):
    cfg, p = toy
    r0, t0 = _inputs(64, seed=0)
    r1, t1 = _inputs(64, seed=1)
    with T.no_grad():
        both = model_forward(Tensor(np.stack([r0.data, r1.data])), Tensor(np.stack([t0.data, t1.data])), p, cfg)
        one = model_forward(r1, t1, p, cfg)
    np.testing.assert_allclose(both.data[1], one.data[0], rtol=1e-5, atol=1e-7)
    assert predicted_count(both).shape == (2,)


def test_describe_stable():
    a, b = describe(ModelConfig.toy()), describe(ModelConfig.toy())
    assert a == b
    assert a["total_parameters"] == 865841
    assert a["total_parameters"] == parameter_count(init_params(ModelConfig.toy(), seed=5))
    assert sum(a["group_parameters"].values()) == a["total_parameters"]
    assert a["parameters"]["mma.out.weight"] == [1, 32, 1, 1]


def test_preset_lookup():
    assert ModelConfig.preset("toy") == ModelConfig.toy()
    assert ModelConfig.preset("paper").backbone.stage_channels == (64, 128, 256, 512, 512)
    assert ModelConfig.from_dict(ModelConfig.paper().to_dict()) == ModelConfig.paper()
    with pytest.raises(ValueError):
        ModelConfig.preset("huge")


def _conv(cin, cout, k, weight=None, bias=None):
    w = np.zeros((cout, cin, k, k)) if weight is None else np.asarray(weight, float)
    b = np.zeros(cout) if bias is None else np.asarray(bias, float)
    return ConvParams(Tensor(w), Tensor(b))


def _delta(cout, cin, gains):
    w = np.zeros((cout, cin, 3, 3))
    for (o, i), g in gains.items():
        w[o, i, 1, 1] = g
    return w


def test_mma_plumbing_hand_built():
    # M=1, one channel per modality; coarse projections are zeroed so only the
    # finest scale reaches the trunk, and every 3x3 kernel is a centre tap
    rng = np.random.default_rng(0)
    fine_r, fine_t = rng.uniform(0, 1, (2, 1, 1, 4, 4))
    pairs = [
        FeaturePair(Tensor(fine_r), Tensor(fine_t)),
        FeaturePair(Tensor(rng.uniform(0, 1, (1, 1, 2, 2))), Tensor(rng.uniform(0, 1, (1, 1, 2, 2)))),
        FeaturePair(Tensor(rng.uniform(0, 1, (1, 1, 1, 1))), Tensor(rng.uniform(0, 1, (1, 1, 1, 1)))),
    ]
    skip_b = [0.5, -1.0, 2.0]
    fuse_w = [0.3, 1.5, -0.2]
    head = MmaParams(
        proj=[_conv(2, 1, 3, _delta(1, 2, {(0, 0): 1.0, (0, 1): 2.0})), _conv(2, 1, 3), _conv(2, 1, 3)],
        dilated=[_conv(1, 1, 3, _delta(1, 1, {(0, 0): g})) for g in (1.0, 0.5, 2.0)],
        skip=_conv(1, 3, 1, bias=skip_b),
        fuse=_conv(3, 1, 3, _delta(1, 3, {(0, c): fuse_w[c] for c in range(3)}), bias=[0.1]),
        out=_conv(1, 1, 1, [[[[2.0]]]], [-0.4]),
    )
    p = ModelParams([], [], [], head)
    d = mma_forward(pairs, p).data[0, 0]

    expect = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            s = max(fine_r[0, 0, i, j] + 2.0 * fine_t[0, 0, i, j], 0.0)
            branch = [max(g * s, 0.0) + b for g, b in zip((1.0, 0.5, 2.0), skip_b)]
            fused = max(sum(w * v for w, v in zip(fuse_w, branch)) + 0.1, 0.0)
            expect[i, j] = max(2.0 * fused - 0.4, 0.0)
    np.testing.assert_allclose(d, expect, rtol=1e-12, atol=1e-12)


def test_mma_shape_contract_errors(toy):
    _, p = toy
    ok = [FeaturePair(Tensor(np.zeros((1, c, s, s))), Tensor(np.zeros((1, c, s, s))))
          for c, s in ((32, 8), (64, 4), (64, 2))]
    with pytest.raises(DimensionError):
        mma_forward(ok[:2], p)
    bad = list(ok)
    bad[1] = FeaturePair(Tensor(np.zeros((1, 64, 3, 3))), Tensor(np.zeros((1, 64, 3, 3))))
    with pytest.raises(DimensionError):
        mma_forward(bad, p)
    bad = list(ok)
    bad[0] = FeaturePair(Tensor(np.zeros((1, 32, 8, 8))), Tensor(np.zeros((1, 32, 4, 4))))
    with pytest.raises(DimensionError):
        mma_forward(bad, p)
