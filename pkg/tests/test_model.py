import numpy as np
import pytest

from b2f import autodiff as ad
from b2f import model as M
from b2f.autodiff.gradcheck import relative_error


@pytest.fixture(scope="module")
def tiny_cfg():
    return M.ModelConfig(levels=3, encoder_channels=(4, 6, 8), dense_growth=4, stn_hidden=4,
                         context_channels=(4, 4, 4, 4, 4, 4), corr_max_disp=2)


@pytest.fixture(scope="module")
def default_cfg():
    return M.ModelConfig()


def image(n=1, h=64, w=64, seed=0):
    return ad.Tensor(np.random.default_rng(seed).uniform(0, 1, size=(n, 3, h, w)))


def test_config_validation():
    with pytest.raises(M.ConfigError):
        M.ModelConfig(levels=1, encoder_channels=(4,))
    with pytest.raises(M.ConfigError):
        M.ModelConfig(levels=3, encoder_channels=(4, 4))
    with pytest.raises(M.ConfigError):
        M.ModelConfig(corr_max_disp=0)


def test_encode_pyramid_sizes(default_cfg):
    params = M.init_params(default_cfg, 0)
    pyr = M.encode(image(), default_cfg, params)
    assert [f.shape[2] for f in pyr.features] == [32, 16, 8, 4, 2, 1]
    assert [f.shape[1] for f in pyr.features] == list(default_cfg.encoder_channels)
    again = M.encode(image(), default_cfg, params)
    for a, b in zip(pyr.features, again.features):
        np.testing.assert_array_equal(a.data, b.data)


def test_encode_rejects_indivisible(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    with pytest.raises(M.ConfigError, match="divisible by 8"):
        M.encode(image(h=20, w=16), tiny_cfg, params)


def test_stn_identity_at_init(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    feat = ad.Tensor(np.random.default_rng(1).standard_normal((2, 4, 8, 8)))
    out = M.stn_transform(feat, params, "decoder1.l1.stn")
    np.testing.assert_allclose(out.data, feat.data, atol=1e-5)
    theta = M.stn_theta(feat, params, "decoder1.l1.stn").data
    np.testing.assert_array_equal(theta, np.tile([[1, 0, 0], [0, 1, 0]], (2, 1, 1)))


def test_stn_forced_identity_theta():
    feat = ad.Tensor(np.random.default_rng(2).standard_normal((1, 3, 6, 6)))
    theta = ad.Tensor(np.array([[[1, 0, 0], [0, 1, 0]]]))
    out = ad.grid_sample(feat, ad.affine_grid(theta, 6, 6))
    np.testing.assert_allclose(out.data, feat.data, atol=1e-5)


def test_stn_gradients_reach_feature_and_localization(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    # move the final layer off zero so gradients flow through the whole head
    rng = np.random.default_rng(3)
    params["decoder1.l1.stn.fc.weight"].data += 0.1 * rng.standard_normal((6, 4, 1, 1)).astype(np.float32)
    feat = ad.Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
    with ad.Tape() as tape:
        out = M.stn_transform(feat, params, "decoder1.l1.stn")
        loss = ad.sum(ad.mul(out, ad.Tensor(rng.standard_normal(out.shape))))
    ad.backward(loss, tape)
    assert np.abs(feat.grad).sum() > 0
    for name in ("loc1.weight", "loc2.weight", "fc.weight", "fc.bias"):
        assert np.abs(params[f"decoder1.l1.stn.{name}"].grad).sum() > 0, name


def test_refine_decode_shapes(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    rng = np.random.default_rng(0)
    enc = ad.Tensor(rng.standard_normal((1, 8, 2, 2)))
    out = M.refine_decode(enc, enc, None, params, "decoder1.l3", tiny_cfg)
    assert out.shape == enc.shape
    enc1 = ad.Tensor(rng.standard_normal((1, 4, 8, 8)))
    out = M.refine_decode(enc1, enc1, enc1, params, "decoder1.l1", tiny_cfg)
    assert out.shape == enc1.shape


def test_refine_without_rb_is_projection(tiny_cfg):
    from dataclasses import replace
    cfg = replace(tiny_cfg, use_refining_block=False)
    params = M.init_params(cfg, 0)
    assert not any(".refine.dense" in n for n in params)
    enc = ad.Tensor(np.random.default_rng(0).standard_normal((1, 8, 2, 2)))
    out = M.refine_decode(enc, enc, None, params, "decoder1.l3", cfg)
    w, b = params["decoder1.l3.refine.proj.weight"], params["decoder1.l3.refine.proj.bias"]
    expect = ad.relu(ad.conv2d(ad.concat_channels([enc, enc]), w, b, padding=1))
    np.testing.assert_array_equal(out.data, expect.data)


def test_decode_shapes_and_independence(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    pyr = M.encode(image(h=32, w=32), tiny_cfg, params)
    dec = M.decode_features(pyr, tiny_cfg, params)
    for lvl in range(3):
        assert dec.first[lvl].shape == pyr.features[lvl].shape
        assert dec.last[lvl].shape == pyr.features[lvl].shape
    for name, p in params.items():
        if name.startswith("decoder2."):
            p.data = p.data + 0.5
    dec2 = M.decode_features(pyr, tiny_cfg, params)
    for a, b in zip(dec.first, dec2.first):
        np.testing.assert_array_equal(a.data, b.data)
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(dec.last, dec2.last))


def test_decode_stn_identity_equals_no_stn(tiny_cfg):
    from dataclasses import replace
    params = M.init_params(tiny_cfg, 0)
    no_stn = replace(tiny_cfg, use_stn=False)
    pyr = M.encode(image(n=2, h=32, w=32), tiny_cfg, params)
    with_stn = M.decode_features(pyr, tiny_cfg, params)
    without = M.decode_features(pyr, no_stn, params)
    for a, b in zip(with_stn.first + with_stn.last, without.first + without.last):
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_both_flags_off_is_plain_projection(tiny_cfg):
    from dataclasses import replace
    cfg = replace(tiny_cfg, use_stn=False, use_refining_block=False)
    params = M.init_params(cfg, 0)
    dec_names = {n.split(".", 2)[2] for n in params if n.startswith("decoder1.")}
    assert all(n.startswith("refine.proj") or n.startswith("up.") for n in dec_names)


def test_warp_zero_flow_identity():
    feat = ad.Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 6)))
    out = M.warp(feat, ad.Tensor(np.zeros((2, 2, 5, 6))))
    np.testing.assert_allclose(out.data, feat.data, atol=1e-5)


def test_warp_shifts_ramp_by_one_pixel():
    ramp = np.tile(np.arange(5, dtype=np.float32), (5, 1))
    feat = ad.Tensor(ramp[None, None])
    flow = np.zeros((1, 2, 5, 5), dtype=np.float32)
    flow[:, 0] = 1.0
    out = M.warp(feat, ad.Tensor(flow)).data[0, 0]
    # output[y, x] = ramp[y, x + 1]; the last column samples outside -> 0
    expect = np.tile([1, 2, 3, 4, 0], (5, 1)).astype(np.float32)
    np.testing.assert_allclose(out, expect, atol=1e-5)


def test_warp_gradient_reaches_flow():
    rng = np.random.default_rng(0)
    feat = ad.Tensor(rng.standard_normal((1, 2, 6, 6)))
    flow = ad.Tensor(rng.uniform(-0.7, 0.7, (1, 2, 6, 6)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(M.warp(feat, flow))
    ad.backward(loss, tape)
    assert np.abs(flow.grad).sum() > 0


def test_flow_level_shapes(default_cfg):
    params = M.init_params(default_cfg, 0)
    rng = np.random.default_rng(0)
    v = ad.Tensor(rng.standard_normal((1, 160, 1, 1)))
    flow, feat = M.estimate_flow_level(v, v, None, None, default_cfg, params, 6)
    assert flow.shape == (1, 2, 1, 1)
    assert feat.shape[1] == 81 + 160 + 5 * 32
    assert np.abs(flow.data).max() < default_cfg.flow_scale
    v5 = ad.Tensor(rng.standard_normal((1, 128, 2, 2)))
    flow5, feat5 = M.estimate_flow_level(v5, v5, flow, feat, default_cfg, params, 5)
    assert flow5.shape == (1, 2, 2, 2)
    assert feat5.shape[1] == 81 + 128 + 4 + 5 * 32


def test_coarsest_level_flow_small_at_init(default_cfg):
    params = M.init_params(default_cfg, 0)
    pyr = M.encode(image(seed=5), default_cfg, params)
    dec = M.decode_features(pyr, default_cfg, params)
    v1 = dec.first[-1]
    flow, _ = M.estimate_flow_level(v1, v1, None, None, default_cfg, params, 6)
    assert np.abs(flow.data).max() < 1.0


def test_context_identity_at_init(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    rng = np.random.default_rng(0)
    flow = ad.Tensor(rng.standard_normal((1, 2, 8, 8)))
    feat = ad.Tensor(rng.standard_normal((1, tiny_cfg.flow_feature_channels(1), 8, 8)))
    out = M.context_refine(flow, feat, params)
    assert out.shape == flow.shape
    np.testing.assert_array_equal(out.data, flow.data)


def test_context_receptive_field():
    # each 3x3 layer with dilation d widens the field by 2d
    assert 1 + sum(2 * d for d in M.CONTEXT_DILATIONS) >= 65


def test_forward_sizes_and_batch_independence(default_cfg):
    params = M.init_params(default_cfg, 0)
    one = image(seed=3)
    out = M.forward(one, default_cfg, params)
    assert [f.shape[2:] for f in out.flows] == [(s, s) for s in (32, 16, 8, 4, 2, 1)]
    assert all(f.shape[1] == 2 for f in out.flows)
    assert out.refined.shape == (1, 2, 32, 32)
    two = M.forward(ad.Tensor(np.concatenate([one.data, one.data])), default_cfg, params)
    np.testing.assert_allclose(two.refined.data[0], two.refined.data[1], atol=1e-6)
    np.testing.assert_allclose(two.refined.data[0], out.refined.data[0], atol=1e-4)


def test_forward_is_bit_identical_across_calls(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    x = image(h=32, w=32, seed=9)
    a, b = M.forward(x, tiny_cfg, params), M.forward(x, tiny_cfg, params)
    for fa, fb in zip(a.flows + [a.refined], b.flows + [b.refined]):
        assert fa.data.tobytes() == fb.data.tobytes()


def perturb_all(params, seed=0, scale=0.05):
    """Break the zero/identity initialisations so every parameter gets a gradient."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = p.data + scale * rng.standard_normal(p.shape).astype(np.float32)


def test_every_parameter_gets_gradient(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    perturb_all(params)
    with ad.Tape() as tape:
        out = M.forward(image(n=2, h=32, w=32), tiny_cfg, params)
        loss = ad.mean(ad.endpoint_error(out.refined, ad.Tensor(np.ones(out.refined.shape))))
        for f in out.flows:
            loss = ad.add(loss, ad.mean(ad.endpoint_error(f, ad.Tensor(np.ones(f.shape)))))
    ad.backward(loss, tape)
    silent = [n for n, p in params.items() if not np.any(p.grad)]
    assert silent == []


def test_forward_backward_default_64(default_cfg):
    params = M.init_params(default_cfg, 0)
    perturb_all(params, scale=0.01)
    with ad.Tape() as tape:
        out = M.forward(image(h=64, w=64), default_cfg, params)
        loss = ad.mean(ad.endpoint_error(out.refined, ad.Tensor(np.ones(out.refined.shape))))
        for f in out.flows:
            loss = ad.add(loss, ad.mean(ad.endpoint_error(f, ad.Tensor(np.ones(f.shape)))))
    ad.backward(loss, tape)
    assert np.isfinite(loss.item())
    silent = [n for n, p in params.items() if not np.any(p.grad)]
    assert silent == []


def test_full_network_finite_differences(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    perturb_all(params, seed=1)
    x = image(n=1, h=16, w=16, seed=4)
    target = ad.Tensor(np.random.default_rng(2).standard_normal((1, 2, 8, 8)))

    def loss_value():
        out = M.forward(x, tiny_cfg, params)
        return ad.mean(ad.endpoint_error(out.refined, target))

    for p in params.values():
        p.zero_grad()
    with ad.Tape() as tape:
        loss = loss_value()
    ad.backward(loss, tape)
    base = loss.item()

    rng = np.random.default_rng(0)
    names = list(params)
    ana, num = [], []
    eps = 3e-3
    while len(ana) < 20:
        p = params[names[rng.integers(len(names))]]
        i = int(rng.integers(p.data.size))
        g = float(p.grad.reshape(-1)[i])
        if abs(g) < 1e-3:
            continue
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(flat[i]); plus = loss_value().item()
        flat[i] = orig - eps
        lo = float(flat[i]); minus = loss_value().item()
        flat[i] = orig
        # skip points whose stencil straddles a relu kink
        fwd = (plus - base) / (hi - float(orig))
        bwd = (base - minus) / (float(orig) - lo)
        if abs(fwd - bwd) > 0.02 * max(abs(fwd), abs(bwd)):
            continue
        ana.append(g)
        num.append((plus - minus) / (hi - lo))
    assert relative_error(np.array(ana), np.array(num)) < 1e-2


def test_parameter_partition(default_cfg):
    params = M.init_params(default_cfg, 0)
    groups = {"encoder", "decoder1", "decoder2", "flow", "context"}
    prefixes = {n.split(".")[0] for n in params}
    assert prefixes == groups
    assert len(params) == len(set(params))


def test_ablation_parameter_counts(default_cfg):
    from dataclasses import replace
    count = lambda **kw: M.count_params(M.init_params(replace(default_cfg, **kw), 0))
    full = count()
    assert full > count(use_stn=False)
    assert full > count(use_refining_block=False)
    assert count(use_refining_block=False) > count(use_stn=False, use_refining_block=False)


def test_estimate_fullres_size_and_values(tiny_cfg):
    params = M.init_params(tiny_cfg, 0)
    out = M.estimate_fullres(image(h=32, w=40), tiny_cfg, params)
    assert out.shape == (1, 2, 32, 40)
    const = ad.bilinear_resize(ad.Tensor(np.full((1, 2, 16, 20), 3.5)), 32, 40)
    np.testing.assert_allclose(const.data, 3.5, atol=1e-6)


def test_fullres_upsample_of_linear_ramp():
    # align_corners=False 2x upsampling of x -> output at o samples (o + 0.5)/2 - 0.5
    ramp = np.arange(4, dtype=np.float32)
    flow = ad.Tensor(np.broadcast_to(ramp, (1, 2, 4, 4)).copy())
    out = ad.bilinear_resize(flow, 8, 8).data[0, 0, 0]
    src = np.clip((np.arange(8) + 0.5) / 2 - 0.5, 0, 3)
    np.testing.assert_allclose(out, src, atol=1e-6)


def test_bilinear_upsample_kernel_matches_resize():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((1, 2, 5, 5)))
    w = ad.Tensor(M.bilinear_upsample_kernel(2))
    up = ad.conv_transpose2d(x, w, None, stride=2, padding=1).data
    ref = ad.bilinear_resize(x, 10, 10).data
    np.testing.assert_allclose(up[:, :, 1:-1, 1:-1], ref[:, :, 1:-1, 1:-1], atol=1e-5)
