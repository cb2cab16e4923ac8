"""Blur-to-flow network: encoder, twin feature decoders, coarse-to-fine flow estimator.

Levels are numbered 1 (finest, H/2) to k (coarsest, H/2^k). Every predicted
flow is expressed in full-resolution pixel units regardless of its level.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor


class ConfigError(ValueError):
    pass


CONTEXT_DILATIONS = (1, 2, 4, 8, 16, 1, 1)
IDENTITY_THETA = np.array([1, 0, 0, 0, 1, 0], dtype=DTYPE)


@dataclass
class ModelConfig:
    levels: int = 6
    encoder_channels: tuple = (16, 32, 64, 96, 128, 160)
    use_stn: bool = True
    use_refining_block: bool = True
    corr_max_disp: int = 4
    dense_growth: int = 32
    dense_layers: int = 5
    stn_hidden: int = 16
    context_channels: tuple = (64, 64, 64, 48, 32, 16)
    flow_scale: float = 10.0  # flow heads emit flow / flow_scale

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.context_channels = tuple(int(c) for c in self.context_channels)
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if len(self.encoder_channels) != self.levels:
            raise ConfigError(
                f"encoder_channels needs {self.levels} entries, got {len(self.encoder_channels)}"
            )
        if self.corr_max_disp < 1:
            raise ConfigError("corr_max_disp must be >= 1")
        if len(self.context_channels) != len(CONTEXT_DILATIONS) - 1:
            raise ConfigError(f"context_channels needs {len(CONTEXT_DILATIONS) - 1} entries")
        if min(self.encoder_channels + self.context_channels) < 1 or self.dense_growth < 1:
            raise ConfigError("channel widths must be positive")
        if not self.flow_scale > 0:
            raise ConfigError(f"flow_scale must be positive, got {self.flow_scale}")

    @property
    def cost_channels(self) -> int:
        return (2 * self.corr_max_disp + 1) ** 2

    def channels(self, level: int) -> int:
        return self.encoder_channels[level - 1]

    def decoder_input_channels(self, level: int) -> int:
        c = self.channels(level)
        return 3 * c if level < self.levels else 2 * c

    def flow_input_channels(self, level: int) -> int:
        extra = 4 if level < self.levels else 0
        return self.cost_channels + self.channels(level) + extra

    def flow_feature_channels(self, level: int) -> int:
        return self.flow_input_channels(level) + self.dense_layers * self.dense_growth


@dataclass
class FeaturePyramid:
    features: list  # index 0 is level 1


@dataclass
class DecodedPyramidPair:
    first: list
    last: list


@dataclass
class FlowPyramid:
    flows: list  # index 0 is level 1
    refined: Tensor


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def bilinear_upsample_kernel(channels: int) -> np.ndarray:
    """(C, C, 4, 4) transposed-conv weight performing 2x bilinear upsampling per channel."""
    taps = np.array([0.25, 0.75, 0.75, 0.25], dtype=DTYPE)
    w = np.zeros((channels, channels, 4, 4), dtype=DTYPE)
    for c in range(channels):
        w[c, c] = np.outer(taps, taps)
    return w


class _ParamBuilder:
    def __init__(self, rng):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def add(self, name, data):
        t = Tensor(data, requires_grad=True, name=name)
        t.zero_grad()
        self.params[name] = t

    def conv(self, name, cin, cout, k=3, zero=False):
        shape = (cout, cin, k, k)
        w = np.zeros(shape, DTYPE) if zero else _kaiming(self.rng, shape, cin * k * k)
        self.add(f"{name}.weight", w)
        self.add(f"{name}.bias", np.zeros(cout, DTYPE))

    def deconv(self, name, cin, cout, weight=None):
        w = weight if weight is not None else _kaiming(self.rng, (cin, cout, 4, 4), cin * 4)
        self.add(f"{name}.weight", w)
        self.add(f"{name}.bias", np.zeros(cout, DTYPE))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Create every learnable tensor, keyed by a dotted name.

    Top-level prefixes partition the network: ``encoder``, ``decoder1``,
    ``decoder2``, ``flow`` and ``context``.
    """
    b = _ParamBuilder(np.random.default_rng(seed))
    k = cfg.levels
    cin = 3
    for lvl in range(1, k + 1):
        c = cfg.channels(lvl)
        b.conv(f"encoder.l{lvl}.conv1", cin, c)
        b.conv(f"encoder.l{lvl}.conv2", c, c)
        cin = c

    for dec in ("decoder1", "decoder2"):
        for lvl in range(k, 0, -1):
            c = cfg.channels(lvl)
            pre = f"{dec}.l{lvl}"
            if cfg.use_stn:
                b.conv(f"{pre}.stn.loc1", c, cfg.stn_hidden)
                b.conv(f"{pre}.stn.loc2", cfg.stn_hidden, cfg.stn_hidden)
                b.add(f"{pre}.stn.fc.weight", np.zeros((6, cfg.stn_hidden, 1, 1), DTYPE))
                b.add(f"{pre}.stn.fc.bias", IDENTITY_THETA.copy())
            if lvl < k:
                b.deconv(f"{pre}.up", cfg.channels(lvl + 1), c)
            width = cfg.decoder_input_channels(lvl)
            if cfg.use_refining_block:
                for i in range(cfg.dense_layers):
                    b.conv(f"{pre}.refine.dense{i}", width, cfg.dense_growth)
                    width += cfg.dense_growth
            b.conv(f"{pre}.refine.proj", width, c)

    for lvl in range(k, 0, -1):
        pre = f"flow.l{lvl}"
        if lvl < k:
            b.deconv(f"{pre}.upflow", 2, 2, weight=bilinear_upsample_kernel(2))
            b.deconv(f"{pre}.upfeat", cfg.flow_feature_channels(lvl + 1), 2)
        width = cfg.flow_input_channels(lvl)
        for i in range(cfg.dense_layers):
            b.conv(f"{pre}.dense{i}", width, cfg.dense_growth)
            width += cfg.dense_growth
        b.conv(f"{pre}.predict", width, 2)

    width = cfg.flow_feature_channels(1) + 2
    outs = cfg.context_channels + (2,)
    for i, cout in enumerate(outs):
        b.conv(f"context.conv{i}", width, cout, zero=(i == len(outs) - 1))
        width = cout
    return b.params


def count_params(params: dict[str, Tensor]) -> int:
    return int(np.sum([p.data.size for p in params.values()]))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _conv(x, params, name, stride=1, dilation=1):
    w = params[f"{name}.weight"]
    pad = dilation if w.shape[-1] == 3 else 0
    return ad.conv2d(x, w, params[f"{name}.bias"], stride=stride, dilation=dilation, padding=pad)


def _deconv(x, params, name):
    return ad.conv_transpose2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=2, padding=1)


def _dense_block(x, params, prefix, layers):
    feats = [x]
    for i in range(layers):
        inp = feats[0] if len(feats) == 1 else ad.concat_channels(feats)
        feats.append(ad.relu(_conv(inp, params, f"{prefix}.dense{i}")))
    return ad.concat_channels(feats)


def encode(image: Tensor, cfg: ModelConfig, params) -> FeaturePyramid:
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ConfigError(f"encode expects (N,3,H,W) input, got {image.shape}")
    check_divisible(image.shape[2], image.shape[3], cfg.levels)
    feats = []
    x = ad.add_const(image, -0.5)  # intensities in [0, 1] -> zero-centred
    for lvl in range(1, cfg.levels + 1):
        x = ad.relu(_conv(x, params, f"encoder.l{lvl}.conv1", stride=2))
        x = ad.relu(_conv(x, params, f"encoder.l{lvl}.conv2"))
        feats.append(x)
    return FeaturePyramid(feats)


def check_divisible(h: int, w: int, levels: int) -> None:
    m = 2 ** levels
    if h % m or w % m:
        raise ConfigError(
            f"image size {h}x{w} must be divisible by {m}; pad to "
            f"{-(-h // m) * m}x{-(-w // m) * m}"
        )


def stn_theta(feature: Tensor, params, prefix: str) -> Tensor:
    x = ad.relu(_conv(feature, params, f"{prefix}.loc1", stride=2))
    x = ad.relu(_conv(x, params, f"{prefix}.loc2", stride=2))
    x = _conv(ad.global_avg_pool(x), params, f"{prefix}.fc")
    return ad.reshape(x, (feature.shape[0], 2, 3))


def stn_transform(feature: Tensor, params, prefix: str) -> Tensor:
    """Resample ``feature`` with an affine transform predicted from itself."""
    theta = stn_theta(feature, params, prefix)
    grid = ad.affine_grid(theta, feature.shape[2], feature.shape[3])
    return ad.grid_sample(feature, grid)


def refine_decode(transformed: Tensor, encoded: Tensor, upsampled_prev: Optional[Tensor],
                  params, prefix: str, cfg: ModelConfig) -> Tensor:
    parts = [transformed, encoded]
    if upsampled_prev is not None:
        parts.append(upsampled_prev)
    x = ad.concat_channels(parts)
    if cfg.use_refining_block:
        x = _dense_block(x, params, f"{prefix}.refine", cfg.dense_layers)
    return ad.relu(_conv(x, params, f"{prefix}.refine.proj"))


def _decode_one(pyramid: FeaturePyramid, cfg, params, dec: str) -> list:
    out = [None] * cfg.levels
    prev = None
    for lvl in range(cfg.levels, 0, -1):
        enc = pyramid.features[lvl - 1]
        pre = f"{dec}.l{lvl}"
        transformed = stn_transform(enc, params, f"{pre}.stn") if cfg.use_stn else enc
        up = _deconv(prev, params, f"{pre}.up") if prev is not None else None
        prev = refine_decode(transformed, enc, up, params, pre, cfg)
        out[lvl - 1] = prev
    return out


def decode_features(pyramid: FeaturePyramid, cfg: ModelConfig, params) -> DecodedPyramidPair:
    return DecodedPyramidPair(
        first=_decode_one(pyramid, cfg, params, "decoder1"),
        last=_decode_one(pyramid, cfg, params, "decoder2"),
    )


def warp(feature: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``feature`` by ``flow`` given in this level's pixel units."""
    n, _, h, w = feature.shape
    if flow.shape != (n, 2, h, w):
        raise ad.ShapeError(f"warp: flow {flow.shape} does not match feature {feature.shape}")
    base = np.stack(np.meshgrid(ad.ops.normalized_coords(w), ad.ops.normalized_coords(h)), axis=0)
    to_norm = np.array([2.0 / w, 2.0 / h], dtype=DTYPE).reshape(1, 2, 1, 1)
    grid = ad.add_const(ad.scale(flow, to_norm), base[None])
    return ad.grid_sample(feature, grid)


def estimate_flow_level(v1: Tensor, v2: Tensor, prev_flow: Optional[Tensor],
                        prev_feat: Optional[Tensor], cfg: ModelConfig, params, level: int):
    """One coarse-to-fine step; returns (flow, flow_feature) at ``level``."""
    if v1.shape != v2.shape:
        raise ad.ShapeError(f"estimate_flow_level: {v1.shape} vs {v2.shape}")
    pre = f"flow.l{level}"
    parts = []
    if prev_flow is None:
        v2_warped = v2
    else:
        flow_up = _deconv(prev_flow, params, f"{pre}.upflow")
        feat_up = _deconv(prev_feat, params, f"{pre}.upfeat")
        v2_warped = warp(v2, ad.scale(flow_up, 1.0 / 2 ** level))
    cost = ad.relu(ad.correlation(v1, v2_warped, cfg.corr_max_disp))
    parts = [cost, v1]
    if prev_flow is not None:
        parts += [feat_up, flow_up]
    flow_feat = _dense_block(ad.concat_channels(parts), params, pre, cfg.dense_layers)
    flow = ad.scale(_conv(flow_feat, params, f"{pre}.predict"), cfg.flow_scale)
    return flow, flow_feat


def context_refine(flow: Tensor, flow_feat: Tensor, params, cfg: ModelConfig | None = None) -> Tensor:
    x = ad.concat_channels([flow_feat, flow])
    last = len(CONTEXT_DILATIONS) - 1
    for i, d in enumerate(CONTEXT_DILATIONS):
        x = _conv(x, params, f"context.conv{i}", dilation=d)
        if i < last:
            x = ad.relu(x)
    scale = cfg.flow_scale if cfg is not None else ModelConfig.flow_scale
    return ad.add(flow, ad.scale(x, scale))


def forward(image: Tensor, cfg: ModelConfig, params) -> FlowPyramid:
    pyramid = encode(image, cfg, params)
    decoded = decode_features(pyramid, cfg, params)
    flows = [None] * cfg.levels
    flow = feat = None
    for lvl in range(cfg.levels, 0, -1):
        flow, feat = estimate_flow_level(
            decoded.first[lvl - 1], decoded.last[lvl - 1], flow, feat, cfg, params, lvl
        )
        flows[lvl - 1] = flow
    refined = context_refine(flow, feat, params, cfg)
    return FlowPyramid(flows, refined)


def estimate_fullres(image: Tensor, cfg: ModelConfig, params) -> Tensor:
    """Refined flow bilinearly upsampled to the input size, shape (N,2,H,W)."""
    refined = forward(image, cfg, params).refined
    return ad.bilinear_resize(refined, image.shape[2], image.shape[3])
