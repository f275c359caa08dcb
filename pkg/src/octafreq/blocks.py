"""Building blocks of the enhancement network.

Each block mixes a spatial path (channel-covariance attention followed by a
depth-wise-conv feed-forward, no internal residuals) with a spectral path
(complex 3x3 filtering of the half-spectrum with a learnable skip scale).
The default variant splits the channels between the two paths and re-joins
them by concatenation under a block-level residual; the other variants exist
for ablation runs:

==================  ========================================================
``dual_branch_a``   x1 -> attention -> ffn ; x2 -> spectral ; concat ; + x
``cascade_b``       spectral(ffn(attention(x))) + x
``channel_fusion_c``  concat(spatial(x), spectral(x)) -> 1x1 conv -> + x
``add_fusion_d``    (spatial(x) + spectral(x)) -> 1x1 conv -> + x
``resblock``        conv3x3 -> relu -> conv3x3 -> + x   (plain baseline)
==================  ========================================================

During training, stochastic depth drops the whole non-residual branch with
probability ``drop_path`` and rescales kept branches by ``1/(1 - p)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .spectral import cadd, complex_conv2d, crelu, cscale, irfft2, rfft2
from .tensor import Parameter, Tensor

__all__ = [
    "VARIANTS",
    "BlockConfig",
    "AttentionParams",
    "FeedForwardParams",
    "SpectralFilterParams",
    "BlockParams",
    "make_block_params",
    "channel_attention",
    "conv_ffn",
    "spectral_filter",
    "apply_block",
]

VARIANTS = ("dual_branch_a", "cascade_b", "channel_fusion_c", "add_fusion_d",
            "resblock")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with samples beyond 2 std redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


@dataclass
class BlockConfig:
    channels: int
    heads: int = 1
    variant: str = "dual_branch_a"
    split: float = 0.5
    expansion: float = 2.66
    drop_path: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")
        if self.expansion <= 0:
            raise ConfigError(f"expansion must be positive, got {self.expansion}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.variant == "dual_branch_a":
            ca = self.attn_channels
            if ca < self.heads or self.channels - ca < 1:
                raise ConfigError(
                    f"split {self.split} of {self.channels} channels leaves "
                    f"{ca} for attention ({self.heads} heads) and "
                    f"{self.channels - ca} for the spectral path")
            if ca % self.heads:
                raise ConfigError(f"attention width {ca} not divisible by "
                                  f"{self.heads} heads")
        elif self.variant != "resblock" and self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by "
                              f"{self.heads} heads")

    @property
    def attn_channels(self) -> int:
        if self.variant == "dual_branch_a":
            return int(math.floor(self.split * self.channels))
        return self.channels


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    ln_gain: Parameter
    ln_shift: Parameter
    wq: Parameter
    wk: Parameter
    dwq: Parameter
    dwk: Parameter
    tau: Parameter


@dataclass
class FeedForwardParams:
    ln_gain: Parameter
    ln_shift: Parameter
    expand: Parameter
    expand_bias: Parameter
    dconv: Parameter
    reduce: Parameter
    reduce_bias: Parameter


@dataclass
class SpectralFilterParams:
    u1: Parameter
    v1: Parameter
    u2: Parameter
    v2: Parameter
    beta: Parameter


@dataclass
class BlockParams:
    attn: AttentionParams | None = None
    ffn: FeedForwardParams | None = None
    spec: SpectralFilterParams | None = None
    fuse: Parameter | None = None
    conv1: Parameter | None = None
    bias1: Parameter | None = None
    conv2: Parameter | None = None
    bias2: Parameter | None = None


def _make_attention(c: int, heads: int, rng) -> AttentionParams:
    d = c // heads
    return AttentionParams(
        ln_gain=Parameter(np.ones(c, np.float32), decay_exempt=True),
        ln_shift=Parameter(np.zeros(c, np.float32), decay_exempt=True),
        wq=Parameter(trunc_normal(rng, (1, 1, c, c))),
        wk=Parameter(trunc_normal(rng, (1, 1, c, c))),
        dwq=Parameter(trunc_normal(rng, (3, 3, 1, c))),
        dwk=Parameter(trunc_normal(rng, (3, 3, 1, c))),
        tau=Parameter(np.full((heads, 1, 1), math.sqrt(d), np.float32),
                      decay_exempt=True),
    )


def _make_ffn(c: int, expansion: float, rng) -> FeedForwardParams:
    hidden = math.ceil(expansion * c)
    return FeedForwardParams(
        ln_gain=Parameter(np.ones(c, np.float32), decay_exempt=True),
        ln_shift=Parameter(np.zeros(c, np.float32), decay_exempt=True),
        expand=Parameter(trunc_normal(rng, (1, 1, c, hidden))),
        expand_bias=Parameter(np.zeros(hidden, np.float32)),
        dconv=Parameter(trunc_normal(rng, (3, 3, 1, hidden))),
        reduce=Parameter(trunc_normal(rng, (1, 1, hidden, c))),
        reduce_bias=Parameter(np.zeros(c, np.float32)),
    )


def _make_spectral(c: int, rng) -> SpectralFilterParams:
    return SpectralFilterParams(
        u1=Parameter(trunc_normal(rng, (3, 3, c, c))),
        v1=Parameter(trunc_normal(rng, (3, 3, c, c))),
        u2=Parameter(trunc_normal(rng, (3, 3, c, c))),
        v2=Parameter(trunc_normal(rng, (3, 3, c, c))),
        beta=Parameter(np.asarray(1.0, np.float32), decay_exempt=True),
    )


def make_block_params(cfg: BlockConfig, rng: np.random.Generator) -> BlockParams:
    c = cfg.channels
    if cfg.variant == "resblock":
        return BlockParams(
            conv1=Parameter(trunc_normal(rng, (3, 3, c, c))),
            bias1=Parameter(np.zeros(c, np.float32)),
            conv2=Parameter(trunc_normal(rng, (3, 3, c, c))),
            bias2=Parameter(np.zeros(c, np.float32)),
        )
    ca = cfg.attn_channels
    params = BlockParams(
        attn=_make_attention(ca, cfg.heads, rng),
        ffn=_make_ffn(ca, cfg.expansion, rng),
        spec=_make_spectral(c - ca if cfg.variant == "dual_branch_a" else c, rng),
    )
    if cfg.variant == "channel_fusion_c":
        params.fuse = Parameter(trunc_normal(rng, (1, 1, 2 * c, c)))
    elif cfg.variant == "add_fusion_d":
        params.fuse = Parameter(trunc_normal(rng, (1, 1, c, c)))
    return params


# ---------------------------------------------------------------------------
# forward functions
# ---------------------------------------------------------------------------

def channel_attention(x: Tensor, p: AttentionParams, heads: int) -> Tensor:
    """Attention across channels: the h x d x d map softmax(K^T Q / tau)
    mixes the d channels of each head, so cost grows with channel count, not
    with the pixel count.  Queries/keys are bias-free 1x1 projections of the
    normalised input followed by 3x3 depth-wise convs; the raw input is the
    value operand."""
    H, W, C = x.shape
    d = C // heads
    y = T.layer_norm(x, p.ln_gain, p.ln_shift)
    q = T.conv2d(T.conv2d(y, p.wq), p.dwq, groups=C)
    k = T.conv2d(T.conv2d(y, p.wk), p.dwk, groups=C)

    def heads_first(t):
        return T.transpose(T.reshape(t, (H * W, heads, d)), (1, 0, 2))

    qh, kh, xh = heads_first(q), heads_first(k), heads_first(x)
    logits = T.matmul(T.transpose(kh, (0, 2, 1)), qh)          # (h, d, d)
    att = T.softmax_lastdim(T.mul(logits, T.reciprocal(p.tau)))
    out = T.matmul(xh, att)                                    # (h, HW, d)
    return T.reshape(T.transpose(out, (1, 0, 2)), (H, W, C))


def conv_ffn(x: Tensor, p: FeedForwardParams) -> Tensor:
    """1x1 expand -> 3x3 depth-wise -> GELU -> 1x1 reduce over the
    normalised input (expand/reduce biased, depth-wise bias-free)."""
    y = T.layer_norm(x, p.ln_gain, p.ln_shift)
    y = T.conv2d(y, p.expand, p.expand_bias)
    y = T.conv2d(y, p.dconv, groups=y.shape[-1])
    y = T.gelu(y)
    return T.conv2d(y, p.reduce, p.reduce_bias)


def spectral_filter(x: Tensor, p: SpectralFilterParams) -> Tensor:
    """Half-spectrum filtering: two complex 3x3 convs around a split ReLU,
    plus a beta-scaled skip of the raw spectrum, then inverse transform."""
    width = x.shape[1]
    F = rfft2(x)
    G = crelu(complex_conv2d(F, p.u1, p.v1))
    Y = cadd(complex_conv2d(G, p.u2, p.v2), cscale(F, p.beta))
    return irfft2(Y, width)


def _spatial_path(x: Tensor, cfg: BlockConfig, p: BlockParams) -> Tensor:
    return conv_ffn(channel_attention(x, p.attn, cfg.heads), p.ffn)


def apply_block(x: Tensor, cfg: BlockConfig, p: BlockParams, *,
                training: bool = False, rng: np.random.Generator | None = None,
                capture: dict | None = None) -> Tensor:
    """Run one block.  ``capture``, if given, receives the spectral path's
    input and output feature maps (numpy) under keys "before"/"after"."""
    if training and cfg.drop_path > 0.0:
        if rng is None:
            raise ConfigError("training with drop_path needs an RNG")
        if rng.random() < cfg.drop_path:
            return x
        keep_scale = 1.0 / (1.0 - cfg.drop_path)
    else:
        keep_scale = 1.0

    v = cfg.variant
    if v == "resblock":
        delta = T.conv2d(T.relu(T.conv2d(x, p.conv1, p.bias1)), p.conv2, p.bias2)
    elif v == "dual_branch_a":
        ca = cfg.attn_channels
        x1 = T.slice_axis(x, 0, ca)
        x2 = T.slice_axis(x, ca, cfg.channels)
        spec_out = spectral_filter(x2, p.spec)
        if capture is not None:
            capture["before"] = x2.data.copy()
            capture["after"] = spec_out.data.copy()
        delta = T.concat([_spatial_path(x1, cfg, p), spec_out], axis=-1)
    elif v == "cascade_b":
        mid = _spatial_path(x, cfg, p)
        delta = spectral_filter(mid, p.spec)
        if capture is not None:
            capture["before"] = mid.data.copy()
            capture["after"] = delta.data.copy()
    elif v == "channel_fusion_c":
        spec_out = spectral_filter(x, p.spec)
        if capture is not None:
            capture["before"] = x.data.copy()
            capture["after"] = spec_out.data.copy()
        delta = T.conv2d(T.concat([_spatial_path(x, cfg, p), spec_out], axis=-1),
                         p.fuse)
    elif v == "add_fusion_d":
        spec_out = spectral_filter(x, p.spec)
        if capture is not None:
            capture["before"] = x.data.copy()
            capture["after"] = spec_out.data.copy()
        delta = T.conv2d(T.add(_spatial_path(x, cfg, p), spec_out), p.fuse)
    else:  # pragma: no cover - guarded by BlockConfig
        raise ConfigError(f"unhandled variant {v!r}")

    if keep_scale != 1.0:
        delta = T.scale(delta, keep_scale)
    return T.add(x, delta)
