"""Convolutional block attention: channel gating followed by spatial gating.

The channel gate squeezes the feature map with global average and max
pooling, pushes both descriptors through one shared bottleneck MLP, sums
the branches, and applies a sigmoid:

    M_c = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))

The spatial gate stacks the channel-wise mean and max maps and convolves
them with a single odd-sized kernel:

    M_s = sigmoid(conv([mean_c(F); max_c(F)]))

Refinement is multiplicative and sequential, channel first:

    F' = M_c * F,   out = M_s(F') * F'

Both gates are strictly inside (0,1), so refinement never amplifies a
feature, and the whole block adds well under two percent of the default
detector's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import Conv2dParams, channel_max, channel_mean, conv2d, global_avg_pool_spatial, global_max_pool_spatial
from .tensor import (
    ShapeError,
    Tensor,
    add,
    matmul,
    mul_broadcast,
    relu,
    reshape,
    concat,
    sigmoid,
)

__all__ = [
    "CbamConfig",
    "CbamParams",
    "AttentionMaps",
    "init_cbam_params",
    "channel_attention",
    "spatial_attention",
    "cbam_forward",
    "attention_maps",
    "cbam_param_count",
]


@dataclass(frozen=True)
class CbamConfig:
    channels: int
    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.reduction_ratio < 1:
            raise ValueError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ValueError(f"spatial_kernel must be odd and positive, got {self.spatial_kernel}")

    @property
    def bottleneck(self) -> int:
        # clamped so heavy reduction on tiny maps still leaves one unit
        return max(1, self.channels // self.reduction_ratio)


@dataclass
class CbamParams:
    """Shared-MLP weights plus the spatial convolution."""

    mlp1_weight: Tensor  # [C, m]
    mlp1_bias: Tensor  # [m]
    mlp2_weight: Tensor  # [m, C]
    mlp2_bias: Tensor  # [C]
    spatial: Conv2dParams  # [1, 2, k, k] + bias [1]

    def tensors(self) -> list[Tensor]:
        return [
            self.mlp1_weight,
            self.mlp1_bias,
            self.mlp2_weight,
            self.mlp2_bias,
            *self.spatial.tensors(),
        ]


@dataclass(frozen=True)
class AttentionMaps:
    """The two gate tensors; construction checks the open-interval bound."""

    channel_map: Tensor  # [B,C,1,1]
    spatial_map: Tensor  # [B,1,H,W]

    def __post_init__(self):
        for name, t in (("channel_map", self.channel_map), ("spatial_map", self.spatial_map)):
            v = t.data
            if not ((v > 0.0).all() and (v < 1.0).all()):
                raise ValueError(f"{name} must lie strictly inside (0,1)")


def init_cbam_params(cfg: CbamConfig, rng: np.random.Generator) -> CbamParams:
    """Kaiming-style uniform weights, zero biases."""
    C, m, k = cfg.channels, cfg.bottleneck, cfg.spatial_kernel

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    zero = lambda shape: Tensor(np.zeros(shape), requires_grad=True)
    spatial = Conv2dParams(
        weight=uniform((1, 2, k, k), 2 * k * k),
        bias=zero((1,)),
        stride=1,
        padding=k // 2,
    )
    return CbamParams(
        mlp1_weight=uniform((C, m), C),
        mlp1_bias=zero((m,)),
        mlp2_weight=uniform((m, C), m),
        mlp2_bias=zero((C,)),
        spatial=spatial,
    )


def _shared_mlp(descriptor: Tensor, params: CbamParams) -> Tensor:
    hidden = relu(add(matmul(descriptor, params.mlp1_weight), params.mlp1_bias))
    return add(matmul(hidden, params.mlp2_weight), params.mlp2_bias)


def channel_attention(feat: Tensor, cfg: CbamConfig, params: CbamParams) -> Tensor:
    """Per-channel gate [B,C,1,1] from pooled descriptors through the MLP."""
    if feat.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {feat.shape}")
    B, C = feat.shape[:2]
    if C != cfg.channels:
        raise ShapeError(f"feature map has {C} channels but the block was built for {cfg.channels}")
    avg = reshape(global_avg_pool_spatial(feat), (B, C))
    mx = reshape(global_max_pool_spatial(feat), (B, C))
    logits = add(_shared_mlp(avg, params), _shared_mlp(mx, params))
    return reshape(sigmoid(logits), (B, C, 1, 1))


def spatial_attention(feat: Tensor, cfg: CbamConfig, params: CbamParams) -> Tensor:
    """Per-pixel gate [B,1,H,W] from stacked channel mean/max maps."""
    if feat.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {feat.shape}")
    stacked = concat([channel_mean(feat), channel_max(feat)], axis=1)
    return sigmoid(conv2d(stacked, params.spatial))


def cbam_forward(feat: Tensor, cfg: CbamConfig, params: CbamParams) -> Tensor:
    """Refine a feature map: channel gate, then spatial gate on the result."""
    refined = mul_broadcast(feat, channel_attention(feat, cfg, params))
    return mul_broadcast(refined, spatial_attention(refined, cfg, params))


def attention_maps(feat: Tensor, cfg: CbamConfig, params: CbamParams) -> AttentionMaps:
    """Both gates as produced during one refinement pass."""
    cmap = channel_attention(feat, cfg, params)
    refined = mul_broadcast(feat, cmap)
    return AttentionMaps(channel_map=cmap, spatial_map=spatial_attention(refined, cfg, params))


def cbam_param_count(params: CbamParams) -> int:
    return sum(t.size for t in params.tensors())
