"""Feature calibration blocks: region squeeze, channel squeeze, ReCal, SE, scSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from recalnet import ops
from recalnet.nn import Conv2d, ConvSpec, LayerNorm, Module, conv1x1
from recalnet.tensor import ConfigError, Tensor

POOL_KERNELS = (3, 5, 7)


@dataclass
class AttentionMaps:
    region: Tensor   # (N, 1, H, W), values in [0, 1]
    channel: Tensor  # (N, C, 1, 1), values >= 0


def _check_reduction(channels: int, r: int) -> None:
    if r < 1 or channels % r:
        raise ConfigError(f"reduction r={r} must divide channels C={channels}")


class RegionSqueeze(Module):
    """Single-channel region attention from a stride-1 pooling pyramid.

    Each pooled map (3x3, 5x5, 7x7) and the raw input go through their own
    1x1 C->1 conv; the four descriptors are fused by a 1x1 4->1 conv and
    squashed with a sigmoid.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.pooled = [conv1x1(channels, 1, rng) for _ in POOL_KERNELS]
        self.pixel = conv1x1(channels, 1, rng)
        self.fuse = conv1x1(len(POOL_KERNELS) + 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        descriptors = [conv(ops.avg_pool(x, k, stride=1)) for conv, k in zip(self.pooled, POOL_KERNELS)]
        descriptors.append(self.pixel(x))
        return ops.sigmoid(self.fuse(ops.channel_concat(descriptors)))


class ChannelSqueeze(Module):
    """Global pooling, C -> C/r -> C bottleneck, ReLU on both convs."""

    def __init__(self, channels: int, rng: np.random.Generator, r: int = 2):
        _check_reduction(channels, r)
        self.reduce = conv1x1(channels, channels // r, rng)
        self.expand = conv1x1(channels // r, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        z = ops.relu(self.reduce(ops.global_avg_pool(x)))
        return ops.relu(self.expand(z))


class ReCal(Module):
    """Joint region/channel calibration.

    The region- and channel-calibrated maps are layer-normalised, interleaved
    channel by channel (channel-calibrated first), and fused pairwise by a
    3x3 conv with C groups, so output channel p only sees input channel p's
    two calibrated versions.
    """

    def __init__(self, channels: int, rng: np.random.Generator, r: int = 2):
        if channels < 2:
            raise ConfigError(f"ReCal needs C >= 2, got {channels}")
        self.channels = channels
        self.res = RegionSqueeze(channels, rng)
        self.chs = ChannelSqueeze(channels, rng, r)
        self.norm_region = LayerNorm(channels)
        self.norm_channel = LayerNorm(channels)
        self.fuse = Conv2d(ConvSpec(2 * channels, channels, kernel=(3, 3), groups=channels,
                                    padding=(1, 1)), rng)

    def attention(self, x: Tensor) -> AttentionMaps:
        return AttentionMaps(region=self.res(x), channel=self.chs(x))

    def calibrated(self, x: Tensor) -> Tensor:
        """The interleaved (N, 2C, H, W) map that feeds the grouped fusion conv."""
        maps = self.attention(x)
        f_re = self.norm_region(ops.mul(x, maps.region))
        f_ch = self.norm_channel(ops.mul(x, maps.channel))
        return ops.interleave_channels(f_ch, f_re)

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(self.calibrated(x))


class SE(Module):
    def __init__(self, channels: int, rng: np.random.Generator, r: int = 2):
        _check_reduction(channels, r)
        self.reduce = conv1x1(channels, channels // r, rng)
        self.expand = conv1x1(channels // r, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        z = ops.relu(self.reduce(ops.global_avg_pool(x)))
        return ops.sigmoid(self.expand(z))

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))


class SCSE(Module):
    """SE channel gate and 1x1 spatial gate in parallel, merged by elementwise max."""

    def __init__(self, channels: int, rng: np.random.Generator, r: int = 2):
        self.cse = SE(channels, rng, r)
        self.spatial = conv1x1(channels, 1, rng)

    def channel_path(self, x: Tensor) -> Tensor:
        return self.cse(x)

    def spatial_path(self, x: Tensor) -> Tensor:
        return ops.mul(x, ops.sigmoid(self.spatial(x)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.maximum(self.channel_path(x), self.spatial_path(x))


def recal_weight_formula(channels: int) -> int:
    return channels * channels + 22 * channels + 4


CALIBRATORS = {"recal": ReCal, "se": SE, "scse": SCSE}
