"""Channel, spatial and receptive-field attention, fused into RFCBAMConv."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.module import BatchNorm2d, Conv2d, Linear, Module, Parameter
from .autodiff.tensor import ShapeError


@dataclass(frozen=True)
class ChannelAttentionConfig:
    channels: int
    reduction: int = 8

    @property
    def reduced(self) -> int:
        return max(1, self.channels // self.reduction)


@dataclass(frozen=True)
class RFCBAMConvConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    reduction: int = 8
    use_spatial: bool = False
    use_channel: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


class ChannelAttention(Module):
    """Per-channel weights in (0, 1) from avg- and max-pooled descriptors
    passed through one shared two-layer MLP."""

    def __init__(self, cfg: ChannelAttentionConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.fc1 = Linear(cfg.channels, cfg.reduced, rng=rng)
        self.fc2 = Linear(cfg.reduced, cfg.channels, rng=rng)

    def _mlp(self, z):
        return self.fc2(ops.relu(self.fc1(z)))

    def forward(self, x):
        n, c = x.shape[:2]
        if c != self.cfg.channels:
            raise ShapeError(f"channel attention built for {self.cfg.channels} channels, got {c}")
        avg = ops.reshape(ops.global_pool("avg", x), (n, c))
        mx = ops.reshape(ops.global_pool("max", x), (n, c))
        logits = ops.add(self._mlp(avg), self._mlp(mx))
        return ops.reshape(ops.sigmoid(logits), (n, c, 1, 1))


class SpatialAttention(Module):
    """Per-position weights from the channel-mean and channel-max maps."""

    def __init__(self, kernel: int = 7, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv = Conv2d(2, 1, kernel, padding=kernel // 2, bias=False, rng=rng)

    def forward(self, x):
        desc = ops.concat([ops.mean(x, axis=1, keepdims=True), ops.amax(x, axis=1, keepdims=True)], axis=1)
        return ops.sigmoid(self.conv(desc))


class ReceptiveFieldWeights(Module):
    """Softmax over the k*k slots of every receptive field.

    Slot s gets the logit ``sum_c W[s, c] * field[c, s] + b[s]``: a 1x1
    convolution with k*k groups over the slot-major unfolded neighbourhood.
    """

    def __init__(self, channels: int, kernel: int, rng=None):
        super().__init__()
        self.channels = channels
        self.kernel = kernel
        kk = kernel * kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(rng.standard_normal((kk, channels, 1, 1)) / np.sqrt(channels))
        self.bias = Parameter(np.zeros(kk))

    def from_columns(self, cols, out_hw):
        """``cols`` is N x (C*k*k) x L as produced by ``ops.unfold``."""
        n = cols.shape[0]
        kk = self.kernel * self.kernel
        ho, wo = out_hw
        fields = ops.reshape(cols, (n, self.channels, kk, ho, wo))
        slot_major = ops.reshape(ops.transpose(fields, (0, 2, 1, 3, 4)), (n, kk * self.channels, ho, wo))
        logits = ops.conv2d(slot_major, self.weight, self.bias, groups=kk)
        return ops.softmax(logits, axis=1)

    def forward(self, x, stride: int = 1):
        k = self.kernel
        if k % 2 == 0:
            raise ValueError("receptive-field kernel must be odd")
        cols = ops.unfold(x, k, stride, k // 2)
        h, w = x.shape[2:]
        return self.from_columns(cols, (_out(h, k, stride), _out(w, k, stride)))


def _out(n, k, stride):
    return (n + 2 * (k // 2) - k) // stride + 1


class RFCBAMConv(Module):
    """Receptive-field attention convolution with CBAM-style channel weights.

    Pipeline: channel-scale the input, unfold k x k fields at the block
    stride, reweight the k*k slots by their softmax weights, lay the weighted
    fields out as a (H'k) x (W'k) map and aggregate with a stride-k
    convolution, then batch norm and ReLU.
    """

    def __init__(self, cfg: RFCBAMConvConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c, k = cfg.in_channels, cfg.kernel
        self.channel = ChannelAttention(ChannelAttentionConfig(c, cfg.reduction), rng) if cfg.use_channel else None
        self.spatial = SpatialAttention(rng=rng) if cfg.use_spatial else None
        self.rf = ReceptiveFieldWeights(c, k, rng)
        self.aggregate = Conv2d(c, cfg.out_channels, k, stride=k, bias=False, rng=rng)
        self.bn = BatchNorm2d(cfg.out_channels)

    @staticmethod
    def expected_param_count(cfg: RFCBAMConvConfig) -> int:
        c, o, kk = cfg.in_channels, cfg.out_channels, cfg.kernel ** 2
        r = ChannelAttentionConfig(c, cfg.reduction).reduced
        total = kk * c + kk + o * c * kk + 2 * o
        if cfg.use_channel:
            total += c * r + r + r * c + c
        if cfg.use_spatial:
            total += 2 * 7 * 7
        return total

    def prenorm(self, x):
        cfg = self.cfg
        n, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ShapeError(f"RFCBAMConv expects {cfg.in_channels} channels, got {c}")
        k, s = cfg.kernel, cfg.stride
        ho, wo = _out(h, k, s), _out(w, k, s)
        cols = ops.unfold(x, k, s, k // 2)
        slot_w = self.rf.from_columns(cols, (ho, wo))
        if self.spatial is not None:
            scaled = ops.mul(x, self.channel(x)) if self.channel is not None else x
            scaled = ops.mul(scaled, self.spatial(scaled))
            fields = ops.reshape(ops.unfold(scaled, k, s, k // 2), (n, c, k * k, ho * wo))
        else:
            fields = ops.reshape(cols, (n, c, k * k, ho * wo))
            if self.channel is not None:
                fields = ops.mul(fields, ops.reshape(self.channel(x), (n, c, 1, 1)))
        weighted = ops.mul(fields, ops.reshape(slot_w, (n, 1, k * k, ho * wo)))
        grid = ops.reshape(weighted, (n, c, k, k, ho, wo))
        grid = ops.reshape(ops.transpose(grid, (0, 1, 4, 2, 5, 3)), (n, c, ho * k, wo * k))
        return self.aggregate(grid)

    def forward(self, x):
        return ops.relu(self.bn(self.prenorm(x)))
