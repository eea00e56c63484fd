"""Association module: windowed multi-head attention followed by ConvFFN."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.module import Conv2d, LayerNorm, Linear, Module
from .autodiff.tensor import ShapeError, Tensor, is_recording

# score matrices above this many elements are evaluated in query blocks when
# no tape is recording
_CHUNK_THRESHOLD = 1 << 22
_CHUNK_ROWS = 256


@dataclass(frozen=True)
class WindowAttentionConfig:
    embed_dim: int = 256
    heads: int = 8
    window: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass(frozen=True)
class ConvFFNConfig:
    embed_dim: int = 256
    hidden_dim: int = 1024
    depthwise_kernel: int = 3

    def __post_init__(self):
        if self.hidden_dim < self.embed_dim:
            raise ValueError("hidden_dim must be >= embed_dim")


@dataclass(frozen=True)
class PartitionRecord:
    batch: int
    channels: int
    height: int
    width: int
    window: int

    @property
    def padded(self):
        ws = self.window
        return -(-self.height // ws) * ws, -(-self.width // ws) * ws

    @property
    def grid(self):
        hp, wp = self.padded
        return hp // self.window, wp // self.window

    @property
    def num_windows(self):
        gh, gw = self.grid
        return gh * gw


def window_partition(x: Tensor, window: int):
    """Split NCHW into (N * windows) x window^2 x C token blocks.

    Extents are zero-padded up to multiples of ``window``; the returned boolean
    mask marks real (unpadded) tokens.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    n, c, h, w = x.shape
    rec = PartitionRecord(n, c, h, w, window)
    hp, wp = rec.padded
    gh, gw = rec.grid
    if (hp, wp) != (h, w):
        x = ops.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)))
    t = ops.reshape(x, (n, c, gh, window, gw, window))
    t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
    windows = ops.reshape(t, (n * gh * gw, window * window, c))
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    vmask = valid.reshape(gh, window, gw, window).transpose(0, 2, 1, 3).reshape(gh * gw, window * window)
    mask = np.tile(vmask, (n, 1))
    return windows, rec, mask


def window_merge(windows: Tensor, rec: PartitionRecord) -> Tensor:
    n, c, ws = rec.batch, rec.channels, rec.window
    gh, gw = rec.grid
    t = ops.reshape(windows, (n, gh, gw, ws, ws, c))
    t = ops.transpose(t, (0, 5, 1, 3, 2, 4))
    x = ops.reshape(t, (n, c, gh * ws, gw * ws))
    if (gh * ws, gw * ws) != (rec.height, rec.width):
        x = ops.crop(x, (slice(None), slice(None), slice(0, rec.height), slice(0, rec.width)))
    return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over token blocks B x T x C.

    Masked-out keys get -inf logits. With ``keep_attention`` the head-averaged
    attention weights of the last call are stored on ``last_attention``.
    """

    def __init__(self, embed_dim: int, heads: int, rng=None):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embed_dim, self.heads = embed_dim, heads
        std = 0.02
        self.q = Linear(embed_dim, embed_dim, rng=rng, std=std)
        self.k = Linear(embed_dim, embed_dim, rng=rng, std=std)
        self.v = Linear(embed_dim, embed_dim, rng=rng, std=std)
        self.proj = Linear(embed_dim, embed_dim, rng=rng, std=std)
        self.keep_attention = False
        self.last_attention = None

    def _split(self, t, b, n):
        d = self.embed_dim // self.heads
        t = ops.transpose(ops.reshape(t, (b, n, self.heads, d)), (0, 2, 1, 3))
        return ops.reshape(t, (b * self.heads, n, d))

    def forward(self, tokens: Tensor, mask=None) -> Tensor:
        b, n, c = tokens.shape
        if c != self.embed_dim:
            raise ShapeError(f"token dim {c} != embed_dim {self.embed_dim}")
        if mask is not None and np.shape(mask) != (b, n):
            raise ShapeError(f"mask shape {np.shape(mask)} != {(b, n)}")
        h = self.heads
        d = c // h
        q = self._split(self.q(tokens), b, n)
        k = self._split(self.k(tokens), b, n)
        v = self._split(self.v(tokens), b, n)
        bias = None
        if mask is not None and not np.all(mask):
            bias = np.where(np.repeat(np.asarray(mask, dtype=bool), h, axis=0), 0.0, -np.inf)[:, None, :]
        if not is_recording() and b * h * n * n > _CHUNK_THRESHOLD and not self.keep_attention:
            ctx = Tensor(_attend_blocked(q.data, k.data, v.data, bias, 1.0 / math.sqrt(d)))
        else:
            scores = ops.scale(ops.bmm(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
            if bias is not None:
                scores = ops.add(scores, Tensor(bias))
            attn = ops.softmax(scores, axis=-1)
            if self.keep_attention:
                self.last_attention = attn.data.reshape(b, h, n, n).mean(axis=1)
            ctx = ops.bmm(attn, v)
        ctx = ops.reshape(ops.transpose(ops.reshape(ctx, (b, h, n, d)), (0, 2, 1, 3)), (b, n, c))
        return self.proj(ctx)


def _attend_blocked(q, k, v, bias, scale):
    """softmax(q k^T * scale + bias) v, evaluated in blocks of query rows."""
    out = np.empty_like(q)
    kt = k.transpose(0, 2, 1)
    for start in range(0, q.shape[1], _CHUNK_ROWS):
        sl = slice(start, start + _CHUNK_ROWS)
        s = np.matmul(q[:, sl], kt) * scale
        if bias is not None:
            s = s + bias
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        out[:, sl] = np.matmul(s, v)
    return out


class WindowAttention(Module):
    def __init__(self, cfg: WindowAttentionConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.mha = MultiHeadAttention(cfg.embed_dim, cfg.heads, rng)

    def attend(self, windows, mask=None):
        return self.mha(windows, mask)

    def forward(self, x):
        windows, rec, mask = window_partition(x, self.cfg.window)
        return window_merge(self.attend(windows, mask), rec)


def window_attention(windows, attn: WindowAttention, mask=None):
    return attn.attend(windows, mask)


class ConvFFN(Module):
    """x + project(GELU(depthwise(expand(x)))) on NCHW maps."""

    def __init__(self, cfg: ConvFFNConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c, hdim, k = cfg.embed_dim, cfg.hidden_dim, cfg.depthwise_kernel
        self.expand = Conv2d(c, hdim, 1, rng=rng)
        self.depthwise = Conv2d(hdim, hdim, k, padding=k // 2, groups=hdim, rng=rng)
        self.project = Conv2d(hdim, c, 1, rng=rng)

    def forward(self, x):
        if x.shape[1] != self.cfg.embed_dim:
            raise ShapeError(f"ConvFFN expects {self.cfg.embed_dim} channels, got {x.shape[1]}")
        y = self.project(ops.gelu(self.depthwise(self.expand(x))))
        return ops.add(x, y)


class AssociationModule(Module):
    """F_a = ConvFFN(F_b + WindowAttention(LayerNorm(F_b)))."""

    def __init__(self, wcfg: WindowAttentionConfig = WindowAttentionConfig(),
                 fcfg: ConvFFNConfig | None = None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fcfg = fcfg if fcfg is not None else ConvFFNConfig(wcfg.embed_dim)
        if fcfg.embed_dim != wcfg.embed_dim:
            raise ValueError("attention and FFN embed_dim differ")
        self.norm = LayerNorm(wcfg.embed_dim)
        self.attn = WindowAttention(wcfg, rng)
        self.ffn = ConvFFN(fcfg, rng)

    def forward(self, f_b):
        y = ops.add(f_b, self.attn(self.norm(f_b)))
        return self.ffn(y)

    def zero_init_outputs(self):
        for lin in (self.attn.mha.proj,):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
        self.ffn.project.weight.data[...] = 0.0
        self.ffn.project.bias.data[...] = 0.0


def am_forward(f_b, am: AssociationModule):
    return am(f_b)


def fuse_association(f_a: Tensor, f_b: Tensor) -> Tensor:
    if f_a.shape != f_b.shape:
        raise ShapeError(f"F_a {f_a.shape} and F_b {f_b.shape} differ")
    return ops.add(f_a, f_b)
