"""End-to-end encoder: backbone taps, hybrid-encoder stub, background and
association modules, F3 fusion and top-K query selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import (
    AssociationModule,
    ConvFFNConfig,
    MultiHeadAttention,
    WindowAttentionConfig,
    fuse_association,
)
from .autodiff import ops
from .autodiff.module import Conv2d, LayerNorm, Linear, Module, count_params
from .autodiff.tensor import ShapeError, Tensor
from .background import BackgroundAttention, BAMConfig
from .backbone import Backbone, MultiScaleFeatures, get_preset


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "toy"
    embed_dim: int = 256
    reduced_channels: int = 32
    num_queries: int = 300
    encoder_layers: int = 1
    heads: int = 8
    window: int = 4
    ffn_dim: int = 1024
    use_ae: bool = True
    use_spatial: bool = False
    # what gets added to F3: "association" (F_a + F_b) or "background" (F_b alone)
    f3_source: str = "association"
    seed: int = 0

    def __post_init__(self):
        get_preset(self.preset)
        if self.f3_source not in ("association", "background"):
            raise ValueError(f"f3_source must be 'association' or 'background', got {self.f3_source!r}")
        if self.embed_dim % self.reduced_channels:
            raise ValueError("embed_dim must be a multiple of reduced_channels")
        if self.num_queries < 1 or self.encoder_layers < 1:
            raise ValueError("num_queries and encoder_layers must be positive")

    @property
    def reduction(self) -> int:
        return self.embed_dim // self.reduced_channels


@dataclass
class EncodedFeatures:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f3_hat: Tensor = None


@dataclass
class QuerySelection:
    indices: np.ndarray      # N x K x 3 (scale, y, x)
    embeddings: Tensor       # N x K x C
    scores: Tensor           # N x K, non-increasing along K

    def to_csv(self, batch: int = 0) -> str:
        """Selected positions of one batch item as ``rank,scale,y,x,score`` rows."""
        rows = ["rank,scale,y,x,score"]
        for rank, ((s, y, x), score) in enumerate(zip(self.indices[batch], self.scores.data[batch])):
            rows.append(f"{rank},{int(s)},{int(y)},{int(x)},{float(score)!r}")
        return "\n".join(rows) + "\n"


@dataclass
class ForwardResult:
    encoded: EncodedFeatures
    background: Tensor = None
    association: Tensor = None
    queries: QuerySelection = None
    trace: list = field(default_factory=list)

    def trace_text(self) -> str:
        return "".join(f"{name}\t{','.join(map(str, shape))}\n" for name, shape in self.trace)


def _to_tokens(x):
    n, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _from_tokens(t, h, w):
    n, _, c = t.shape
    return ops.transpose(ops.reshape(t, (n, h, w, c)), (0, 3, 1, 2))


class EncoderLayer(Module):
    def __init__(self, embed_dim, heads, rng):
        super().__init__()
        self.norm = LayerNorm(embed_dim)
        self.attn = MultiHeadAttention(embed_dim, heads, rng)

    def forward(self, x):
        h, w = x.shape[2:]
        return ops.add(x, _from_tokens(self.attn(_to_tokens(self.norm(x))), h, w))


class HybridEncoderStub(Module):
    """1x1 projections of S1..S3 to embed_dim plus global self-attention on the deepest map."""

    def __init__(self, tap_channels, embed_dim, heads, layers=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.proj1 = Conv2d(tap_channels[0], embed_dim, 1, rng=rng)
        self.proj2 = Conv2d(tap_channels[1], embed_dim, 1, rng=rng)
        self.proj3 = Conv2d(tap_channels[2], embed_dim, 1, rng=rng)
        self.layers = [EncoderLayer(embed_dim, heads, rng) for _ in range(layers)]

    def forward(self, ms: MultiScaleFeatures) -> EncodedFeatures:
        f3 = self.proj3(ms.s3)
        for layer in self.layers:
            f3 = layer(f3)
        return EncodedFeatures(self.proj1(ms.s1), self.proj2(ms.s2), f3)

    def zero_init_outputs(self):
        for layer in self.layers:
            layer.attn.proj.weight.data[...] = 0.0
            layer.attn.proj.bias.data[...] = 0.0


def fuse_f3(f3: Tensor, f_b: Tensor) -> Tensor:
    if f3.shape != f_b.shape:
        raise ShapeError(f"F3 {f3.shape} and background feature {f_b.shape} differ; check BAM strides")
    return ops.add(f3, f_b)


class QueryScorer(Module):
    def __init__(self, embed_dim, rng=None):
        super().__init__()
        self.score = Linear(embed_dim, 1, rng=rng)

    def forward(self, tokens):
        n, l, _ = tokens.shape
        return ops.reshape(self.score(tokens), (n, l))


def query_select(levels, k: int, scorer: QueryScorer) -> QuerySelection:
    """Top-``k`` positions over all levels by a shared linear score.

    Ties are broken by (scale, y, x) ascending, i.e. scale-major raster order.
    """
    shapes = [lv.shape[2:] for lv in levels]
    total = sum(h * w for h, w in shapes)
    if k > total:
        raise ValueError(f"cannot select {k} queries from {total} positions")
    tokens = ops.concat([_to_tokens(lv) for lv in levels], axis=1)
    n, l, c = tokens.shape
    scores = scorer(tokens)
    order = np.argsort(-scores.data, axis=1, kind="stable")[:, :k]
    flat_idx = (order + np.arange(n)[:, None] * l).reshape(-1)
    emb = ops.reshape(ops.gather_rows(ops.reshape(tokens, (n * l, c)), flat_idx), (n, k, c))
    sel_scores = ops.reshape(ops.gather_rows(ops.reshape(scores, (n * l, 1)), flat_idx), (n, k))
    # decode flat position -> (scale, y, x)
    starts = np.cumsum([0] + [h * w for h, w in shapes])
    scale = np.searchsorted(starts, order, side="right") - 1
    local = order - starts[scale]
    widths = np.array([w for _, w in shapes])[scale]
    indices = np.stack([scale, local // widths, local % widths], axis=-1)
    return QuerySelection(indices, emb, sel_scores)


class DetectionEncoder(Module):
    """Backbone + hybrid-encoder stub + association encoder + query selection."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        preset = get_preset(cfg.preset)
        self.backbone = Backbone(preset, rng)
        taps = preset.tap_channels
        self.encoder = HybridEncoderStub(taps, cfg.embed_dim, cfg.heads, cfg.encoder_layers, rng)
        self.bam = BackgroundAttention(BAMConfig(
            in_channels=taps[0], embed_dim=cfg.embed_dim, reduction=cfg.reduction,
            use_spatial=cfg.use_spatial), rng)
        self.am = AssociationModule(
            WindowAttentionConfig(cfg.embed_dim, cfg.heads, cfg.window),
            ConvFFNConfig(cfg.embed_dim, cfg.ffn_dim), rng)
        self.scorer = QueryScorer(cfg.embed_dim, rng)

    def zero_init_ae_outputs(self):
        self.bam.zero_init_outputs()
        self.am.zero_init_outputs()

    def forward(self, image, use_ae=None, num_queries=None) -> ForwardResult:
        use_ae = self.cfg.use_ae if use_ae is None else use_ae
        k = self.cfg.num_queries if num_queries is None else num_queries
        trace = [("image", image.shape)]
        ms = self.backbone(image)
        trace += [("S1", ms.s1.shape), ("S2", ms.s2.shape), ("S3", ms.s3.shape)]
        enc = self.encoder(ms)
        trace += [("F1", enc.f1.shape), ("F2", enc.f2.shape), ("F3", enc.f3.shape)]
        f_b = f_a = None
        if use_ae:
            f_b = self.bam(ms.s1)
            f_a = self.am(f_b)
            enriched = fuse_association(f_a, f_b)
            enc.f3_hat = fuse_f3(enc.f3, enriched if self.cfg.f3_source == "association" else f_b)
            trace += [("F_b", f_b.shape), ("F_a", f_a.shape), ("F_a+F_b", enriched.shape)]
        else:
            enc.f3_hat = enc.f3
        trace.append(("F3_hat", enc.f3_hat.shape))
        queries = query_select([enc.f1, enc.f2, enc.f3_hat], k, self.scorer)
        trace.append(("queries", queries.embeddings.shape))
        return ForwardResult(enc, f_b, f_a, queries, trace)

    def param_report(self) -> dict:
        bam = count_params(self, "bam.")
        am = count_params(self, "am.")
        return {
            "backbone": count_params(self, "backbone."),
            "bam": bam,
            "am": am,
            "encoder_stub": count_params(self, "encoder."),
            "query_scorer": count_params(self, "scorer."),
            "ae_total": bam + am,
            "total": count_params(self),
        }


def full_forward(image, model: DetectionEncoder, **kw) -> ForwardResult:
    return model(image, **kw)


def total_positions(size_hw) -> int:
    h, w = size_hw
    return sum((h // s) * (w // s) for s in (8, 16, 32))
