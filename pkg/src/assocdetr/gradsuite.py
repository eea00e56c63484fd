"""Registry of finite-difference gradient checks, grouped by scope.

Scopes are cumulative: ``blocks`` includes every ``ops`` check and
``pipeline`` includes everything. Each check runs for three consecutive
seeds starting at the requested one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import check_gradients
from .autodiff.module import BatchNorm2d, Module
from .autodiff.tensor import Tensor

TOLERANCE = 1e-4
SCOPES = ("ops", "blocks", "pipeline")
SEEDS_PER_CHECK = 3


@dataclass(frozen=True)
class GradCheck:
    op: str
    scope: str
    build: Callable  # rng -> (closure, inputs, max_probes)


@dataclass(frozen=True)
class CheckResult:
    op: str
    seed: int
    shape: tuple
    rel_err: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err < TOLERANCE)

    def line(self) -> str:
        shape = "x".join(map(str, self.shape))
        return f"{self.op},{shape},{self.rel_err:.3e},{'pass' if self.passed else 'fail'}"


_REGISTRY: list = []


def register(op: str, scope: str):
    def deco(fn):
        _REGISTRY.append(GradCheck(op, scope, fn))
        return fn
    return deco


def checks_for(scope: str):
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    allowed = SCOPES[: SCOPES.index(scope) + 1]
    return [c for c in _REGISTRY if c.scope in allowed]


def _t(rng, *shape, positive=False):
    d = rng.standard_normal(shape)
    if positive:
        d = np.abs(d) + 0.5
    return Tensor(d, requires_grad=True)


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    """Random linear functional of ``out``; avoids sums that are constant by symmetry."""
    return ops.sum(ops.mul(out, Tensor(weights)))


def _scalar(fn, inputs, rng, max_probes=None):
    """Wrap ``fn(*inputs) -> Tensor`` into a zero-arg scalar closure."""
    cache = {}

    def f():
        out = fn(*inputs)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(out.shape)
        return _readout(out, cache["w"])
    return f, inputs, max_probes


def _module_inputs(module: Module, *tensors):
    return list(tensors) + module.parameters()


def _randomize_bn(module: Module, rng):
    """Give batch norms non-trivial affine and running statistics."""
    for _, m in module.named_modules():
        if isinstance(m, BatchNorm2d):
            c = m.weight.size
            m.weight.data[...] = 1.0 + 0.1 * rng.standard_normal(c)
            m.bias.data[...] = 0.1 * rng.standard_normal(c)
            m.stats.mean[...] = 0.1 * rng.standard_normal(c)
            m.stats.var[...] = 1.0 + 0.1 * np.abs(rng.standard_normal(c))


# ---------------------------------------------------------------------------
# ops

@register("add", "ops")
def _(rng):
    return _scalar(ops.add, [_t(rng, 2, 3, 4), _t(rng, 2, 1, 4)], rng)


@register("sub", "ops")
def _(rng):
    return _scalar(ops.sub, [_t(rng, 3, 4), _t(rng, 1, 4)], rng)


@register("mul", "ops")
def _(rng):
    return _scalar(ops.mul, [_t(rng, 2, 3, 4), _t(rng, 1, 3, 1)], rng)


@register("relu", "ops")
def _(rng):
    return _scalar(ops.relu, [_t(rng, 3, 5)], rng)


@register("sigmoid", "ops")
def _(rng):
    return _scalar(ops.sigmoid, [_t(rng, 3, 5)], rng)


@register("gelu", "ops")
def _(rng):
    return _scalar(ops.gelu, [_t(rng, 3, 5)], rng)


@register("matmul", "ops")
def _(rng):
    return _scalar(ops.matmul, [_t(rng, 4, 3), _t(rng, 3, 5)], rng)


@register("bmm", "ops")
def _(rng):
    return _scalar(ops.bmm, [_t(rng, 2, 4, 3), _t(rng, 2, 3, 5)], rng)


@register("linear", "ops")
def _(rng):
    return _scalar(ops.linear, [_t(rng, 2, 3, 4), _t(rng, 5, 4), _t(rng, 5)], rng)


@register("reshape+transpose", "ops")
def _(rng):
    return _scalar(lambda x: ops.transpose(ops.reshape(x, (3, 2, 4)), (2, 0, 1)), [_t(rng, 2, 3, 4)], rng)


@register("concat", "ops")
def _(rng):
    return _scalar(lambda a, b: ops.concat([a, b], axis=1), [_t(rng, 2, 3, 4), _t(rng, 2, 2, 4)], rng)


@register("pad+crop", "ops")
def _(rng):
    def fn(x):
        p = ops.pad(x, ((0, 0), (1, 2), (2, 0)))
        return ops.crop(p, (slice(None), slice(0, 4), slice(1, 5)))
    return _scalar(fn, [_t(rng, 2, 3, 4)], rng)


@register("gather_rows", "ops")
def _(rng):
    idx = rng.integers(0, 5, size=7)
    return _scalar(lambda x: ops.gather_rows(x, idx), [_t(rng, 5, 3)], rng)


@register("sum", "ops")
def _(rng):
    return _scalar(lambda x: ops.sum(x, axis=1, keepdims=True), [_t(rng, 3, 4, 2)], rng)


@register("mean", "ops")
def _(rng):
    return _scalar(lambda x: ops.mean(x, axis=(0, 2)), [_t(rng, 3, 4, 2)], rng)


@register("amax", "ops")
def _(rng):
    return _scalar(lambda x: ops.amax(x, axis=1), [_t(rng, 3, 5, 2)], rng)


@register("softmax", "ops")
def _(rng):
    return _scalar(lambda x: ops.softmax(x, axis=-1), [_t(rng, 3, 5)], rng)


@register("cross_entropy", "ops")
def _(rng):
    labels = rng.integers(0, 5, size=4)
    logits = _t(rng, 4, 5)
    return (lambda: ops.cross_entropy(logits, labels)), [logits], None


@register("conv2d", "ops")
def _(rng):
    return _scalar(lambda x, w, b: ops.conv2d(x, w, b), [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)], rng)


@register("conv2d-strided-padded", "ops")
def _(rng):
    return _scalar(lambda x, w: ops.conv2d(x, w, None, stride=2, padding=1),
                   [_t(rng, 1, 2, 5, 5), _t(rng, 3, 2, 3, 3)], rng)


@register("conv2d-grouped", "ops")
def _(rng):
    return _scalar(lambda x, w: ops.conv2d(x, w, None, padding=1, groups=2),
                   [_t(rng, 1, 4, 4, 4), _t(rng, 4, 2, 3, 3)], rng)


@register("unfold", "ops")
def _(rng):
    return _scalar(lambda x: ops.unfold(x, 3, 2, 1), [_t(rng, 2, 2, 5, 5)], rng)


@register("pool-max", "ops")
def _(rng):
    return _scalar(lambda x: ops.pool("max", x, 3, 2, 1), [_t(rng, 1, 2, 5, 5)], rng)


@register("pool-avg", "ops")
def _(rng):
    return _scalar(lambda x: ops.pool("avg", x, 2, 2), [_t(rng, 1, 2, 4, 4)], rng)


@register("global-pool", "ops")
def _(rng):
    return _scalar(lambda x: ops.add(ops.global_pool("avg", x), ops.global_pool("max", x)),
                   [_t(rng, 2, 3, 4, 4)], rng)


@register("normalize-batch-train", "ops")
def _(rng):
    stats = ops.RunningStats(3)
    return _scalar(lambda x, g, b: ops.normalize("batch", x, g, b, 1e-5, "train", stats),
                   [_t(rng, 4, 3, 2, 2), _t(rng, 3), _t(rng, 3)], rng)


@register("normalize-batch-eval", "ops")
def _(rng):
    stats = ops.RunningStats(3)
    stats.mean[...] = rng.standard_normal(3)
    stats.var[...] = np.abs(rng.standard_normal(3)) + 0.5
    return _scalar(lambda x, g, b: ops.normalize("batch", x, g, b, 1e-5, "eval", stats),
                   [_t(rng, 2, 3, 2, 2), _t(rng, 3), _t(rng, 3)], rng)


@register("normalize-layer", "ops")
def _(rng):
    return _scalar(lambda x, g, b: ops.normalize("layer", x, g, b, 1e-5),
                   [_t(rng, 2, 4, 3, 3), _t(rng, 4), _t(rng, 4)], rng)


# ---------------------------------------------------------------------------
# blocks

@register("channel_attention", "blocks")
def _(rng):
    from .attention import ChannelAttention, ChannelAttentionConfig
    m = ChannelAttention(ChannelAttentionConfig(4, 2), rng)
    x = _t(rng, 2, 4, 3, 3)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng)


@register("spatial_attention", "blocks")
def _(rng):
    from .attention import SpatialAttention
    m = SpatialAttention(rng=rng)
    x = _t(rng, 1, 3, 5, 5)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=40)


@register("rf_attention_weights", "blocks")
def _(rng):
    from .attention import ReceptiveFieldWeights
    m = ReceptiveFieldWeights(2, 3, rng)
    x = _t(rng, 1, 2, 4, 4)
    return _scalar(lambda x, *_: m(x, 1), _module_inputs(m, x), rng)


@register("rfcbam_conv", "blocks")
def _(rng):
    from .attention import RFCBAMConv, RFCBAMConvConfig
    m = RFCBAMConv(RFCBAMConvConfig(4, 4, 3, 2, reduction=2), rng)
    _randomize_bn(m, rng)
    x = _t(rng, 2, 4, 5, 5)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=40)


@register("rfcbam_conv-spatial", "blocks")
def _(rng):
    from .attention import RFCBAMConv, RFCBAMConvConfig
    m = RFCBAMConv(RFCBAMConvConfig(3, 4, 3, 1, reduction=2, use_spatial=True), rng)
    m.eval()
    _randomize_bn(m, rng)
    x = _t(rng, 1, 3, 4, 4)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=40)


@register("bam_forward", "blocks")
def _(rng):
    from .background import BackgroundAttention, BAMConfig
    m = BackgroundAttention(BAMConfig(in_channels=4, embed_dim=8, reduction=2), rng)
    _randomize_bn(m, rng)
    x = _t(rng, 1, 4, 8, 8)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=30)


@register("bam_classifier_loss", "blocks")
def _(rng):
    from .background import BackgroundAttention, BAMConfig
    from .autodiff.module import Linear
    bam = BackgroundAttention(BAMConfig(in_channels=4, embed_dim=8, reduction=2), rng)
    bam.eval()
    _randomize_bn(bam, rng)
    head = Linear(8, 9, rng=rng)
    feats = _t(rng, 3, 4, 4, 4)
    labels = rng.integers(0, 9, size=3)

    def f():
        fb = bam(feats)
        pooled = ops.reshape(ops.global_pool("avg", fb), (3, 8))
        return ops.cross_entropy(head(pooled), labels)
    return f, [feats] + head.parameters() + bam.parameters(), 30


@register("window_attention", "blocks")
def _(rng):
    from .association import WindowAttention, WindowAttentionConfig
    m = WindowAttention(WindowAttentionConfig(8, 2, 4), rng)
    for p in m.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    x = _t(rng, 1, 8, 5, 5)  # padded to 8x8: exercises the mask
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=40)


@register("conv_ffn", "blocks")
def _(rng):
    from .association import ConvFFN, ConvFFNConfig
    m = ConvFFN(ConvFFNConfig(4, 8), rng)
    x = _t(rng, 1, 4, 6, 6)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=40)


@register("am_forward", "blocks")
def _(rng):
    from .association import AssociationModule, ConvFFNConfig, WindowAttentionConfig
    m = AssociationModule(WindowAttentionConfig(8, 2, 2), ConvFFNConfig(8, 16), rng)
    for p in m.attn.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    x = _t(rng, 1, 8, 3, 3)
    return _scalar(lambda x, *_: m(x), _module_inputs(m, x), rng, max_probes=30)


@register("fuse_association", "blocks")
def _(rng):
    from .association import fuse_association
    return _scalar(fuse_association, [_t(rng, 1, 3, 2, 2), _t(rng, 1, 3, 2, 2)], rng)


@register("fuse_f3", "blocks")
def _(rng):
    from .pipeline import fuse_f3
    return _scalar(fuse_f3, [_t(rng, 1, 3, 2, 2), _t(rng, 1, 3, 2, 2)], rng)


@register("hybrid_encoder_stub", "blocks")
def _(rng):
    from .backbone import MultiScaleFeatures
    from .pipeline import HybridEncoderStub
    m = HybridEncoderStub((2, 3, 4), 8, 2, 1, rng)
    for p in m.layers[0].attn.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    s1, s2, s3 = _t(rng, 1, 2, 4, 4), _t(rng, 1, 3, 2, 2), _t(rng, 1, 4, 2, 2)
    weights = {}

    def f():
        enc = m(MultiScaleFeatures(s1, s2, s3))
        outs = (enc.f1, enc.f2, enc.f3)
        for i, o in enumerate(outs):
            weights.setdefault(i, rng.standard_normal(o.shape))
        return ops.add(ops.add(_readout(outs[0], weights[0]), _readout(outs[1], weights[1])),
                       _readout(outs[2], weights[2]))
    return f, [s1, s2, s3] + m.parameters(), 30


@register("query_select", "blocks")
def _(rng):
    from .pipeline import QueryScorer, query_select
    scorer = QueryScorer(4, rng)
    levels = [_t(rng, 1, 4, 4, 4), _t(rng, 1, 4, 2, 2), _t(rng, 1, 4, 1, 1)]
    weights = {}

    def f():
        q = query_select(levels, 6, scorer)
        weights.setdefault("e", rng.standard_normal(q.embeddings.shape))
        # the top-K score sum is continuous even where the ranking changes
        return ops.add(ops.sum(q.scores), _readout(q.embeddings, weights["e"]))
    return f, levels + scorer.parameters(), None


# ---------------------------------------------------------------------------
# pipeline

def _toy_pipeline(rng, use_ae=True):
    from .pipeline import DetectionEncoder, PipelineConfig
    cfg = PipelineConfig(preset="toy", embed_dim=32, reduced_channels=4, num_queries=20,
                         heads=4, window=4, ffn_dim=64, use_ae=use_ae,
                         seed=int(rng.integers(0, 2**31)))
    model = DetectionEncoder(cfg)
    model.eval()
    _randomize_bn(model, rng)
    image = Tensor(rng.standard_normal((1, 3, 64, 64)), requires_grad=True)
    weights = {}

    def f():
        r = model(image)
        enc = r.encoded
        total = ops.sum(r.queries.scores)
        for key, t in (("f1", enc.f1), ("f2", enc.f2), ("f3", enc.f3_hat)):
            weights.setdefault(key, rng.standard_normal(t.shape))
            total = ops.add(total, _readout(t, weights[key]))
        return total
    return model, image, f


@register("full_forward[image]", "pipeline")
def _(rng):
    _, image, f = _toy_pipeline(rng)
    return f, [image], 12


@register("full_forward[ae-params]", "pipeline")
def _(rng):
    model, _, f = _toy_pipeline(rng)
    picks = [p for n, p in model.named_parameters() if n.startswith(("bam.", "am."))]
    sel = rng.choice(len(picks), size=4, replace=False)
    return f, [picks[i] for i in sorted(sel)], 4


@register("full_forward[backbone-params]", "pipeline")
def _(rng):
    model, _, f = _toy_pipeline(rng)
    picks = [p for n, p in model.named_parameters() if n.startswith("backbone.stage")]
    sel = rng.choice(len(picks), size=3, replace=False)
    return f, [picks[i] for i in sorted(sel)], 4


def run_check(check: GradCheck, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    f, inputs, max_probes = check.build(rng)
    probe_rng = np.random.default_rng(seed + 1_000_003)
    try:
        err = check_gradients(f, inputs, max_probes=max_probes, rng=probe_rng)
    except (ArithmeticError, FloatingPointError):
        err = float("inf")
    return CheckResult(check.op, seed, tuple(inputs[0].shape), err)


def run_suite(scope: str, seed: int = 0, emit=None):
    """Run every check in ``scope`` for seeds seed..seed+2; returns (results, seconds)."""
    start = time.perf_counter()
    results = []
    for check in checks_for(scope):
        for s in range(seed, seed + SEEDS_PER_CHECK):
            r = run_check(check, s)
            results.append(r)
            if emit is not None:
                emit(r)
    return results, time.perf_counter() - start
