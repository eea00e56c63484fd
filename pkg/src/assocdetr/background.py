"""Background attention module: two RFCBAMConv residual stages on S1, plus the
detachable 9-way background classification head used for pretraining."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import RFCBAMConv, RFCBAMConvConfig
from .autodiff import ops
from .autodiff.module import BatchNorm2d, Conv2d, Linear, Module
from .autodiff.tensor import ShapeError
from .backbone import Backbone

CLASS_NAMES = ("sky", "tree", "road", "grass", "water", "building", "mountain", "foreground", "unknown")
UNKNOWN_ID = CLASS_NAMES.index("unknown")


@dataclass(frozen=True)
class BackgroundClassLabel:
    id: int

    def __post_init__(self):
        if not 0 <= self.id < len(CLASS_NAMES):
            raise ValueError(f"class id {self.id} outside [0, {len(CLASS_NAMES) - 1}]")

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.id]

    @classmethod
    def from_name(cls, name: str) -> "BackgroundClassLabel":
        return cls(CLASS_NAMES.index(name))


def class_manifest() -> str:
    return "".join(f"{i} {n}\n" for i, n in enumerate(CLASS_NAMES))


@dataclass(frozen=True)
class BAMConfig:
    in_channels: int
    stage_channels: Optional[tuple] = None
    strides: tuple = (2, 2)
    embed_dim: int = 256
    num_classes: int = len(CLASS_NAMES)
    kernel: int = 3
    reduction: int = 8
    use_spatial: bool = False
    freeze_bn: bool = False

    def __post_init__(self):
        if self.stage_channels is None:
            object.__setattr__(self, "stage_channels", (2 * self.in_channels, self.embed_dim))
        if len(self.strides) != 2 or self.strides[0] * self.strides[1] != 4:
            raise ValueError(f"BAM strides must multiply to 4, got {self.strides}")
        if self.stage_channels[-1] != self.embed_dim:
            raise ValueError("last BAM stage width must equal embed_dim")


class ResidualStage(Module):
    """Two RFCBAMConv blocks with a 1x1 projection shortcut; ReLU after the sum."""

    def __init__(self, cin, cout, stride, cfg: BAMConfig, rng):
        super().__init__()
        mk = lambda i, o, s: RFCBAMConvConfig(i, o, cfg.kernel, s, cfg.reduction, cfg.use_spatial)  # noqa: E731
        self.conv_a = RFCBAMConv(mk(cin, cout, stride), rng)
        self.conv_b = RFCBAMConv(mk(cout, cout, 1), rng)
        self.shortcut = Conv2d(cin, cout, 1, stride, bias=False, rng=rng)
        self.shortcut_bn = BatchNorm2d(cout)

    def shortcut_forward(self, x):
        return self.shortcut_bn(self.shortcut(x))

    def forward(self, x):
        return ops.relu(ops.add(self.conv_b(self.conv_a(x)), self.shortcut_forward(x)))


class BackgroundAttention(Module):
    def __init__(self, cfg: BAMConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c1, c2 = cfg.stage_channels
        s1, s2 = cfg.strides
        self.stage1 = ResidualStage(cfg.in_channels, c1, s1, cfg, rng)
        self.stage2 = ResidualStage(c1, c2, s2, cfg, rng)
        if cfg.freeze_bn:
            self.set_bn_frozen(True)

    def set_bn_frozen(self, frozen: bool = True):
        for _, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                m.frozen = frozen

    def forward(self, s1):
        n, c, h, w = s1.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"BAM expects {self.cfg.in_channels} channels, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(f"S1 extents {h}x{w} must be divisible by 4")
        return self.stage2(self.stage1(s1))

    def zero_init_outputs(self):
        """Make F_b identically zero: zero the affine output of both paths of the last stage."""
        last = self.stage2
        for bn in (last.conv_b.bn, last.shortcut_bn):
            bn.weight.data[...] = 0.0
            bn.bias.data[...] = 0.0


def bam_forward(s1, bam: BackgroundAttention):
    return bam(s1)


class _SharedStem(Module):
    """View onto the backbone modules the classifier borrows (no copies)."""

    def __init__(self, backbone: Backbone):
        super().__init__()
        self.stem = backbone.stem
        self.stage1 = backbone.stage1
        self.stage2 = backbone.stage2
        self._backbone = backbone

    def children(self):
        yield "stem", self.stem
        yield "stage1", self.stage1
        yield "stage2", self.stage2

    def forward(self, image):
        return self._backbone.stem_forward(image)


class BackgroundClassifier(Module):
    """Shared stem -> BAM -> global average pool -> linear head."""

    def __init__(self, backbone: Backbone, bam: BackgroundAttention, head: Linear):
        super().__init__()
        self.backbone = _SharedStem(backbone)
        self.bam = bam
        self.head = head

    def children(self):
        yield "backbone", self.backbone
        yield "bam", self.bam
        if self.head is not None:
            yield "head", self.head

    def features(self, image):
        return self.bam(self.backbone(image))

    def logits_from_features(self, fb):
        n, c = fb.shape[:2]
        pooled = ops.reshape(ops.global_pool("avg", fb), (n, c))
        return self.head(pooled)

    def forward(self, image):
        return self.logits_from_features(self.features(image))


def attach_head(bam: BackgroundAttention, backbone: Backbone, rng=None, init_std: float = 0.01) -> BackgroundClassifier:
    rng = rng if rng is not None else np.random.default_rng(0)
    head = Linear(bam.cfg.embed_dim, bam.cfg.num_classes, rng=rng, std=init_std)
    return BackgroundClassifier(backbone, bam, head)


def strip_head(classifier) -> BackgroundAttention:
    if not isinstance(classifier, BackgroundClassifier) or classifier.head is None:
        raise ValueError("no classification head to strip")
    return classifier.bam
