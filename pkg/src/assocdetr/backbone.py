"""Residual backbones with taps at strides 8, 16 and 32."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.module import BatchNorm2d, Conv2d, Module
from .autodiff.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BackbonePreset:
    name: str
    stem_width: int
    widths: tuple
    depths: tuple
    block: str  # "basic" | "bottleneck"

    @property
    def expansion(self) -> int:
        return 4 if self.block == "bottleneck" else 1

    @property
    def tap_channels(self) -> tuple:
        return tuple(w * self.expansion for w in self.widths[1:])


PRESETS = {
    "toy": BackbonePreset("toy", 16, (16, 32, 64, 128), (1, 1, 1, 1), "basic"),
    "r34-shape": BackbonePreset("r34-shape", 64, (64, 128, 256, 512), (3, 4, 6, 3), "basic"),
    "r50-shape": BackbonePreset("r50-shape", 64, (64, 128, 256, 512), (3, 4, 6, 3), "bottleneck"),
}


def get_preset(name) -> BackbonePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class MultiScaleFeatures:
    s1: Tensor
    s2: Tensor
    s3: Tensor


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, stride, bias=False, rng=rng)
            self.down_bn = BatchNorm2d(cout)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.down is None else self.down_bn(self.down(x))
        return ops.relu(ops.add(y, skip))


class Bottleneck(Module):
    def __init__(self, cin, width, stride, rng):
        super().__init__()
        cout = width * 4
        self.conv1 = Conv2d(cin, width, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, stride, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, cout, 1, bias=False, rng=rng)
        self.bn3 = BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, stride, bias=False, rng=rng)
            self.down_bn = BatchNorm2d(cout)

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = ops.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        skip = x if self.down is None else self.down_bn(self.down(x))
        return ops.relu(ops.add(y, skip))


class Stem(Module):
    def __init__(self, width, rng):
        super().__init__()
        self.conv = Conv2d(3, width, 7, 2, 3, bias=False, rng=rng)
        self.bn = BatchNorm2d(width)

    def forward(self, x):
        return ops.pool("max", ops.relu(self.bn(self.conv(x))), 3, 2, 1)


class Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x

    def children(self):
        # flatten so names read stage2.0.conv1 rather than stage2.blocks.0.conv1
        for i, b in enumerate(self.blocks):
            yield str(i), b


class Backbone(Module):
    def __init__(self, preset="toy", rng=None):
        super().__init__()
        self.preset = get_preset(preset) if isinstance(preset, str) else preset
        p = self.preset
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = Stem(p.stem_width, rng)
        cin = p.stem_width
        for idx, (w, d) in enumerate(zip(p.widths, p.depths)):
            blocks = []
            for b in range(d):
                stride = 2 if (b == 0 and idx > 0) else 1
                if p.block == "basic":
                    blocks.append(BasicBlock(cin, w, stride, rng))
                    cin = w
                else:
                    blocks.append(Bottleneck(cin, w, stride, rng))
                    cin = w * 4
            setattr(self, f"stage{idx + 1}", Stage(blocks))

    def stem_forward(self, image):
        """Stem plus the first two stages: the part shared with the background module."""
        _check_image(image, 8)
        return self.stage2(self.stage1(self.stem(image)))

    def forward(self, image) -> MultiScaleFeatures:
        _check_image(image, 32)
        s1 = self.stem_forward(image)
        s2 = self.stage3(s1)
        s3 = self.stage4(s2)
        return MultiScaleFeatures(s1, s2, s3)


def _check_image(image, mult):
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected N x 3 x H x W image, got {image.shape}")
    h, w = image.shape[2:]
    if h % mult or w % mult:
        raise ShapeError(f"image extents {h}x{w} must be divisible by {mult}")


def backbone_forward(image, backbone: Backbone) -> MultiScaleFeatures:
    return backbone(image)


def shared_stem_forward(image, backbone: Backbone):
    return backbone.stem_forward(image)


def canonical_resnet_params(preset: BackbonePreset) -> int:
    """Closed-form parameter count of a torchvision-style residual network
    without its classification head (convs bias-free, BN affine)."""
    def conv(cin, cout, k):
        return cin * cout * k * k

    def bn(c):
        return 2 * c

    total = conv(3, preset.stem_width, 7) + bn(preset.stem_width)
    cin = preset.stem_width
    for idx, (w, d) in enumerate(zip(preset.widths, preset.depths)):
        for b in range(d):
            stride = 2 if (b == 0 and idx > 0) else 1
            if preset.block == "basic":
                cout = w
                total += conv(cin, w, 3) + bn(w) + conv(w, w, 3) + bn(w)
            else:
                cout = 4 * w
                total += conv(cin, w, 1) + bn(w) + conv(w, w, 3) + bn(w) + conv(w, cout, 1) + bn(cout)
            if stride != 1 or cin != cout:
                total += conv(cin, cout, 1) + bn(cout)
            cin = cout
    return total


# torchvision resnet34 / resnet50 parameter totals minus the 1000-way fc layer
PUBLISHED_COUNTS = {
    "r34-shape": 21_797_672 - (512 * 1000 + 1000),
    "r50-shape": 25_557_032 - (2048 * 1000 + 1000),
}
