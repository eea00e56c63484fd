"""Procedural 9-class texture corpus used when the Stanford images are absent.

Every class is a pattern family with randomized phase and geometry, drawn
between two random grey levels, so raw pixel intensities carry little class
information while local texture statistics do.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff.tensor import Tensor
from ..background import CLASS_NAMES, BackgroundClassLabel

DEFAULT_PATCH = 96


@dataclass(frozen=True)
class LabeledPatch:
    pixels: np.ndarray  # 3 x P x P, values in [0, 1]
    label: BackgroundClassLabel

    def __post_init__(self):
        c, h, w = self.pixels.shape
        if c != 3 or h != w or h % 8:
            raise ValueError(f"patch must be 3 x P x P with P divisible by 8, got {self.pixels.shape}")

    def as_tensor(self) -> Tensor:
        return Tensor(self.pixels[None])


def _grid(p):
    v, u = np.meshgrid(np.arange(p) + 0.5, np.arange(p) + 0.5, indexing="ij")
    return u / p, v / p


def _stripes(rng, p, angle, period):
    u, v = _grid(p)
    proj = (u * np.cos(angle) + v * np.sin(angle)) * p
    return 0.5 + 0.5 * np.sin(2 * np.pi * (proj / period + rng.uniform(0, 1)))


def _sky(rng, p):
    # smooth gradient, no local structure
    u, v = _grid(p)
    return np.clip(v * rng.uniform(0.6, 1.0) + rng.uniform(-0.2, 0.2) * u, 0, 1)


def _tree(rng, p):
    # isotropic clumps
    u, v = _grid(p)
    t = np.zeros((p, p))
    for _ in range(rng.integers(p // 6, p // 4)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(2.5, 3.5) / p
        t += np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * r * r))
    return np.clip(t, 0, 1)


def _road(rng, p):
    # diagonal stripes, either diagonal so mirrored patches stay in-class
    ang = rng.choice([1, -1]) * np.pi / 4 + rng.uniform(-0.15, 0.15)
    return _stripes(rng, p, ang, rng.uniform(8, 10))


def _grass(rng, p):
    # random vertical streaks
    cols = rng.uniform(0, 1, p)
    return np.tile(cols, (p, 1))


def _water(rng, p):
    # horizontal periodic waves
    return _stripes(rng, p, np.pi / 2 + rng.uniform(-0.1, 0.1), rng.uniform(8, 10))


def _building(rng, p):
    # checkerboard lattice
    u, v = _grid(p)
    cell = rng.uniform(3.5, 5.0) / p
    oy, ox = rng.uniform(0, 1, 2)
    return ((np.floor(u / cell + ox) + np.floor(v / cell + oy)) % 2).astype(float)


def _mountain(rng, p):
    # random horizontal bands
    heights = rng.integers(2, 4, p)
    rows = np.repeat(rng.uniform(0, 1, p), heights)[:p]
    return np.tile(rows[:, None], (1, p))


def _foreground(rng, p):
    # lattice of small dots
    u, v = _grid(p)
    cell = rng.uniform(12, 14) / p
    oy, ox = rng.uniform(0, 1, 2)
    dy = np.mod(v / cell + oy, 1) - 0.5
    dx = np.mod(u / cell + ox, 1) - 0.5
    return ((dx * dx + dy * dy) < 0.3 ** 2).astype(float)


def _unknown(rng, p, block=4):
    # blocky isotropic noise with a random grid offset
    cells = rng.uniform(0, 1, (p // block + 1, p // block + 1))
    oy, ox = rng.integers(0, block, 2)
    return np.kron(cells, np.ones((block, block)))[oy:oy + p, ox:ox + p]


_FAMILIES = (_sky, _tree, _road, _grass, _water, _building, _mountain, _foreground, _unknown)
assert len(_FAMILIES) == len(CLASS_NAMES)


def _colours(rng):
    """Two grey levels at least 0.4 apart, each with a mild random tint."""
    while True:
        a, b = rng.uniform(0, 1, 2)
        if abs(a - b) >= 0.4:
            break
    tint = rng.uniform(-0.1, 0.1, 3)
    return np.clip(a + tint, 0, 1), np.clip(b + tint, 0, 1)


def render(class_id: int, rng, patch: int = DEFAULT_PATCH) -> np.ndarray:
    t = _FAMILIES[class_id](rng, patch)
    fg, bg = _colours(rng)
    img = bg[:, None, None] * (1 - t)[None] + fg[:, None, None] * t[None]
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_corpus(seed: int, per_class: int, patch: int = DEFAULT_PATCH) -> list:
    """``per_class`` patches for each of the 9 classes, class-major order."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for cid in range(len(CLASS_NAMES)):
        for _ in range(per_class):
            out.append(LabeledPatch(render(cid, rng, patch), BackgroundClassLabel(cid)))
    return out
