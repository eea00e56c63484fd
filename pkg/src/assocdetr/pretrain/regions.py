"""Per-pixel region label maps (``*.regions.txt``) and patch-level labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..background import UNKNOWN_ID, BackgroundClassLabel

MIN_PIXEL_LABEL, MAX_PIXEL_LABEL = -1, 7


class RegionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RegionLabelMap:
    width: int
    height: int
    labels: np.ndarray  # height x width ints in {-1, 0..7}

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != (self.height, self.width):
            raise RegionFormatError(f"labels shape {lab.shape} != {(self.height, self.width)}")
        if lab.size and (lab.min() < MIN_PIXEL_LABEL or lab.max() > MAX_PIXEL_LABEL):
            raise RegionFormatError("pixel label outside {-1, 0..7}")


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    y1: int  # exclusive
    x1: int  # exclusive

    @property
    def empty(self) -> bool:
        return self.y1 <= self.y0 or self.x1 <= self.x0


def parse_region_file(text: str) -> RegionLabelMap:
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            vals = [int(v) for v in line.split()]
        except ValueError:
            raise RegionFormatError(f"row {lineno}: non-integer token") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise RegionFormatError(f"row {lineno}: expected {width} labels, found {len(vals)}")
        bad = [v for v in vals if not MIN_PIXEL_LABEL <= v <= MAX_PIXEL_LABEL]
        if bad:
            raise RegionFormatError(f"row {lineno}: label {bad[0]} outside {{-1, 0..7}}")
        rows.append(vals)
    if not rows:
        raise RegionFormatError("empty region file")
    labels = np.array(rows, dtype=np.int64)
    return RegionLabelMap(width, len(rows), labels)


def serialize_region_map(m: RegionLabelMap) -> str:
    return "".join(" ".join(str(int(v)) for v in row) + "\n" for row in m.labels)


def pixel_to_class(v: int) -> int:
    return UNKNOWN_ID if v == -1 else int(v)


def patch_label(m: RegionLabelMap, rect: Rect) -> BackgroundClassLabel:
    """Majority class over ``rect``; ties go to the smaller class id."""
    if rect.empty:
        raise ValueError(f"empty rectangle {rect}")
    if rect.y0 < 0 or rect.x0 < 0 or rect.y1 > m.height or rect.x1 > m.width:
        raise ValueError(f"rectangle {rect} outside {m.height}x{m.width} map")
    block = np.asarray(m.labels)[rect.y0:rect.y1, rect.x0:rect.x1].reshape(-1)
    classes = np.where(block == -1, UNKNOWN_ID, block)
    counts = np.bincount(classes, minlength=UNKNOWN_ID + 1)
    return BackgroundClassLabel(int(np.argmax(counts)))  # argmax returns the first maximum
