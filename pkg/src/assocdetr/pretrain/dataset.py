"""Stanford-layout dataset directories: ``images/*.ppm|pgm`` with matching
``labels/*.regions.txt``, cut into labelled patches."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..imageio import read_image, to_rgb
from .regions import Rect, parse_region_file, patch_label
from .synth import DEFAULT_PATCH, LabeledPatch


class DatasetError(OSError):
    pass


def find_pairs(root) -> list:
    root = Path(root)
    img_dir, lab_dir = root / "images", root / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DatasetError(f"{root} must contain images/ and labels/")
    pairs = []
    for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".ppm", ".pgm")):
        lab = lab_dir / f"{img.stem}.regions.txt"
        if lab.exists():
            pairs.append((img, lab))
    if not pairs:
        raise DatasetError(f"no image/label pairs under {root}")
    return pairs


def image_patches(img: np.ndarray, labels, patch: int = DEFAULT_PATCH, flip: bool = False) -> list:
    """Non-overlapping ``patch`` tiles; the label map must match the image size."""
    img = to_rgb(img)
    h, w = img.shape[:2]
    if (labels.height, labels.width) != (h, w):
        raise DatasetError(f"label map {labels.height}x{labels.width} != image {h}x{w}")
    out = []
    for y in range(0, h - patch + 1, patch):
        for x in range(0, w - patch + 1, patch):
            pix = img[y:y + patch, x:x + patch].transpose(2, 0, 1).copy()
            lab = patch_label(labels, Rect(y, x, y + patch, x + patch))
            out.append(LabeledPatch(pix, lab))
            if flip:
                out.append(LabeledPatch(pix[:, :, ::-1].copy(), lab))
    return out


def load_directory(root, patch: int = DEFAULT_PATCH, flip: bool = False) -> list:
    out = []
    for img_path, lab_path in find_pairs(root):
        labels = parse_region_file(lab_path.read_text())
        out.extend(image_patches(read_image(img_path), labels, patch, flip))
    return out
