"""Netpbm image codecs: PGM (P2/P5) and PPM (P3/P6), 8- and 16-bit."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos


def decode(data: bytes) -> np.ndarray:
    """Decode to float64 in [0, 1]; shape H x W (PGM) or H x W x 3 (PPM)."""
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError("non-integer header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad header {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        vals = data[pos:].split()
        if len(vals) < count:
            raise ImageFormatError(f"expected {count} samples, found {len(vals)}")
        arr = np.array([int(v) for v in vals[:count]], dtype=np.float64)
    else:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        raw = data[pos:pos + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise ImageFormatError("truncated pixel data")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    if arr.max(initial=0) > maxval:
        raise ImageFormatError("sample exceeds maxval")
    arr = arr / maxval
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def encode(img: np.ndarray, binary: bool = True) -> bytes:
    """Encode values in [0, 1] (clipped) as 8-bit PGM or PPM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        magic = "P5" if binary else "P2"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = "P6" if binary else "P3"
    else:
        raise ImageFormatError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    q = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"{magic}\n{w} {h}\n255\n".encode()
    if binary:
        return header + q.tobytes()
    rows = q.reshape(h, -1)
    return header + "".join(" ".join(map(str, r)) + "\n" for r in rows).encode()


def read_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_image(path, img, binary: bool = True) -> None:
    Path(path).write_bytes(encode(img, binary))


def write_pgm_u8(path, values: np.ndarray, comments: str = "") -> None:
    """Write already-quantized 0..255 integers as binary PGM.

    ``comments`` lines are placed after the magic number, each prefixed with '#'.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ImageFormatError("PGM needs a 2-D array")
    h, w = values.shape
    notes = "".join(f"# {line.lstrip('# ')}\n" for line in comments.splitlines())
    Path(path).write_bytes(f"P5\n{notes}{w} {h}\n255\n".encode() + values.astype(np.uint8).tobytes())


def to_rgb(img: np.ndarray) -> np.ndarray:
    """Grayscale H x W -> H x W x 3; RGB passes through."""
    return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img
