"""8-bit binary PGM (P5) images."""
import re
from pathlib import Path
from typing import Union

import numpy as np
from src.errors import ImageFormatError, MissingFileError, ShapeError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] floats to bytes, rounding half to even."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def to_float(img: np.ndarray, dtype="float32") -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) / 255.0).astype(dtype)


def write_pgm(path: Union[str, Path], img: np.ndarray):
    """Write a [H,W] image; floats are quantised from [0, 1]."""
    if img.ndim != 2:
        raise ShapeError(f"PGM images are [H,W], got {img.shape}")
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = data.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a P5 image as uint8 [H,W]; a maxval below 255 is rescaled to 0..255."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no image at {path}")
    data = path.read_bytes()
    fields, offset = [], 0
    for _ in range(4):
        match = _TOKEN.match(data, offset)
        if match is None:
            raise ImageFormatError(f"{path} has a malformed PGM header")
        fields.append(match.group(1))
        offset = match.end()
    if fields[0] != b"P5":
        raise ImageFormatError(f"{path} is not a binary PGM")
    try:
        w, h, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path} has a malformed PGM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise ImageFormatError(
            f"{path} declares {w}x{h} with maxval {maxval}; only 8-bit images are supported"
        )
    offset += 1  # single whitespace after maxval
    if len(data) < offset + w * h:
        raise ImageFormatError(f"{path} holds fewer than {w * h} pixels")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)
    if maxval < 255:
        if pixels.max() > maxval:
            raise ImageFormatError(f"{path} has pixels above its maxval {maxval}")
        return np.rint(pixels * (255.0 / maxval)).astype(np.uint8)
    return pixels.copy()


def load_gray(path: Union[str, Path], dtype="float32") -> np.ndarray:
    """Read a PGM as floats in [0, 1]."""
    return to_float(read_pgm(path), dtype)
