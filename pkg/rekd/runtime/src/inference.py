"""Multi-scale keypoint detection.

An 8-level pyramid with a factor of sqrt(2) between levels is built around the
native image (level 2); levels 0 and 1 are upsampled. Each level runs the
detector, keeps strict local maxima of K and spends its share of the keypoint
budget on the strongest of them.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from src.config import runtime_settings
from src.model import RekdModel, minimum_size
from src.monitoring import logger
from src.tensor import bilinear_resize

LEVELS = 8
NATIVE_LEVEL = 2
NMS_WINDOW = 15
KEYPOINT_HEADER = "REKD-KPTS v1"


@dataclass(frozen=True)
class Keypoint:
    """Oriented keypoint in original image pixels; orientation in degrees."""

    x: float
    y: float
    score: float
    scale: float
    orientation: float


def level_factor(s: int) -> float:
    """Resize factor of pyramid level s: 1 / sqrt(2)**(s - 2)."""
    return math.sqrt(2.0) ** (NATIVE_LEVEL - s)


def level_scale(s: int) -> float:
    return math.sqrt(2.0) ** (s - NATIVE_LEVEL)


def level_shape(height: int, width: int, s: int) -> Tuple[int, int]:
    factor = level_factor(s)
    return int(round(height * factor)), int(round(width * factor))


def scale_pyramid(
    img: np.ndarray, levels: int = LEVELS, min_side: int = NMS_WINDOW
) -> List[Optional[np.ndarray]]:
    """Bilinear pyramid of a [H,W] image; levels with a side below `min_side` are None."""
    height, width = img.shape
    pyramid: List[Optional[np.ndarray]] = []
    for s in range(levels):
        h, w = level_shape(height, width, s)
        if min(h, w) < min_side:
            pyramid.append(None)
        elif (h, w) == (height, width):
            pyramid.append(img)
        else:
            pyramid.append(bilinear_resize(img, h, w))
    return pyramid


def allocation(p: int, levels: int = LEVELS) -> List[int]:
    """Per-level budgets proportional to 2**(2 - s), summing exactly to p.

    Rounding leftovers go to level 0.
    """
    weights = [2.0 ** (NATIVE_LEVEL - s) for s in range(levels)]
    total = sum(weights)
    budget = [int(math.floor(p * w / total + 0.5)) for w in weights]
    budget[0] += p - sum(budget)
    return budget


def allocate_keypoints(p: int, s: int) -> int:
    return allocation(p)[s]


def nms(score: np.ndarray, window: int = NMS_WINDOW) -> Tuple[np.ndarray, np.ndarray]:
    """Strict local maxima of a [H,W] map as (ys, xs), ordered by (score desc, y, x).

    A pixel survives when nothing in its window is larger and every equal
    value comes later in row-major order. A border of window // 2 is excluded.
    """
    h, w = score.shape
    r = window // 2
    finite = np.where(np.isfinite(score), score, -np.inf)
    peak = ndimage.maximum_filter(finite, size=window, mode="constant", cval=-np.inf)
    candidate = (finite == peak) & np.isfinite(finite)
    candidate[:r] = False
    candidate[h - r :] = False
    candidate[:, :r] = False
    candidate[:, w - r :] = False

    ys, xs = [], []
    for y, x in zip(*np.nonzero(candidate)):
        region = finite[y - r : y + r + 1, x - r : x + r + 1]
        first = np.flatnonzero(region == finite[y, x])[0]
        if first == r * window + r:
            ys.append(y)
            xs.append(x)
    ys, xs = np.array(ys, dtype=np.int64), np.array(xs, dtype=np.int64)
    order = np.lexsort((xs, ys, -finite[ys, xs]))
    return ys[order], xs[order]


def to_original(coord: np.ndarray, level_extent: int, extent: int) -> np.ndarray:
    """Pixel-center coordinate on a level mapped to the original image."""
    return (np.asarray(coord, dtype=np.float64) + 0.5) * extent / level_extent - 0.5


def to_level(coord: np.ndarray, extent: int, level_extent: int) -> np.ndarray:
    return (np.asarray(coord, dtype=np.float64) + 0.5) * level_extent / extent - 0.5


def _detect_level(
    model: RekdModel, level_img: np.ndarray, s: int, budget: int, size: Tuple[int, int]
) -> List[Keypoint]:
    out = model.forward(level_img)
    ys, xs = nms(out.K)
    ys, xs = ys[:budget], xs[:budget]
    bins = np.argmax(out.O[:, ys, xs], axis=0)
    height, width = size
    lh, lw = level_img.shape
    px = to_original(xs, lw, width)
    py = to_original(ys, lh, height)
    bin_width = model.config.bin_width
    return [
        Keypoint(
            x=float(px[i]),
            y=float(py[i]),
            score=float(out.K[ys[i], xs[i]]),
            scale=level_scale(s),
            orientation=float(bins[i] * bin_width),
        )
        for i in range(len(ys))
    ]


def sort_keypoints(keypoints: Sequence[Keypoint]) -> List[Keypoint]:
    return sorted(keypoints, key=lambda k: (-k.score, k.y, k.x))


def detect(
    model: RekdModel, img: np.ndarray, p: int, window: int = NMS_WINDOW
) -> List[Keypoint]:
    """Up to p oriented keypoints of a [H,W] grayscale image."""
    budgets = allocation(p)
    min_side = max(window, minimum_size(model.config))
    pyramid = scale_pyramid(img.astype(model.config.dtype, copy=False), LEVELS, min_side)
    jobs = [
        (s, level, budgets[s])
        for s, level in enumerate(pyramid)
        if level is not None and budgets[s] > 0
    ]
    skipped = [s for s, level in enumerate(pyramid) if level is None and budgets[s] > 0]
    if skipped:
        logger.debug("pyramid levels skipped", extra={"levels": skipped})

    with ThreadPoolExecutor(max_workers=runtime_settings.worker_count()) as pool:
        found = pool.map(
            lambda job: _detect_level(model, job[1], job[0], job[2], img.shape), jobs
        )
        keypoints = [kp for level in found for kp in level]
    return sort_keypoints(keypoints)[:p]


def write_keypoints(
    path: Union[str, Path], keypoints: Sequence[Keypoint], width: int, height: int
):
    lines = [f"{KEYPOINT_HEADER} {width} {height} {len(keypoints)}\n"]
    lines += [
        f"{k.x:.6f} {k.y:.6f} {k.score:.6f} {k.scale:.6f} {k.orientation:.6f}\n"
        for k in keypoints
    ]
    Path(path).write_text("".join(lines))


def read_keypoints(path: Union[str, Path]) -> Tuple[List[Keypoint], Tuple[int, int]]:
    """Keypoints and the (width, height) of the image they came from."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    if " ".join(header[:2]) != KEYPOINT_HEADER:
        raise ValueError(f"{path} is not a keypoint file")
    width, height, count = (int(v) for v in header[2:5])
    keypoints = [Keypoint(*(float(v) for v in line.split())) for line in lines[1 : 1 + count]]
    if len(keypoints) != count:
        raise ValueError(f"{path} declares {count} keypoints but holds {len(keypoints)}")
    return keypoints, (width, height)


def keypoint_array(keypoints: Sequence[Keypoint]) -> np.ndarray:
    """[N,2] (x, y) positions"""
    return np.array([[k.x, k.y] for k in keypoints], dtype=np.float64).reshape(-1, 2)
