"""In-plane rotations of images and points, and the masks of their valid regions.

Integer coordinates are pixel centers. A `RotTransform` rotates frame a into
frame b about the image centers ((W-1)/2, (H-1)/2):

    p_b = R(angle) (p_a - c_a) + c_b,   R = [[cos, sin], [-sin, cos]]

which is counter-clockwise on screen with y pointing down. Images are warped by
inverse mapping with bilinear sampling; reads outside the source are zero.
"""
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
import scipy.sparse
from src.errors import ShapeError

Size = Tuple[int, int]  # (width, height)

MASK_THRESHOLD = 0.999


def snapped_trig(angle_deg: float) -> Tuple[float, float]:
    """cos and sin of an angle in degrees, exact at multiples of 90."""
    quarter = angle_deg / 90.0
    if quarter == math.floor(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(quarter) % 4]
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


def center(size: Size) -> np.ndarray:
    w, h = size
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


@dataclass(frozen=True)
class RotTransform:
    """Rotation by `angle_deg` from a `src_size` frame into a `dst_size` frame."""

    angle_deg: float
    src_size: Size
    dst_size: Size

    @classmethod
    def square(cls, angle_deg: float, size: int) -> "RotTransform":
        return cls(float(angle_deg), (size, size), (size, size))

    @classmethod
    def identity(cls, size: Size) -> "RotTransform":
        return cls(0.0, tuple(size), tuple(size))

    def matrix(self) -> np.ndarray:
        c, s = snapped_trig(self.angle_deg)
        return np.array([[c, s], [-s, c]])

    def inverse(self) -> "RotTransform":
        return RotTransform(-self.angle_deg, self.dst_size, self.src_size)

    def compose(self, other: "RotTransform") -> "RotTransform":
        """The transform applying `self` first and then `other`."""
        if tuple(other.src_size) != tuple(self.dst_size):
            raise ShapeError("composed transforms do not share a frame")
        return RotTransform(self.angle_deg + other.angle_deg, self.src_size, other.dst_size)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map [N,2] (x, y) points from the source frame into the destination frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        c, s = snapped_trig(self.angle_deg)
        # p + (R - I)(p - c_src) + (c_dst - c_src): a zero rotation between equal frames adds nothing
        d = pts - center(self.src_size)
        out = pts + (center(self.dst_size) - center(self.src_size))
        out[:, 0] += (c - 1.0) * d[:, 0] + s * d[:, 1]
        out[:, 1] += -s * d[:, 0] + (c - 1.0) * d[:, 1]
        return out

    def source_of(self, points: np.ndarray) -> np.ndarray:
        """Inverse mapping: source-frame positions of destination points."""
        return self.inverse().apply(points)


def bilinear_taps(
    xs: np.ndarray, ys: np.ndarray, shape: Tuple[int, int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nonzero bilinear taps of sample points on an [H,W] grid.

    Returns (sample index, flat pixel index, weight). Taps outside the grid are
    dropped, which reads them as zero.
    """
    h, w = shape
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    sample = np.arange(xs.size)
    rows, cols, weights = [], [], []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            weight = wx * wy
            keep = (weight != 0) & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            rows.append(sample[keep])
            cols.append((yi[keep] * w + xi[keep]).astype(np.int64))
            weights.append(weight[keep])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(weights)


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of [H,W] `img` at (xs, ys); zero outside the image."""
    xs = np.asarray(xs, dtype=np.float64)
    rows, cols, weights = bilinear_taps(xs, ys, img.shape[-2:])
    out = np.zeros(xs.size, dtype=np.float64)
    np.add.at(out, rows, weights * img.reshape(-1)[cols])
    return out.reshape(xs.shape)


class WarpOperator:
    """A warp as a sparse [dst pixels, src pixels] sampling matrix.

    `apply` warps any [..., H, W] stack; `adjoint` carries gradients back.
    """

    def __init__(self, transform: RotTransform):
        self.transform = transform
        ws, hs = transform.src_size
        wd, hd = transform.dst_size
        self.src_shape = (hs, ws)
        self.dst_shape = (hd, wd)
        yy, xx = np.mgrid[0:hd, 0:wd]
        dst = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
        src = transform.source_of(dst)
        rows, cols, weights = bilinear_taps(src[:, 0], src[:, 1], self.src_shape)
        self.matrix = scipy.sparse.csr_matrix(
            (weights, (rows, cols)), shape=(hd * wd, hs * ws)
        )
        self.matrix.sum_duplicates()

    def _check(self, x: np.ndarray, shape: Tuple[int, int]):
        if x.shape[-2:] != shape:
            raise ShapeError(f"expected [..., {shape[0]}, {shape[1]}], got {x.shape}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check(x, self.src_shape)
        flat = x.reshape(-1, self.src_shape[0] * self.src_shape[1])
        out = (self.matrix @ flat.T).T
        return np.ascontiguousarray(out).astype(x.dtype).reshape(x.shape[:-2] + self.dst_shape)

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        self._check(grad, self.dst_shape)
        flat = grad.reshape(-1, self.dst_shape[0] * self.dst_shape[1])
        out = (self.matrix.T @ flat.T).T
        return np.ascontiguousarray(out).astype(grad.dtype).reshape(grad.shape[:-2] + self.src_shape)


@lru_cache(maxsize=64)
def warp_operator(transform: RotTransform) -> WarpOperator:
    """Cached sampling operator of `transform`."""
    return WarpOperator(transform)


@lru_cache(maxsize=64)
def _mask(transform: RotTransform) -> np.ndarray:
    ones = np.ones(warp_operator(transform).src_shape, dtype=np.float64)
    mask = warp_operator(transform).apply(ones) >= MASK_THRESHOLD
    mask.setflags(write=False)
    return mask


def validity_mask(transform: RotTransform) -> np.ndarray:
    """Destination pixels whose source sample lies inside the source image."""
    return _mask(transform).copy()


def warp_image(img: np.ndarray, transform: RotTransform) -> Tuple[np.ndarray, np.ndarray]:
    """Warp a [..., H, W] image into the destination frame; returns (image, mask)."""
    return warp_operator(transform).apply(img), validity_mask(transform)


def warp_points(points: np.ndarray, transform: RotTransform) -> np.ndarray:
    return transform.apply(points)


def inside(points: np.ndarray, size: Size) -> np.ndarray:
    """Which [N,2] points fall on the pixel grid of a `size` image."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    w, h = size
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)
