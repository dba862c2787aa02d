"""Training objectives.

* Orientation alignment: cross-entropy between the histogram map of image a,
  cyclically shifted by the ground-truth angle, and the histogram map of image
  b warped back into frame a, averaged over valid pixels.
* Index proposal: per N x N grid cell, the squared distance between the
  window-softmax coordinate of K_a and the hard argmax coordinate of K_b
  warped into frame a, weighted by the responses of both maps.

Each loss object runs `forward` and then `backward` for the gradients of its
inputs, like the ops in `src.tensor`.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from src.errors import NoValidRegionError, ShapeError
from src.geometry import RotTransform, sample_bilinear, validity_mask, warp_operator
from src.monitoring import logger
from src.tensor import Tensor

LOG_FLOOR = 1e-12


def histogram_shift(angle_deg: float, order: int) -> int:
    """Number of bins a histogram moves under a rotation, rounded half up."""
    return int(math.floor(angle_deg / (360.0 / order) + 0.5)) % order


class OrientationAlignmentLoss:
    """Dense cross-entropy between aligned orientation histograms [|G|,H,W]."""

    def __init__(self, transform: RotTransform, mask: Optional[np.ndarray] = None):
        self.transform = transform
        self.mask = validity_mask(transform.inverse()) if mask is None else mask.astype(bool)

    def forward(self, o_a: Tensor, o_b: Tensor) -> float:
        if o_a.ndim != 3 or o_b.ndim != 3 or o_a.shape[0] != o_b.shape[0]:
            raise ShapeError(f"orientation maps must be [G,H,W], got {o_a.shape} and {o_b.shape}")
        if self.mask.shape != o_a.shape[1:]:
            raise ShapeError(f"mask {self.mask.shape} does not match {o_a.shape}")
        count = int(self.mask.sum())
        if count == 0:
            raise NoValidRegionError("orientation loss mask selects no pixel")
        self._shift = histogram_shift(self.transform.angle_deg, o_a.shape[0])
        self._warp = warp_operator(self.transform.inverse())
        target = np.roll(o_a.astype(np.float64), self._shift, axis=0)
        aligned = self._warp.apply(o_b.astype(np.float64))
        clamped = np.maximum(aligned, LOG_FLOOR)
        self._target, self._aligned, self._clamped = target, aligned, clamped
        self._count = count
        self._dtypes = (o_a.dtype, o_b.dtype)
        per_pixel = -(target * np.log(clamped)).sum(axis=0)
        return float(per_pixel[self.mask].sum() / count)

    def backward(self, grad: float = 1.0) -> Tuple[Tensor, Tensor]:
        scale = grad / self._count
        mask = self.mask[None]
        d_target = np.where(mask, -np.log(self._clamped) * scale, 0.0)
        d_aligned = np.where(
            mask & (self._aligned > LOG_FLOOR), -self._target / self._clamped * scale, 0.0
        )
        d_a = np.roll(d_target, -self._shift, axis=0)
        d_b = self._warp.adjoint(d_aligned)
        return d_a.astype(self._dtypes[0]), d_b.astype(self._dtypes[1])


def orientation_alignment_loss(
    o_a: Tensor, o_b: Tensor, transform: RotTransform, mask: Optional[np.ndarray] = None
) -> float:
    return OrientationAlignmentLoss(transform, mask).forward(o_a, o_b)


@dataclass(frozen=True)
class WindowGrid:
    """Non-overlapping size x size cells; partial cells at the border are dropped."""

    size: int
    height: int
    width: int

    @property
    def rows(self) -> int:
        return self.height // self.size

    @property
    def cols(self) -> int:
        return self.width // self.size

    def __len__(self) -> int:
        return self.rows * self.cols

    def corners(self) -> np.ndarray:
        """[rows, cols, 2] top-left (x, y) corner of every cell."""
        ys, xs = np.mgrid[0 : self.rows, 0 : self.cols] * self.size
        return np.stack([xs, ys], axis=-1)

    def blocks(self, x: np.ndarray) -> np.ndarray:
        """View [H,W] as [rows, cols, size, size] cells."""
        n = self.size
        cropped = x[: self.rows * n, : self.cols * n]
        return cropped.reshape(self.rows, n, self.cols, n).transpose(0, 2, 1, 3)

    def unblocks(self, blocks: np.ndarray) -> np.ndarray:
        """Inverse of `blocks`, zero outside the tiled area."""
        n = self.size
        out = np.zeros((self.height, self.width), dtype=blocks.dtype)
        out[: self.rows * n, : self.cols * n] = blocks.transpose(0, 2, 1, 3).reshape(
            self.rows * n, self.cols * n
        )
        return out


def window_softmax(k_map: Tensor, size: int) -> np.ndarray:
    """Softmax of K over every cell of the size x size grid: [rows, cols, N, N]."""
    grid = WindowGrid(size, *k_map.shape)
    if len(grid) == 0:
        return np.zeros((grid.rows, grid.cols, size, size))
    cells = grid.blocks(k_map.astype(np.float64))
    shifted = cells - cells.max(axis=(2, 3), keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=(2, 3), keepdims=True)


def soft_coordinates(maps: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Expected (x, y) of each cell under its window map, in image coordinates."""
    n = maps.shape[-1]
    offsets = np.arange(n, dtype=np.float64)
    x = (maps.sum(axis=-2) * offsets).sum(axis=-1)
    y = (maps.sum(axis=-1) * offsets).sum(axis=-1)
    return np.stack([x, y], axis=-1) + corners


def response(k_map: Tensor) -> np.ndarray:
    """Non-negative response map used for the proposal weights"""
    k = k_map.astype(np.float64)
    return k - k.min()


@dataclass
class _ProposalPlan:
    """Per-step constants of the index-proposal loss"""

    cells: np.ndarray  # [n, 2] (row, col) of surviving cells
    hard: np.ndarray  # [n, 2] (x, y) in frame a
    weights: np.ndarray  # [n] normalised alpha


class IndexProposalLoss:
    """Distance between soft proposals on K_a and hard argmaxes of K_b, one window size."""

    def __init__(
        self, transform: RotTransform, size: int, mask: Optional[np.ndarray] = None
    ):
        self.transform = transform
        self.size = size
        self.mask = validity_mask(transform.inverse()) if mask is None else mask.astype(bool)
        self.frozen = False
        self._plan: Optional[_ProposalPlan] = None

    def freeze(self):
        """Reuse the current hard coordinates and weights on later forwards."""
        self.frozen = True

    def _make_plan(self, k_a: Tensor, k_b: Tensor, soft: np.ndarray, grid: WindowGrid):
        r_b = response(k_b)
        warped = warp_operator(self.transform.inverse()).apply(r_b)
        warped = np.where(self.mask, warped, -np.inf)
        cells = grid.blocks(warped).reshape(grid.rows, grid.cols, -1)
        valid = np.isfinite(cells).any(axis=-1)
        index = np.argmax(cells, axis=-1)
        rows, cols = np.nonzero(valid)
        flat = index[rows, cols]
        corners = grid.corners()[rows, cols]
        hard = np.stack([flat % self.size, flat // self.size], axis=-1) + corners

        alpha = sample_bilinear(response(k_a), soft[rows, cols, 0], soft[rows, cols, 1])
        in_b = self.transform.apply(hard)
        alpha = alpha + sample_bilinear(r_b, in_b[:, 0], in_b[:, 1])
        total = alpha.sum()
        if total > 0:
            weights = alpha / total
        else:
            weights = np.full(len(rows), 1.0 / max(len(rows), 1))
        return _ProposalPlan(np.stack([rows, cols], axis=-1), hard.astype(np.float64), weights)

    def forward(self, k_a: Tensor, k_b: Tensor) -> float:
        if k_a.ndim != 2 or k_b.ndim != 2:
            raise ShapeError(f"score maps must be [H,W], got {k_a.shape} and {k_b.shape}")
        grid = WindowGrid(self.size, *k_a.shape)
        self._grid = grid
        self._dtypes = (k_a.dtype, k_b.dtype)
        self._shape_b = k_b.shape
        maps = window_softmax(k_a, self.size)
        soft = soft_coordinates(maps, grid.corners()) if len(grid) else np.zeros((0, 0, 2))
        if self._plan is None or not self.frozen:
            self._plan = self._make_plan(k_a, k_b, soft, grid) if len(grid) else None
        plan = self._plan
        if plan is None or len(plan.weights) == 0:
            logger.warning(
                "no window survives the validity mask", extra={"window": self.size}
            )
            self._maps = None
            return 0.0
        rows, cols = plan.cells[:, 0], plan.cells[:, 1]
        self._maps = maps[rows, cols]
        self._soft = soft[rows, cols]
        diff = self._soft - plan.hard
        return float((plan.weights * (diff**2).sum(axis=-1)).sum())

    def backward(self, grad: float = 1.0) -> Tuple[Tensor, Tensor]:
        d_b = np.zeros(self._shape_b, dtype=self._dtypes[1])
        blocks = np.zeros((self._grid.rows, self._grid.cols, self.size, self.size))
        if self._maps is not None:
            plan = self._plan
            d_soft = 2.0 * grad * plan.weights[:, None] * (self._soft - plan.hard)
            offsets = np.arange(self.size, dtype=np.float64)
            corner_xy = self._grid.corners()[plan.cells[:, 0], plan.cells[:, 1]].astype(
                np.float64
            )
            xs = corner_xy[:, 0, None, None] + offsets[None, None, :]
            ys = corner_xy[:, 1, None, None] + offsets[None, :, None]
            local = d_soft[:, 0, None, None] * (xs - self._soft[:, 0, None, None])
            local = local + d_soft[:, 1, None, None] * (ys - self._soft[:, 1, None, None])
            blocks[plan.cells[:, 0], plan.cells[:, 1]] = self._maps * local
        d_a = self._grid.unblocks(blocks).astype(self._dtypes[0])
        return d_a, d_b


def ip_loss(
    k_a: Tensor,
    k_b: Tensor,
    transform: RotTransform,
    size: int,
    mask: Optional[np.ndarray] = None,
) -> float:
    return IndexProposalLoss(transform, size, mask).forward(k_a, k_b)


class KeypointLoss:
    """Weighted index-proposal losses over window sizes, in both directions."""

    def __init__(
        self,
        transform: RotTransform,
        sizes: Sequence[int],
        weights: Sequence[float],
    ):
        if len(sizes) != len(weights):
            raise ValueError("every window size needs a weight")
        self.weights = list(weights)
        self.terms: List[Tuple[IndexProposalLoss, IndexProposalLoss]] = [
            (IndexProposalLoss(transform, n), IndexProposalLoss(transform.inverse(), n))
            for n in sizes
        ]

    def freeze(self):
        for forward_term, switched_term in self.terms:
            forward_term.freeze()
            switched_term.freeze()

    def forward(self, k_a: Tensor, k_b: Tensor) -> float:
        total = 0.0
        for weight, (ab, ba) in zip(self.weights, self.terms):
            total += weight * (ab.forward(k_a, k_b) + ba.forward(k_b, k_a))
        return total

    def backward(self, grad: float = 1.0) -> Tuple[Tensor, Tensor]:
        d_a, d_b = None, None
        for weight, (ab, ba) in zip(self.weights, self.terms):
            da_1, db_1 = ab.backward(grad * weight)
            db_2, da_2 = ba.backward(grad * weight)
            level_a, level_b = da_1 + da_2, db_1 + db_2
            d_a = level_a if d_a is None else d_a + level_a
            d_b = level_b if d_b is None else d_b + level_b
        return d_a, d_b


def keypoint_loss(
    k_a: Tensor,
    k_b: Tensor,
    transform: RotTransform,
    sizes: Sequence[int] = (8, 16, 24, 32, 40),
    weights: Sequence[float] = (256.0, 64.0, 16.0, 4.0, 1.0),
) -> float:
    return KeypointLoss(transform, sizes, weights).forward(k_a, k_b)


def total_loss(l_ori: float, l_kpts: float, beta: float = 100.0) -> float:
    return beta * l_ori + l_kpts
