"""Rotation-equivariant layers over the cyclic group C_N.

Group features are laid out [B, |G|, C, H, W] (or [|G|, C, H, W] unbatched).
Learnable kernels are stored once; their rotated copies are linear images of
the base kernel under cached [|G|, k*k, k*k] resampling matrices, so gradients
of every copy flow back into the one base kernel.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from src.errors import ShapeError
from src.geometry import RotTransform, warp_operator
from src.tensor import Conv2d, DiffOp, Tensor


@dataclass(frozen=True)
class CyclicGroup:
    """Rotations by multiples of 360/order degrees"""

    order: int

    def __post_init__(self):
        if self.order < 1:
            raise ShapeError(f"group order must be positive, got {self.order}")

    @property
    def bin_width(self) -> float:
        return 360.0 / self.order

    def angle(self, g: int) -> float:
        return (g % self.order) * self.bin_width

    @property
    def has_quarter_turn(self) -> bool:
        return self.order % 4 == 0

    @property
    def quarter(self) -> int:
        """Group element of a 90 degree turn"""
        if not self.has_quarter_turn:
            raise ShapeError(f"90 degrees is not an element of C_{self.order}")
        return self.order // 4


def _resampling_matrix(size: int, angle_deg: float) -> np.ndarray:
    return warp_operator(RotTransform.square(angle_deg, size)).matrix.toarray()


@lru_cache(maxsize=32)
def _rotation_matrices(order: int, size: int) -> np.ndarray:
    group = CyclicGroup(order)
    mats = np.empty((order, size * size, size * size), dtype=np.float64)
    if group.has_quarter_turn:
        # g = q*|G|/4 + r: resample by r, then turn q exact quarters
        for g in range(order):
            q, r = divmod(g, group.quarter)
            base = _resampling_matrix(size, group.angle(r)).reshape(size, size, -1)
            mats[g] = np.rot90(base, q, axes=(0, 1)).reshape(size * size, -1)
    else:
        for g in range(order):
            mats[g] = _resampling_matrix(size, group.angle(g))
    mats.setflags(write=False)
    return mats


def rotation_matrices(order: int, size: int) -> np.ndarray:
    """[|G|, k*k, k*k] maps taking a flattened kernel to its rotated copies."""
    if size % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {size}")
    return _rotation_matrices(order, size)


def rotate_bank(base: Tensor, order: int) -> Tensor:
    """All |G| rotated copies of [..., k, k] kernels, stacked on a new leading axis."""
    k = base.shape[-1]
    if base.shape[-2] != k:
        raise ShapeError(f"kernels must be square, got {base.shape}")
    mats = rotation_matrices(order, k).astype(base.dtype)
    flat = base.reshape(-1, k * k)
    out = np.tensordot(mats, flat, axes=([2], [1]))  # [G, k*k, N]
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape((order,) + base.shape)


def rotate_bank_adjoint(grad: Tensor, order: int) -> Tensor:
    """Sum of the gradients of every rotated copy, pulled back to the base kernel."""
    k = grad.shape[-1]
    mats = rotation_matrices(order, k).astype(grad.dtype)
    flat = grad.reshape(order, -1, k * k)
    out = np.einsum("gpq,gnp->nq", mats, flat)
    return out.reshape(grad.shape[1:])


def rotate_kernel(kernel: Tensor, g: int, order: int) -> Tensor:
    """Kernel rotated by group element g, zero outside the k x k support."""
    k = kernel.shape[-1]
    mat = rotation_matrices(order, k)[g % order].astype(kernel.dtype)
    return (mat @ kernel.reshape(k * k)).reshape(k, k)


def _batched(x: Tensor, rank: int) -> Tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return x[None], False
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got {x.shape}")
    return x, True


class LiftConv(DiffOp):
    """[B,Cin,H,W] image to [B,|G|,Cout,H,W] by convolving with every rotated kernel."""

    def __init__(self, order: int, padding: Optional[int] = None):
        self.order = order
        self.padding = padding

    def forward(self, x: Tensor, base: Tensor) -> Tensor:
        x, self._was_batched = _batched(x, 4)
        cout, cin, k, _ = base.shape
        if x.shape[1] != cin:
            raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {cin}")
        padding = (k - 1) // 2 if self.padding is None else self.padding
        bank = rotate_bank(base, self.order).reshape(self.order * cout, cin, k, k)
        self._conv = Conv2d(padding)
        out = self._conv.forward(x, bank)
        b, _, h, w = out.shape
        out = out.reshape(b, self.order, cout, h, w)
        return out if self._was_batched else out[0]

    def backward(self, grad: Tensor) -> Tuple[Tensor, Tensor]:
        g, _ = _batched(grad, 5)
        b, order, cout, h, w = g.shape
        dx, dbank = self._conv.backward(g.reshape(b, order * cout, h, w))
        dbase = rotate_bank_adjoint(dbank.reshape((order, cout) + dbank.shape[1:]), order)
        return (dx if self._was_batched else dx[0]), dbase


class GroupConv(DiffOp):
    """Convolution on the group: [B,|G|,Cin,H,W] to [B,|G|,Cout,H,W].

    out[g, c] = sum_h sum_ci conv(x[h, ci], rot_g(base[c, ((h - g) mod |G|) * Cin + ci]))
    """

    def __init__(self, order: int, padding: Optional[int] = None):
        self.order = order
        self.padding = padding

    def _expand(self, base: Tensor, cin: int) -> Tensor:
        order = self.order
        cout, _, k, _ = base.shape
        rotated = rotate_bank(base, order).reshape(order, cout, order, cin, k, k)
        full = np.empty_like(rotated)
        for g in range(order):
            full[g] = np.roll(rotated[g], g, axis=1)
        return full.reshape(order * cout, order * cin, k, k)

    def forward(self, x: Tensor, base: Tensor) -> Tensor:
        x, self._was_batched = _batched(x, 5)
        b, order, cin, h, w = x.shape
        cout, kin, k, _ = base.shape
        if order != self.order or kin != order * cin:
            raise ShapeError(
                f"group conv of order {self.order} cannot take input {x.shape} with kernel {base.shape}"
            )
        padding = (k - 1) // 2 if self.padding is None else self.padding
        self._conv = Conv2d(padding)
        self._cin = cin
        out = self._conv.forward(x.reshape(b, order * cin, h, w), self._expand(base, cin))
        out = out.reshape(b, order, cout, out.shape[-2], out.shape[-1])
        return out if self._was_batched else out[0]

    def backward(self, grad: Tensor) -> Tuple[Tensor, Tensor]:
        g, _ = _batched(grad, 5)
        b, order, cout, h, w = g.shape
        dx, dfull = self._conv.backward(g.reshape(b, order * cout, h, w))
        k = dfull.shape[-1]
        dfull = dfull.reshape(order, cout, order, self._cin, k, k)
        drotated = np.empty_like(dfull)
        for r in range(order):
            drotated[r] = np.roll(dfull[r], -r, axis=1)
        drotated = drotated.reshape(order, cout, order * self._cin, k, k)
        dbase = rotate_bank_adjoint(drotated, order)
        dx = dx.reshape(b, order, self._cin, dx.shape[-2], dx.shape[-1])
        return (dx if self._was_batched else dx[0]), dbase


class GroupPoolMax(DiffOp):
    """Max over the group axis; ties go to the lowest group index."""

    def forward(self, x: Tensor) -> Tensor:
        x, self._was_batched = _batched(x, 5)
        self._shape = x.shape
        self._index = np.argmax(x, axis=1)
        out = np.take_along_axis(x, self._index[:, None], axis=1)[:, 0]
        return out if self._was_batched else out[0]

    def backward(self, grad: Tensor) -> Tuple[Tensor]:
        g, _ = _batched(grad, 4)
        dx = np.zeros(self._shape, dtype=g.dtype)
        np.put_along_axis(dx, self._index[:, None], g[:, None], axis=1)
        return (dx if self._was_batched else dx[0],)


class ChannelPool(DiffOp):
    """Collapse the channels of each group element into one orientation histogram.

    `conv` is a 1x1 group convolution with one shared weight vector; `max` and
    `avg` take no weight.
    """

    modes = ("conv", "max", "avg")

    def __init__(self, mode: str = "conv"):
        if mode not in self.modes:
            raise ValueError(f"unknown channel pooling {mode!r}")
        self.mode = mode

    def forward(self, x: Tensor, *weight: Tensor) -> Tensor:
        x, self._was_batched = _batched(x, 5)
        self._x = x
        if self.mode == "conv":
            (w,) = weight
            if w.shape != (x.shape[2],):
                raise ShapeError(f"channel pool weight {w.shape} does not match {x.shape}")
            self._w = w
            out = np.tensordot(x, w, axes=([2], [0]))
        elif self.mode == "max":
            self._index = np.argmax(x, axis=2)
            out = np.take_along_axis(x, self._index[:, :, None], axis=2)[:, :, 0]
        else:
            out = x.mean(axis=2)
        return out if self._was_batched else out[0]

    def backward(self, grad: Tensor) -> Tuple[Tensor, ...]:
        g, _ = _batched(grad, 4)
        x = self._x
        if self.mode == "conv":
            dx = g[:, :, None] * self._w[None, None, :, None, None]
            dw = np.einsum("bghw,bgchw->c", g, x)
            grads: Tuple[Tensor, ...] = (dx, dw)
        elif self.mode == "max":
            dx = np.zeros_like(x, dtype=g.dtype)
            np.put_along_axis(dx, self._index[:, :, None], g[:, :, None], axis=2)
            grads = (dx,)
        else:
            dx = np.broadcast_to(g[:, :, None] / x.shape[2], x.shape).copy()
            grads = (dx,)
        if not self._was_batched:
            grads = (grads[0][0],) + grads[1:]
        return grads


class CyclicShift(DiffOp):
    """out[g] = x[(g - k) mod |G|] along `axis`."""

    def __init__(self, k: int, axis: int = 0):
        self.k = k
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return np.roll(x, self.k, axis=self.axis)

    def backward(self, grad: Tensor) -> Tuple[Tensor]:
        return (np.roll(grad, -self.k, axis=self.axis),)


def lift_conv(img: Tensor, base: Tensor, order: int, padding: Optional[int] = None) -> Tensor:
    return LiftConv(order, padding)(img, base)


def group_conv(x: Tensor, base: Tensor, order: int, padding: Optional[int] = None) -> Tensor:
    return GroupConv(order, padding)(x, base)


def group_pool_max(x: Tensor) -> Tensor:
    return GroupPoolMax()(x)


def channel_pool(x: Tensor, weight: Optional[Tensor] = None, mode: str = "conv") -> Tensor:
    if mode == "conv":
        return ChannelPool(mode)(x, weight)
    return ChannelPool(mode)(x)


def cyclic_shift(x: Tensor, k: int, axis: int = 0) -> Tensor:
    return CyclicShift(k, axis)(x)
