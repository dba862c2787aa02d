"""Dense tensors and the differentiable ops the detector is built from.

Tensors are plain row-major numpy arrays (float32 for training and inference,
float64 for gradient checks). Every op is a `DiffOp`: `forward` caches what
`backward` needs and `backward` maps the upstream gradient to one gradient per
forward input. A fresh op instance is created for every use, so a frozen model
can serve concurrent forward passes.
"""
import abc
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from src.config import runtime_settings
from src.errors import NumericalError, ShapeError

Tensor = np.ndarray


def check_finite(x: Tensor, name: str):
    """Raise if `x` holds a NaN or an Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {name}")


class DiffOp(metaclass=abc.ABCMeta):
    """An op with a forward pass and an analytically derived backward pass."""

    def __call__(self, *inputs: Tensor) -> Tensor:
        """Run forward, checking the output in debug mode."""
        out = self.forward(*inputs)
        if runtime_settings.debug:
            check_finite(out, type(self).__name__)
        return out

    @abc.abstractmethod
    def forward(self, *inputs: Tensor) -> Tensor:
        """Compute the output and cache what backward needs."""
        raise NotImplementedError

    @abc.abstractmethod
    def backward(self, grad: Tensor) -> Tuple[Tensor, ...]:
        """Gradients with respect to each forward input, in order."""
        raise NotImplementedError


class Conv2d(DiffOp):
    """Zero-padded 2D cross-correlation of [N,Cin,H,W] (or [Cin,H,W]) inputs."""

    def __init__(self, padding: int = 0, stride: int = 1):
        if padding < 0:
            raise ShapeError(f"padding must be >= 0, got {padding}")
        if stride < 1:
            raise ShapeError(f"stride must be >= 1, got {stride}")
        self.padding = padding
        self.stride = stride

    def _window(self, i: int, j: int) -> Tuple[slice, ...]:
        s = self.stride
        return (
            slice(None),
            slice(None),
            slice(i, i + s * (self._out_h - 1) + 1, s),
            slice(j, j + s * (self._out_w - 1) + 1, s),
        )

    def forward(self, x: Tensor, kernel: Tensor) -> Tensor:
        self._batched = x.ndim == 4
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or kernel.ndim != 4:
            raise ShapeError(
                f"conv2d expects [N,Cin,H,W] and [Cout,Cin,k,k], got {x.shape} and {kernel.shape}"
            )
        _, cin, h, w = x.shape
        cout, kin, kh, kw = kernel.shape
        if kin != cin:
            raise ShapeError(f"input has {cin} channels but kernel expects {kin}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        p = self.padding
        self._out_h = (h + 2 * p - kh) // self.stride + 1
        self._out_w = (w + 2 * p - kw) // self.stride + 1
        if h + 2 * p < kh or w + 2 * p < kw or self._out_h <= 0 or self._out_w <= 0:
            raise ShapeError(f"conv2d output extent is not positive for input {x.shape}")

        dtype = np.result_type(x, kernel)
        xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (p, p), (p, p)))
        kernel = kernel.astype(dtype, copy=False)
        out = np.zeros((cout, x.shape[0], self._out_h, self._out_w), dtype=dtype)
        # Fixed offset order keeps the accumulation deterministic.
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(
                    kernel[:, :, i, j], xp[self._window(i, j)], axes=([1], [1])
                )
        self._xp = xp
        self._kernel = kernel
        self._in_shape = (h, w)
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        return out if self._batched else out[0]

    def backward(self, grad: Tensor) -> Tuple[Tensor, Tensor]:
        g = grad if self._batched else grad[None]
        g = g.astype(self._xp.dtype, copy=False)
        kernel = self._kernel
        dxp = np.zeros_like(self._xp)
        dkernel = np.zeros_like(kernel)
        for i in range(kernel.shape[2]):
            for j in range(kernel.shape[3]):
                window = self._window(i, j)
                dkernel[:, :, i, j] = np.tensordot(
                    g, self._xp[window], axes=([0, 2, 3], [0, 2, 3])
                )
                dxp[window] += np.tensordot(
                    kernel[:, :, i, j], g, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
        p = self.padding
        h, w = self._in_shape
        dx = dxp[:, :, p : p + h, p : p + w]
        if not self._batched:
            dx = dx[0]
        return np.ascontiguousarray(dx), dkernel


class ReLU(DiffOp):
    def forward(self, x: Tensor) -> Tensor:
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad: Tensor) -> Tuple[Tensor]:
        return (np.where(self._mask, grad, np.zeros((), dtype=grad.dtype)),)


class Softmax(DiffOp):
    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        shifted = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self._out = e / e.sum(axis=self.axis, keepdims=True)
        return self._out

    def backward(self, grad: Tensor) -> Tuple[Tensor]:
        s = self._out
        inner = (grad * s).sum(axis=self.axis, keepdims=True)
        return (s * (grad - inner),)


@lru_cache(maxsize=256)
def _interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row r holds the bilinear weights of output sample r (pixel-center convention)."""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    matrix.setflags(write=False)
    return matrix


def interpolation_matrix(n_out: int, n_in: int, dtype="float64") -> np.ndarray:
    """Linear map resizing one axis from `n_in` to `n_out` samples."""
    if n_out < 1 or n_in < 1:
        raise ShapeError(f"resize extents must be >= 1, got {n_in}->{n_out}")
    return _interpolation_matrix(n_out, n_in).astype(dtype)


class BilinearResize(DiffOp):
    """Resize the last two axes with align-corners-false bilinear sampling."""

    def __init__(self, height: int, width: int):
        if height < 1 or width < 1:
            raise ShapeError(f"target extents must be >= 1, got {height}x{width}")
        self.height = height
        self.width = width

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2:
            raise ShapeError(f"bilinear_resize expects [...,H,W], got {x.shape}")
        self._ry = interpolation_matrix(self.height, x.shape[-2], x.dtype)
        self._rx = interpolation_matrix(self.width, x.shape[-1], x.dtype)
        return self._ry @ x @ self._rx.T

    def backward(self, grad: Tensor) -> Tuple[Tensor]:
        return (self._ry.T @ grad @ self._rx,)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer"""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype="float32") -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def _pooled_channel_sum(x: Tensor) -> Tensor:
    """Per-channel sum of [B,|G|,C,H,W] that does not depend on the order of the group axis."""
    partial = x.sum(axis=(0, 3, 4))
    return np.sort(partial, axis=0).sum(axis=0)


class GroupBatchNorm(DiffOp):
    """Batch norm on [B,|G|,C,H,W] with statistics shared across the group axis."""

    _axes = (0, 1, 3, 4)

    def __init__(
        self,
        state: BatchNormState,
        training: bool,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        self.state = state
        self.training = training
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        if x.ndim != 5 or gamma.shape != (x.shape[2],) or beta.shape != gamma.shape:
            raise ShapeError(
                f"batchnorm_group expects [B,G,C,H,W] and [C] params, got {x.shape}, {gamma.shape}"
            )
        shape = (1, 1, x.shape[2], 1, 1)
        count = x.size // x.shape[2]
        if self.training:
            mean = _pooled_channel_sum(x) / count
            centered = x - mean.reshape(shape)
            var = _pooled_channel_sum(centered * centered) / count
            m = self.momentum
            unbiased = var * (count / max(count - 1, 1))
            self.state.running_mean[...] = (1 - m) * self.state.running_mean + m * mean
            self.state.running_var[...] = (1 - m) * self.state.running_var + m * unbiased
        else:
            mean = self.state.running_mean.astype(x.dtype)
            var = self.state.running_var.astype(x.dtype)
            centered = x - mean.reshape(shape)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        self._xhat = centered * inv_std.reshape(shape)
        self._inv_std = inv_std
        self._gamma = gamma
        self._count = count
        self._shape = shape
        return gamma.reshape(shape) * self._xhat + beta.reshape(shape)

    def backward(self, grad: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        xhat, shape = self._xhat, self._shape
        dgamma = (grad * xhat).sum(axis=self._axes)
        dbeta = grad.sum(axis=self._axes)
        dxhat = grad * self._gamma.reshape(shape)
        inv_std = self._inv_std.reshape(shape)
        if self.training:
            n = self._count
            dx = (inv_std / n) * (
                n * dxhat
                - dxhat.sum(axis=self._axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=self._axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation."""
    return Conv2d(padding, stride)(x, kernel)


def relu(x: Tensor) -> Tensor:
    return ReLU()(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax(axis)(x)


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    return BilinearResize(height, width)(x)


def batchnorm_group(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool = False,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return GroupBatchNorm(state, training, momentum, eps)(x, gamma, beta)


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(1e-8, |a| + |n|)"""
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    op: DiffOp,
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    probes: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between `op.backward` and central differences.

    The output is reduced to a scalar with a fixed random projection. With
    `probes`, that many random coordinates of every input are checked instead
    of all of them.
    """
    inputs = [np.array(x, copy=True) for x in inputs]
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit mode; pass float64 inputs")
    rng = np.random.default_rng(seed)
    out = op.forward(*inputs)
    projection = rng.standard_normal(out.shape)
    analytic = op.backward(projection)

    worst = 0.0
    for x, dx in zip(inputs, analytic):
        if probes is None:
            coords = list(np.ndindex(x.shape))
        else:
            flat = rng.choice(x.size, size=min(probes, x.size), replace=False)
            coords = [np.unravel_index(i, x.shape) for i in flat]
        for c in coords:
            original = x[c]
            x[c] = original + eps
            plus = float(np.sum(projection * op.forward(*inputs)))
            x[c] = original - eps
            minus = float(np.sum(projection * op.forward(*inputs)))
            x[c] = original
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(float(dx[c]), numeric))
    return worst
