"""Self-tests: quarter-turn equivariance of the network and gradient checks of every op."""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from src.config import RekdConfig
from src.datagen import RigidPair
from src.equivariant import ChannelPool, CyclicShift, GroupConv, GroupPoolMax, LiftConv
from src.geometry import RotTransform, validity_mask, warp_image
from src.model import RekdModel, output_maps, rotate_output
from src.monitoring import logger
from src.tensor import (
    BatchNormState,
    BilinearResize,
    Conv2d,
    DiffOp,
    GroupBatchNorm,
    ReLU,
    Softmax,
    grad_check,
    relative_error,
)
from src.training import Objective

EQUIVARIANCE_TOLERANCE = 1e-4
GRADIENT_TOLERANCE = 1e-4


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |a - b| / max(max |b|, 1e-12)"""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.abs(expected).max(initial=0.0)), 1e-12)
    return float(np.abs(actual - expected).max(initial=0.0) / scale)


@dataclass
class EquivarianceReport:
    """Worst relative error per map, over every group order and trial."""

    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = EQUIVARIANCE_TOLERANCE

    def record(self, name: str, error: float):
        self.errors[name] = max(self.errors.get(name, 0.0), error)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def quarter_turn_errors(model: RekdModel, img: np.ndarray) -> Dict[str, float]:
    """Relative error of every map between forward(rot90(img)) and the turned, shifted forward(img)."""
    expected = rotate_output(model.forward(img))
    actual = output_maps(model.forward(np.ascontiguousarray(np.rot90(img))))
    return {name: max_relative_error(actual[name], expected[name]) for name in expected}


def equivariance_report(
    group_orders: Sequence[int] = (4, 8, 36),
    trials: int = 20,
    size: int = 32,
    seed: int = 0,
) -> EquivarianceReport:
    """Quarter-turn equivariance of freshly initialised float32 models."""
    report = EquivarianceReport()
    seeds = np.random.SeedSequence(seed).spawn(len(group_orders) * trials)
    for i, order in enumerate(group_orders):
        config = RekdConfig(group_order=order)
        config.check_equivariance_ready()
        for trial in range(trials):
            rng = np.random.default_rng(seeds[i * trials + trial])
            model = RekdModel.initialize(config, seed=int(rng.integers(2**31)))
            img = rng.uniform(0.0, 1.0, (size, size)).astype(np.float32)
            for name, error in quarter_turn_errors(model, img).items():
                report.record(f"G{order}.{name}", error)
    logger.info(
        "equivariance check",
        extra={"worst": report.worst, "passed": report.passed, "orders": list(group_orders)},
    )
    return report


def approximate_equivariance(model: RekdModel, img: np.ndarray, angle_deg: float) -> float:
    """Relative error of K under a rotation that is not a quarter turn.

    Compared on the valid region shrunk by the receptive field of the trunk.
    """
    h, w = img.shape
    transform = RotTransform(float(angle_deg), (w, h), (w, h))
    rotated, mask = warp_image(img.astype(np.float64), transform)
    expected, _ = warp_image(model.forward(img).K.astype(np.float64), transform)
    actual = model.forward(rotated.astype(img.dtype)).K
    margin = model.config.num_layers * (model.config.kernel_size // 2) + 1
    interior = ndimage.binary_erosion(mask, iterations=margin)
    if not interior.any():
        return float("nan")
    return max_relative_error(actual[interior], expected[interior])


@dataclass
class GradientReport:
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = GRADIENT_TOLERANCE

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())


def _away_from_zero(rng: np.random.Generator, shape, gap: float = 1e-2) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + gap)


def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[], DiffOp], List[np.ndarray]]]:
    n = rng.standard_normal
    return [
        ("conv2d", lambda: Conv2d(padding=1), [n((2, 3, 6, 7)), n((4, 3, 3, 3))]),
        ("conv2d.stride2", lambda: Conv2d(padding=2, stride=2), [n((1, 2, 7, 7)), n((3, 2, 5, 5))]),
        ("relu", ReLU, [_away_from_zero(rng, (3, 4, 5))]),
        ("softmax", lambda: Softmax(axis=1), [n((2, 8, 3, 3))]),
        ("bilinear_resize", lambda: BilinearResize(8, 4), [n((2, 5, 7))]),
        (
            "batchnorm.train",
            lambda: GroupBatchNorm(BatchNormState.initial(3, "float64"), training=True),
            [n((2, 4, 3, 5, 5)), n(3), n(3)],
        ),
        (
            "batchnorm.eval",
            lambda: GroupBatchNorm(BatchNormState.initial(3, "float64"), training=False),
            [n((2, 4, 3, 5, 5)), n(3), n(3)],
        ),
        ("lift_conv", lambda: LiftConv(8), [n((1, 1, 9, 9)), n((2, 1, 5, 5))]),
        ("group_conv", lambda: GroupConv(4), [n((1, 4, 2, 7, 7)), n((3, 8, 5, 5))]),
        ("group_pool_max", GroupPoolMax, [n((2, 6, 3, 4, 4))]),
        ("channel_pool.conv", lambda: ChannelPool("conv"), [n((2, 6, 3, 4, 4)), n(3)]),
        ("channel_pool.max", lambda: ChannelPool("max"), [n((2, 6, 3, 4, 4))]),
        ("channel_pool.avg", lambda: ChannelPool("avg"), [n((2, 6, 3, 4, 4))]),
        ("cyclic_shift", lambda: CyclicShift(3, axis=1), [n((2, 8, 3, 3))]),
    ]


def gradient_check_config() -> RekdConfig:
    """Small float64 detector used for end-to-end gradient checks."""
    return RekdConfig(
        group_order=8,
        channels=2,
        num_scales=2,
        window_sizes=[8, 16],
        window_weights=[4.0, 1.0],
        precision="float64",
    )


def synthetic_pair(rng: np.random.Generator, size: int, angle_deg: float) -> RigidPair:
    """Smooth random image and its rotation, float64."""
    img = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (size, size)), 1.5)
    transform = RotTransform.square(angle_deg, size)
    rotated, mask = warp_image(img, transform)
    return RigidPair(img, rotated, transform, mask)


def objective_gradient_error(
    seed: int = 0, probes: int = 5, eps: float = 1e-5, size: int = 32
) -> float:
    """Largest relative error of the end-to-end loss gradient on random weights."""
    rng = np.random.default_rng(seed)
    config = gradient_check_config()
    model = RekdModel.initialize(config, seed=seed)
    objective = Objective(config, [synthetic_pair(rng, size, rng.uniform(-180.0, 180.0))])
    _, grads = objective.evaluate(model)
    objective.freeze()

    names = sorted(model.params)
    worst = 0.0
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        param = model.params[name]
        idx = tuple(int(rng.integers(d)) for d in param.shape)
        original = param[idx]
        param[idx] = original + eps
        plus = objective.evaluate(model, gradients=False)[0].loss_total
        param[idx] = original - eps
        minus = objective.evaluate(model, gradients=False)[0].loss_total
        param[idx] = original
        numeric = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(float(grads[name][idx]), numeric))
    return worst


def gradient_report(seed: int = 0, probes: int = 5) -> GradientReport:
    """grad_check of every op plus the end-to-end objective, all in float64."""
    rng = np.random.default_rng(seed)
    report = GradientReport()
    for name, factory, inputs in _op_cases(rng):
        report.errors[name] = grad_check(factory(), inputs, probes=probes, seed=seed)
    report.errors["total_loss"] = objective_gradient_error(seed, probes)
    logger.info("gradient check", extra={"worst": report.worst, "passed": report.passed})
    return report
