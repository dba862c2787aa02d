"""Detector, synthesis and runtime settings."""

import math
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import AliasChoices, Field, field_validator, model_validator
from pydantic_settings import BaseSettings
from typing_extensions import Annotated
from src.errors import ShapeError


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class TextSerializable(BaseSettings):
    """Settings that round-trip through plain `key=value` lines."""

    def to_text(self) -> str:
        """Serialize every field, one `key=value` per line, in declaration order"""
        return "".join(
            f"{name}={_format_value(getattr(self, name))}\n"
            for name in type(self).model_fields
        )

    @classmethod
    def from_text(cls, text: str):
        """Parse the output of `to_text`; unknown keys are ignored."""
        values: Dict[str, Any] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            field = cls.model_fields.get(key.strip())
            if field is None:
                continue
            origin = getattr(field.annotation, "__origin__", None)
            if origin in (list, tuple):
                values[key.strip()] = [v for v in raw.split(",") if v != ""]
            else:
                values[key.strip()] = raw
        return cls(**values)


class RekdConfig(TextSerializable):
    """Network, loss and training configuration"""

    group_order: Annotated[
        int, Field(description="Order |G| of the cyclic rotation group")
    ] = 36
    channels: Annotated[
        int, Field(description="Channels C assigned to each group element")
    ] = 2
    num_layers: Annotated[
        int, Field(description="Number of equivariant conv-bn-relu layers")
    ] = 3
    kernel_size: Annotated[int, Field(description="Spatial kernel extent")] = 5
    padding: Annotated[int, Field(description="Zero padding of every layer")] = 2
    num_scales: Annotated[
        int, Field(description="Depth of the internal scale-space")
    ] = 3
    scale_factor: Annotated[
        float, Field(description="Resize factor between internal scales")
    ] = 1.0 / math.sqrt(2.0)
    channel_pooling: Annotated[
        Literal["conv", "max", "avg"],
        Field(description="How channels collapse into the orientation histogram"),
    ] = "conv"

    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 20
    lr_decay: Annotated[
        float, Field(description="Multiplicative learning-rate decay")
    ] = 0.5
    lr_decay_every: Annotated[
        int, Field(description="Epochs between learning-rate decays")
    ] = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    beta: Annotated[
        float, Field(description="Weight of the orientation loss in the total loss")
    ] = 100.0
    window_sizes: Annotated[
        List[int], Field(description="Index-proposal window sizes N_l")
    ] = [8, 16, 24, 32, 40]
    window_weights: Annotated[
        List[float], Field(description="Index-proposal level weights lambda_l")
    ] = [256.0, 64.0, 16.0, 4.0, 1.0]
    use_orientation_loss: bool = True
    use_keypoint_loss: bool = True

    precision: Annotated[
        Literal["float32", "float64"],
        Field(description="Floating point type of parameters and activations"),
    ] = "float32"
    seed: int = 0
    validation_keypoints: Annotated[
        int, Field(description="Keypoints per image for validation repeatability")
    ] = 300

    model_config = {
        "env_file": ".env",
        "extra": "ignore",
        "env_prefix": "REKD_",
    }

    @field_validator(
        "channels",
        "num_layers",
        "kernel_size",
        "num_scales",
        "batch_size",
        "epochs",
        "lr_decay_every",
    )
    def positive(cls, v):
        """Reject non-positive extents."""
        if v <= 0:
            raise ValueError("must be positive")
        return v

    @field_validator("group_order")
    def valid_group(cls, v):
        """The cyclic group needs at least four elements."""
        if v < 4:
            raise ValueError("group_order must be >= 4")
        return v

    @field_validator("kernel_size")
    def odd_kernel(cls, v):
        """Kernels rotate about their center pixel."""
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v

    @model_validator(mode="after")
    def matching_windows(self):
        """Every window level needs a weight."""
        if len(self.window_sizes) != len(self.window_weights):
            raise ValueError("window_sizes and window_weights differ in length")
        if any(n <= 0 for n in self.window_sizes):
            raise ValueError("window sizes must be positive")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        return self

    @property
    def dtype(self) -> str:
        """numpy dtype name of parameters and activations"""
        return self.precision

    @property
    def bin_width(self) -> float:
        """Degrees covered by one orientation bin"""
        return 360.0 / self.group_order

    def check_equivariance_ready(self):
        """Exact quarter-turn checks need 90 degrees to be a group element."""
        if self.group_order % 4:
            raise ShapeError(
                f"group_order {self.group_order} is not divisible by 4",
            )


class SynthConfig(TextSerializable):
    """Procedural pair synthesis settings"""

    image_size: int = 192
    min_shapes: int = 20
    max_shapes: int = 60
    blur_sigma: Annotated[
        float, Field(description="Gaussian blur applied after compositing")
    ] = 0.7
    contrast_range: Tuple[float, float] = (0.7, 1.3)
    brightness_range: Tuple[float, float] = (-0.15, 0.15)
    hue_range: Annotated[
        Tuple[float, float], Field(description="Hue rotation range in degrees")
    ] = (-30.0, 30.0)
    sobel_threshold: Annotated[
        float,
        Field(
            description=(
                "Minimum mean Sobel magnitude of an accepted source image; "
                "locally calibrated on procedural textures"
            )
        ),
    ] = 0.01
    val_fraction: float = 0.1
    max_attempts: Annotated[
        int, Field(description="Texture redraws before a low-texture image is kept")
    ] = 10

    model_config = {
        "env_file": ".env",
        "extra": "ignore",
        "env_prefix": "REKD_SYNTH_",
    }

    @field_validator("image_size")
    def large_enough(cls, v):
        """Tiny images cannot hold the shapes."""
        if v < 16:
            raise ValueError("image_size must be >= 16")
        return v


class RuntimeSettings(BaseSettings):
    """Process-wide runtime switches"""

    # REKD_THREADS is the documented name; the prefixed form wins when both are set
    threads: Annotated[
        Optional[int],
        Field(
            description="Upper bound on worker threads",
            validation_alias=AliasChoices("REKD_RUNTIME_THREADS", "REKD_THREADS"),
        ),
    ] = None
    deterministic: Annotated[
        bool, Field(description="Force single-threaded numerics")
    ] = False
    debug: Annotated[
        bool, Field(description="Check every op output for NaN/Inf")
    ] = False
    log_level: str = "INFO"

    model_config = {
        "env_file": ".env",
        "extra": "ignore",
        "env_prefix": "REKD_RUNTIME_",
        "populate_by_name": True,
    }

    def worker_count(self) -> int:
        """Number of workers for data-parallel loops"""
        if self.deterministic:
            return 1
        cpus = os.cpu_count() or 1
        if self.threads:
            return max(1, min(self.threads, cpus))
        return cpus


runtime_settings = RuntimeSettings()
