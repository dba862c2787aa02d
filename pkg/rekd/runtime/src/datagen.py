"""Synthetic training pairs.

Every pair starts from a procedural color texture (a gradient background with
anti-aliased discs, rectangles and lines, lightly blurred). Image b is the
texture rotated by a uniform random angle; both images then get independent
HSV jitter and are converted to grayscale. Each pair draws from its own child
seed, so generation order and worker count never change the output bytes.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage
from src.config import SynthConfig, runtime_settings
from src.errors import MissingFileError, OutputError
from src.geometry import RotTransform, validity_mask, warp_image
from src.imageio import load_gray, write_pgm
from src.monitoring import logger

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
MANIFEST = "manifest.txt"


@dataclass
class RigidPair:
    """Two grayscale images related by `transform`; `mask` is valid in frame b."""

    img_a: np.ndarray
    img_b: np.ndarray
    transform: RotTransform
    mask: np.ndarray


def _coverage(sdf: np.ndarray) -> np.ndarray:
    """Anti-aliased coverage of a signed distance field, one pixel wide ramp."""
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _disc(xx, yy, rng, size):
    cx, cy = rng.uniform(0, size, 2)
    r = rng.uniform(0.02, 0.15) * size
    return np.hypot(xx - cx, yy - cy) - r


def _rectangle(xx, yy, rng, size):
    cx, cy = rng.uniform(0, size, 2)
    hw, hh = rng.uniform(0.02, 0.2, 2) * size
    phi = rng.uniform(0, math.pi)
    u = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
    v = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
    qx, qy = np.abs(u) - hw, np.abs(v) - hh
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def _line(xx, yy, rng, size):
    x0, y0, x1, y1 = rng.uniform(0, size, 4)
    half = rng.uniform(0.5, 3.0)
    dx, dy = x1 - x0, y1 - y0
    t = ((xx - x0) * dx + (yy - y0) * dy) / max(dx * dx + dy * dy, 1e-9)
    t = np.clip(t, 0, 1)
    return np.hypot(xx - x0 - t * dx, yy - y0 - t * dy) - half


_SHAPES = (_disc, _rectangle, _line)


def texture_image(
    rng: np.random.Generator, size: int = 192, config: Optional[SynthConfig] = None
) -> np.ndarray:
    """Procedural color texture, [3, size, size] in [0, 1]."""
    config = config or SynthConfig()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    phi = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(phi) + yy * math.sin(phi)) / size
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    start, end = rng.uniform(0, 1, (2, 3))
    img = start[:, None, None] + (end - start)[:, None, None] * ramp[None]

    for _ in range(rng.integers(config.min_shapes, config.max_shapes + 1)):
        shape = _SHAPES[rng.integers(len(_SHAPES))]
        cover = _coverage(shape(xx, yy, rng, size)) * rng.uniform(0.5, 1.0)
        color = rng.uniform(0, 1, 3)
        img = img * (1 - cover[None]) + color[:, None, None] * cover[None]

    img = np.stack([ndimage.gaussian_filter(c, config.blur_sigma) for c in img])
    return np.clip(img, 0.0, 1.0)


def to_gray(img: np.ndarray) -> np.ndarray:
    """[3,H,W] color to [H,W] luma; grayscale input passes through."""
    if img.ndim == 2:
        return img
    return np.clip(np.tensordot(GRAY_WEIGHTS, img, axes=([0], [0])), 0.0, 1.0)


def apply_jitter(
    img: np.ndarray, contrast: float, brightness: float, hue_deg: float
) -> np.ndarray:
    """Hue rotation and value scaling in HSV, then grayscale; output in [0, 1]."""
    rgb = np.repeat(img[None], 3, axis=0) if img.ndim == 2 else img
    hsv = rgb_to_hsv(np.clip(np.moveaxis(rgb, 0, -1), 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_deg / 360.0, 1.0)
    hsv[..., 2] = np.clip(contrast * hsv[..., 2] + brightness, 0.0, 1.0)
    return to_gray(np.moveaxis(hsv_to_rgb(hsv), -1, 0))


def photometric_jitter(
    img: np.ndarray, rng: np.random.Generator, config: Optional[SynthConfig] = None
) -> np.ndarray:
    config = config or SynthConfig()
    return apply_jitter(
        img,
        contrast=rng.uniform(*config.contrast_range),
        brightness=rng.uniform(*config.brightness_range),
        hue_deg=rng.uniform(*config.hue_range),
    )


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude of a grayscale image, Sobel responses scaled by 1/8."""
    gx = ndimage.sobel(img, axis=1, mode="reflect")
    gy = ndimage.sobel(img, axis=0, mode="reflect")
    return np.hypot(gx, gy) / 8.0


def edge_filter_accept(img: np.ndarray, threshold: float = 0.01) -> bool:
    """Keep images whose mean Sobel magnitude reaches `threshold`."""
    return bool(sobel_magnitude(to_gray(img)).mean() >= threshold)


def _pair_rngs(n: int, seed: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def pair_angles(n: int, seed: int) -> np.ndarray:
    """The rotation angles `make_dataset(n, ..., seed)` assigns to its pairs."""
    return np.array([rng.uniform(-180.0, 180.0) for rng in _pair_rngs(n, seed)])


def make_pair(
    rng: np.random.Generator, size: int = 192, config: Optional[SynthConfig] = None
) -> RigidPair:
    """Draw an angle, a texture that passes the edge filter, and jitter both views."""
    config = config or SynthConfig()
    angle = rng.uniform(-180.0, 180.0)
    for _ in range(config.max_attempts):
        color = texture_image(rng, size, config)
        if edge_filter_accept(color, config.sobel_threshold):
            break
    else:
        logger.warning(
            "keeping a low-texture image", extra={"attempts": config.max_attempts}
        )
    transform = RotTransform.square(angle, size)
    color_b, mask = warp_image(color, transform)
    return RigidPair(
        img_a=photometric_jitter(color, rng, config),
        img_b=photometric_jitter(color_b, rng, config),
        transform=transform,
        mask=mask,
    )


def write_transform(path: Union[str, Path], transform: RotTransform):
    (ws, hs), (wd, hd) = transform.src_size, transform.dst_size
    Path(path).write_text(f"{transform.angle_deg:.17g} {ws} {hs} {wd} {hd}\n")


def read_transform(path: Union[str, Path]) -> RotTransform:
    angle, ws, hs, wd, hd = Path(path).read_text().split()
    return RotTransform(float(angle), (int(ws), int(hs)), (int(wd), int(hd)))


def split_of(index: int, n: int, val_fraction: float = 0.1) -> str:
    """The last floor(n * val_fraction) pairs are held out for validation."""
    n_val = int(math.floor(n * val_fraction + 1e-9))
    return "val" if index >= n - n_val else "train"


def read_manifest(root: Union[str, Path]) -> List[Tuple[str, str]]:
    """(record id, split) for every pair of a dataset folder."""
    lines = (Path(root) / MANIFEST).read_text().splitlines()
    return [tuple(line.split()) for line in lines if line.strip()]


class PairDataset:
    """Pairs of a dataset folder written by `make_dataset`.

    Masks are recomputed from the stored transforms rather than read back.
    """

    def __init__(self, root: Union[str, Path], split: Optional[str] = None):
        self.root = Path(root)
        if not (self.root / MANIFEST).is_file():
            raise MissingFileError(f"no {MANIFEST} in {self.root}")
        self.records = [r for r, s in read_manifest(self.root) if split is None or s == split]

    def __len__(self) -> int:
        return len(self.records)

    def images(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        record = self.root / self.records[index]
        return load_gray(f"{record}_a.pgm"), load_gray(f"{record}_b.pgm")

    def transform(self, index: int) -> RotTransform:
        return read_transform(self.root / f"{self.records[index]}_t.txt")

    def pair(self, index: int) -> RigidPair:
        img_a, img_b = self.images(index)
        transform = self.transform(index)
        return RigidPair(img_a, img_b, transform, validity_mask(transform))

    def __iter__(self):
        return (self.pair(i) for i in range(len(self)))


def make_dataset(
    n_pairs: int,
    size: int,
    seed: int,
    out_dir: Union[str, Path],
    config: Optional[SynthConfig] = None,
) -> List[Tuple[str, str]]:
    """Write `n_pairs` pairs and the manifest to `out_dir`; returns the manifest."""
    config = config or SynthConfig()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create dataset folder {out}: {e.strerror or e}") from e

    def build(item: Tuple[int, np.random.Generator]) -> Tuple[str, str]:
        index, rng = item
        pair = make_pair(rng, size, config)
        record = f"{index:04d}"
        write_pgm(out / f"{record}_a.pgm", pair.img_a)
        write_pgm(out / f"{record}_b.pgm", pair.img_b)
        write_pgm(out / f"{record}_m.pgm", pair.mask.astype(np.uint8) * 255)
        write_transform(out / f"{record}_t.txt", pair.transform)
        return record, split_of(index, n_pairs, config.val_fraction)

    items = list(enumerate(_pair_rngs(n_pairs, seed)))
    try:
        with ThreadPoolExecutor(max_workers=runtime_settings.worker_count()) as pool:
            manifest = list(pool.map(build, items))
        (out / MANIFEST).write_text("".join(f"{r} {s}\n" for r, s in manifest))
    except OSError as e:
        raise OutputError(f"cannot write dataset to {out}: {e.strerror or e}") from e
    logger.info(
        "dataset written",
        extra={"pairs": n_pairs, "size": size, "seed": seed, "out": str(out)},
    )
    return manifest
