"""Patch descriptors, mutual nearest neighbor matching and orientation-consensus filtering."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from src.geometry import sample_bilinear, snapped_trig
from src.inference import Keypoint

DESCRIPTOR_SIDE = 16
MATCH_HEADER = "REKD-MATCH v1"


@dataclass
class MatchSet:
    """Index pairs into two keypoint lists with distances and inlier flags."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inliers: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if self.inliers is None:
            self.inliers = np.ones(len(self.pairs), dtype=bool)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())

    def transposed(self) -> "MatchSet":
        return MatchSet(self.pairs[:, ::-1].copy(), self.distances.copy(), self.inliers.copy())


def patch_descriptor(
    img: np.ndarray, kp: Keypoint, side: int = DESCRIPTOR_SIDE
) -> Tuple[np.ndarray, bool]:
    """Oriented, mean-free, unit-norm patch of side*side samples spaced by kp.scale.

    A flat patch gives the zero vector and is flagged invalid.
    """
    c, s = snapped_trig(kp.orientation)
    offsets = (np.arange(side, dtype=np.float64) - (side - 1) / 2.0) * kp.scale
    v, u = np.meshgrid(offsets, offsets, indexing="ij")
    xs = kp.x + c * u + s * v
    ys = kp.y - s * u + c * v
    patch = sample_bilinear(img, xs, ys).ravel()
    patch = patch - patch.mean()
    norm = np.linalg.norm(patch)
    if norm < 1e-12:
        return np.zeros(side * side), False
    return patch / norm, True


def describe(
    img: np.ndarray, keypoints: Sequence[Keypoint], side: int = DESCRIPTOR_SIDE
) -> Tuple[np.ndarray, np.ndarray]:
    """[N, side*side] descriptors and [N] validity flags."""
    out = np.zeros((len(keypoints), side * side))
    valid = np.zeros(len(keypoints), dtype=bool)
    for i, kp in enumerate(keypoints):
        out[i], valid[i] = patch_descriptor(img, kp, side)
    return out, valid


def mnn_match(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    valid_a: Optional[np.ndarray] = None,
    valid_b: Optional[np.ndarray] = None,
) -> MatchSet:
    """Pairs that are each other's L2 nearest neighbor; ties go to the lower index."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return MatchSet()
    dist = cdist(desc_a, desc_b, metric="euclidean")
    if valid_a is not None:
        dist[~np.asarray(valid_a, dtype=bool)] = np.inf
    if valid_b is not None:
        dist[:, ~np.asarray(valid_b, dtype=bool)] = np.inf
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    rows = np.arange(len(desc_a))
    keep = (nn_ba[nn_ab] == rows) & np.isfinite(dist[rows, nn_ab])
    return MatchSet(np.stack([rows[keep], nn_ab[keep]], axis=1), dist[rows[keep], nn_ab[keep]])


def circular_distance(a, b) -> np.ndarray:
    """Angular distance in degrees, in [0, 180]."""
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 360.0
    return np.minimum(diff, 360.0 - diff)


def orientation_differences(
    ori_a: np.ndarray, ori_b: np.ndarray, matches: MatchSet
) -> np.ndarray:
    """(o_b - o_a + 360) mod 360 for every match."""
    a = np.asarray(ori_a, dtype=np.float64)[matches.pairs[:, 0]]
    b = np.asarray(ori_b, dtype=np.float64)[matches.pairs[:, 1]]
    return np.round((b - a + 360.0) % 360.0, 6) % 360.0


def mode_of_differences(
    ori_a: np.ndarray, ori_b: np.ndarray, matches: MatchSet
) -> Optional[float]:
    """Most frequent orientation difference; ties pick the smallest value."""
    if len(matches) == 0:
        return None
    values, counts = np.unique(orientation_differences(ori_a, ori_b, matches), return_counts=True)
    return float(values[np.argmax(counts)])


def orientation_outlier_filter(
    matches: MatchSet, ori_a: np.ndarray, ori_b: np.ndarray, t: float = 30.0
) -> np.ndarray:
    """Inlier flags: matches whose difference lies within t degrees of the mode."""
    if len(matches) == 0:
        return np.zeros(0, dtype=bool)
    mode = mode_of_differences(ori_a, ori_b, matches)
    return circular_distance(orientation_differences(ori_a, ori_b, matches), mode) <= t


def match_keypoints(
    img_a: np.ndarray,
    kps_a: Sequence[Keypoint],
    img_b: np.ndarray,
    kps_b: Sequence[Keypoint],
    filter_orientation: bool = False,
    t: float = 30.0,
) -> MatchSet:
    """Describe both keypoint lists, match them and optionally flag orientation outliers."""
    desc_a, valid_a = describe(img_a, kps_a)
    desc_b, valid_b = describe(img_b, kps_b)
    matches = mnn_match(desc_a, desc_b, valid_a, valid_b)
    if filter_orientation:
        matches.inliers = orientation_outlier_filter(
            matches,
            np.array([k.orientation for k in kps_a]),
            np.array([k.orientation for k in kps_b]),
            t,
        )
    return matches


def write_matches(path: Union[str, Path], matches: MatchSet):
    lines = [f"{MATCH_HEADER} {len(matches)}\n"]
    lines += [
        f"{i} {j} {d:.6f} {int(flag)}\n"
        for (i, j), d, flag in zip(matches.pairs, matches.distances, matches.inliers)
    ]
    Path(path).write_text("".join(lines))


def read_matches(path: Union[str, Path]) -> MatchSet:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    if " ".join(header[:2]) != MATCH_HEADER:
        raise ValueError(f"{path} is not a match file")
    rows = [line.split() for line in lines[1 : 1 + int(header[2])]]
    return MatchSet(
        pairs=[(int(r[0]), int(r[1])) for r in rows],
        distances=[float(r[2]) for r in rows],
        inliers=np.array([r[3] == "1" for r in rows], dtype=bool),
    )
