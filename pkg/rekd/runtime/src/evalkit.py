"""Detector and matcher metrics, and the synthetic rotation sweep."""
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from src.config import runtime_settings
from src.datagen import PairDataset
from src.errors import MissingFileError, NoValidRegionError, ShapeError
from src.geometry import RotTransform, Size, inside, validity_mask, warp_operator
from src.imageio import load_gray
from src.inference import Keypoint, detect, keypoint_array
from src.matching import MatchSet, circular_distance, match_keypoints, orientation_outlier_filter
from src.model import RekdModel
from src.monitoring import logger

SWEEP_NOISE_SIGMA = 4.0 / 255.0


class Homography:
    """Planar homography between two image frames, same point contract as `RotTransform`."""

    def __init__(self, matrix: np.ndarray, src_size: Size, dst_size: Size):
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        self.src_size = tuple(src_size)
        self.dst_size = tuple(dst_size)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        homog = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        return homog[:, :2] / homog[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix), self.dst_size, self.src_size)


def read_homography(path: Union[str, Path], src_size: Size, dst_size: Size) -> Homography:
    """3x3 row-major text matrix"""
    values = np.array(Path(path).read_text().split(), dtype=np.float64)
    if values.size != 9:
        raise ValueError(f"{path} does not hold a 3x3 matrix")
    return Homography(values, src_size, dst_size)


@dataclass
class EvalPair:
    name: str
    img_a: np.ndarray
    img_b: np.ndarray
    transform: object  # RotTransform or Homography


def load_hpatches(root: Union[str, Path]) -> List[EvalPair]:
    """Pairs (1, k) of every scene folder holding 1.pgm..6.pgm and H_1_k files."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"no evaluation folder at {root}")
    pairs = []
    for scene in sorted(p for p in root.iterdir() if p.is_dir()):
        reference = load_gray(scene / "1.pgm")
        size_a = (reference.shape[1], reference.shape[0])
        for k in range(2, 7):
            img_path, h_path = scene / f"{k}.pgm", scene / f"H_1_{k}"
            if not (img_path.is_file() and h_path.is_file()):
                continue
            target = load_gray(img_path)
            homography = read_homography(h_path, size_a, (target.shape[1], target.shape[0]))
            pairs.append(EvalPair(f"{scene.name}/1-{k}", reference, target, homography))
    return pairs


def load_pairs(root: Union[str, Path], split: Optional[str] = None) -> List[EvalPair]:
    """Pairs of a synthetic dataset folder, or of an HPatches-style folder."""
    root = Path(root)
    if (root / "manifest.txt").is_file():
        dataset = PairDataset(root, split)
        return [
            EvalPair(record, *dataset.images(i), dataset.transform(i))
            for i, record in enumerate(dataset.records)
        ]
    return load_hpatches(root)


def _points(keypoints) -> np.ndarray:
    if isinstance(keypoints, np.ndarray):
        return keypoints.reshape(-1, 2).astype(np.float64)
    return keypoint_array(keypoints)


def repeatability(kps_a, kps_b, transform, thresh_px: float = 3.0) -> float:
    """Share of keypoints re-detected within `thresh_px` under `transform` (a to b).

    Keypoints that leave the other image are dropped; the remaining ones are
    paired greedily by ascending distance, one to one, and the count is divided
    by the smaller of the two valid sets.
    """
    a = _points(kps_a)
    b = _points(kps_b)
    a = a[inside(transform.apply(a), transform.dst_size)]
    b_in_a = transform.inverse().apply(b)
    b_in_a = b_in_a[inside(b_in_a, transform.src_size)]
    if len(a) == 0 and len(b_in_a) == 0:
        logger.warning("repeatability of two empty keypoint sets")
        return 0.0
    denominator = min(len(a), len(b_in_a))
    if denominator == 0:
        return 0.0
    dist = np.linalg.norm(a[:, None, :] - b_in_a[None, :, :], axis=-1)
    ii, jj = np.nonzero(dist <= thresh_px)
    order = np.lexsort((jj, ii, dist[ii, jj]))
    used_a, used_b = set(), set()
    for i, j in zip(ii[order], jj[order]):
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
    return len(used_a) / denominator


def match_errors(matches: MatchSet, kps_a, kps_b, transform) -> np.ndarray:
    """Distance in frame a between each matched keypoint of a and its partner warped from b."""
    if len(matches) == 0:
        return np.zeros(0)
    a = _points(kps_a)[matches.pairs[:, 0]]
    b = transform.inverse().apply(_points(kps_b)[matches.pairs[:, 1]])
    return np.linalg.norm(a - b, axis=1)


def mma(
    matches: MatchSet,
    kps_a,
    kps_b,
    transform,
    thresholds: Sequence[float] = (3.0, 5.0),
) -> Dict[float, float]:
    """Per-threshold share of correct matches of one pair; no match scores 0."""
    errors = match_errors(matches, kps_a, kps_b, transform)
    if len(errors) == 0:
        return {t: 0.0 for t in thresholds}
    return {t: float((errors <= t).mean()) for t in thresholds}


def mean_mma(per_pair: Sequence[Dict[float, float]]) -> Dict[float, float]:
    """Benchmark MMA: per-pair accuracies averaged over pairs."""
    if not per_pair:
        return {}
    return {t: float(np.mean([p[t] for p in per_pair])) for t in per_pair[0]}


def match_precision(matches: MatchSet, kps_a, kps_b, transform, thresh_px: float = 3.0) -> float:
    """Share of inlier matches that are geometrically correct."""
    errors = match_errors(matches, kps_a, kps_b, transform)
    kept = errors[matches.inliers] if len(errors) else errors
    if len(kept) == 0:
        return 0.0
    return float((kept <= thresh_px).mean())


def randomize_orientations(
    keypoints: Sequence[Keypoint], fraction: float, bin_width: float, rng: np.random.Generator
) -> List[Keypoint]:
    """Copy of `keypoints` where a random `fraction` get a uniformly drawn bin orientation."""
    keypoints = list(keypoints)
    count = int(round(fraction * len(keypoints)))
    bins = int(round(360.0 / bin_width))
    for i in rng.choice(len(keypoints), size=count, replace=False):
        keypoints[i] = replace(keypoints[i], orientation=float(rng.integers(bins) * bin_width))
    return keypoints


def evaluate_orientation_filter(
    model: RekdModel,
    pairs: Sequence[EvalPair],
    num_kpts: int,
    fraction: float = 0.2,
    t: float = 30.0,
    thresh_px: float = 3.0,
    seed: int = 0,
) -> List[dict]:
    """Match precision with and without the orientation filter.

    A `fraction` of the keypoints of image b get random orientations before
    description, so their matches are mostly wrong.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for pair in pairs:
        kps_a = detect(model, pair.img_a, num_kpts)
        kps_b = randomize_orientations(
            detect(model, pair.img_b, num_kpts), fraction, model.config.bin_width, rng
        )
        matches = match_keypoints(pair.img_a, kps_a, pair.img_b, kps_b, False, t)
        correct = match_errors(matches, kps_a, kps_b, pair.transform) <= thresh_px
        inliers = orientation_outlier_filter(
            matches,
            np.array([k.orientation for k in kps_a]),
            np.array([k.orientation for k in kps_b]),
            t,
        )
        rows.append(
            {
                "pair": pair.name,
                "matches": len(matches),
                "correct": int(correct.sum()),
                "inliers": int(inliers.sum()),
                "correct_inliers": int(correct[inliers].sum()),
                "precision": float(correct.mean()) if len(correct) else 0.0,
                "precision_filtered": float(correct[inliers].mean()) if inliers.any() else 0.0,
            }
        )
    return rows


def pooled_precision(rows: Sequence[dict]) -> Tuple[float, float]:
    """(unfiltered, filtered) precision over all matches of `evaluate_orientation_filter` rows."""
    matches = sum(r["matches"] for r in rows)
    inliers = sum(r["inliers"] for r in rows)
    unfiltered = sum(r["correct"] for r in rows) / matches if matches else 0.0
    filtered = sum(r["correct_inliers"] for r in rows) / inliers if inliers else 0.0
    return unfiltered, filtered


def orientation_accuracy(
    o_a: np.ndarray,
    o_b: np.ndarray,
    transform: RotTransform,
    mask: Optional[np.ndarray] = None,
    thresh_deg: float = 15.0,
) -> float:
    """Share of valid pixels whose argmax orientations differ by the true angle, within a tolerance."""
    order = o_a.shape[0]
    mask = validity_mask(transform.inverse()) if mask is None else mask.astype(bool)
    if mask.shape != o_a.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match {o_a.shape}")
    if not mask.any():
        raise NoValidRegionError("orientation accuracy mask selects no pixel")
    aligned = warp_operator(transform.inverse()).apply(o_b.astype(np.float64))
    predicted = (np.argmax(aligned, axis=0) - np.argmax(o_a, axis=0)) * (360.0 / order) % 360.0
    correct = circular_distance(predicted, transform.angle_deg % 360.0) <= thresh_deg
    return float(correct[mask].mean())


def interpolation_rmse(img: np.ndarray, angle_deg: float) -> float:
    """RMSE of a rotate-then-unrotate round trip over the pixels valid in both warps."""
    h, w = img.shape
    forward = RotTransform(angle_deg, (w, h), (w, h))
    back = forward.inverse()
    there = warp_operator(forward).apply(img.astype(np.float64))
    again = warp_operator(back).apply(there)
    valid = warp_operator(back).apply(validity_mask(forward).astype(np.float64)) >= 0.999
    valid &= validity_mask(back)
    if not valid.any():
        raise NoValidRegionError("round trip leaves no valid pixel")
    return float(np.sqrt(np.mean((again - img)[valid] ** 2)))


@dataclass
class SweepRow:
    angle: int
    repeatability: float
    ori_accuracy: float


def rotated_view(
    img: np.ndarray, angle_deg: float, noise_sigma: float, rng: np.random.Generator
) -> Tuple[np.ndarray, RotTransform]:
    h, w = img.shape
    transform = RotTransform(float(angle_deg), (w, h), (w, h))
    view = warp_operator(transform).apply(img.astype(np.float64))
    if noise_sigma > 0:
        view = np.clip(view + rng.normal(0.0, noise_sigma, view.shape), 0.0, 1.0)
    return view.astype(img.dtype), transform


def rotation_sweep(
    model: RekdModel,
    images: Sequence[np.ndarray],
    angles: Sequence[int] = range(360),
    noise_sigma: float = SWEEP_NOISE_SIGMA,
    num_kpts: int = 300,
    seed: int = 0,
) -> List[SweepRow]:
    """Repeatability and orientation accuracy of every angle, averaged over images."""
    references = [(detect(model, img, num_kpts), model.forward(img).O) for img in images]

    def run(angle: int) -> SweepRow:
        reps, accs = [], []
        for index, (img, (kps_a, o_a)) in enumerate(zip(images, references)):
            rng = np.random.default_rng([seed, int(angle) % 360, index])
            view, transform = rotated_view(img, angle, noise_sigma, rng)
            reps.append(repeatability(kps_a, detect(model, view, num_kpts), transform))
            accs.append(orientation_accuracy(o_a, model.forward(view).O, transform))
        return SweepRow(int(angle), float(np.mean(reps)), float(np.mean(accs)))

    with ThreadPoolExecutor(max_workers=runtime_settings.worker_count()) as pool:
        rows = list(pool.map(run, angles))
    logger.info("rotation sweep done", extra={"angles": len(rows), "images": len(images)})
    return rows


def evaluate_repeatability(model: RekdModel, pairs: Sequence[EvalPair], num_kpts: int) -> List[dict]:
    rows = []
    for pair in pairs:
        kps_a = detect(model, pair.img_a, num_kpts)
        kps_b = detect(model, pair.img_b, num_kpts)
        rows.append(
            {
                "pair": pair.name,
                "repeatability": repeatability(kps_a, kps_b, pair.transform),
                "keypoints_a": len(kps_a),
                "keypoints_b": len(kps_b),
            }
        )
    return rows


def evaluate_matching(
    model: RekdModel,
    pairs: Sequence[EvalPair],
    num_kpts: int,
    filter_orientation: bool = True,
    t: float = 30.0,
) -> List[dict]:
    rows = []
    for pair in pairs:
        kps_a: List[Keypoint] = detect(model, pair.img_a, num_kpts)
        kps_b: List[Keypoint] = detect(model, pair.img_b, num_kpts)
        matches = match_keypoints(pair.img_a, kps_a, pair.img_b, kps_b, filter_orientation, t)
        kept = MatchSet(matches.pairs[matches.inliers], matches.distances[matches.inliers])
        scores = mma(kept, kps_a, kps_b, pair.transform)
        rows.append(
            {
                "pair": pair.name,
                "matches": len(matches),
                "inliers": matches.inlier_count,
                "mma@3": scores[3.0],
                "mma@5": scores[5.0],
            }
        )
    return rows


def evaluate_orientation(
    model: RekdModel, pairs: Sequence[EvalPair], thresh_deg: float = 15.0
) -> List[dict]:
    rows = []
    for pair in pairs:
        if not isinstance(pair.transform, RotTransform):
            raise ShapeError(f"{pair.name}: orientation accuracy needs a rotation pair")
        o_a = model.forward(pair.img_a).O
        o_b = model.forward(pair.img_b).O
        rows.append(
            {
                "pair": pair.name,
                "ori_accuracy": orientation_accuracy(o_a, o_b, pair.transform, thresh_deg=thresh_deg),
            }
        )
    return rows


def _format(value) -> str:
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def write_table(path: Union[str, Path], rows: Sequence[dict], summary: bool = True):
    """CSV of per-pair metrics, with a closing `mean` row over the numeric columns."""
    if not rows:
        Path(path).write_text("")
        return
    columns = list(rows[0])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row[c]) for c in columns])
        if summary:
            writer.writerow(
                ["mean"] + [_format(float(np.mean([r[c] for r in rows]))) for c in columns[1:]]
            )


def write_sweep_csv(path: Union[str, Path], rows: Sequence[SweepRow]):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["angle", "repeatability", "ori_accuracy"])
        for row in rows:
            writer.writerow([row.angle, f"{row.repeatability:.6f}", f"{row.ori_accuracy:.6f}"])


def write_rmse_csv(path: Union[str, Path], images: Sequence[np.ndarray], angles: Sequence[int]):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["angle", "rmse"])
        for angle in angles:
            rmse = np.mean([interpolation_rmse(img, angle) for img in images])
            writer.writerow([int(angle), f"{rmse:.6f}"])
