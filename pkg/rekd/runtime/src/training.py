"""Training: the per-batch objective, Adam steps and the epoch loop."""
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from src.checkpoint import save_checkpoint
from src.config import RekdConfig
from src.datagen import PairDataset, RigidPair
from src.errors import NumericalError, ShapeError
from src.evalkit import repeatability
from src.inference import detect
from src.losses import KeypointLoss, OrientationAlignmentLoss, total_loss
from src.model import RekdModel
from src.monitoring import logger
from src.optim import AdamState, adam_step

LOG_COLUMNS = ["epoch", "loss_total", "loss_ori", "loss_kpts", "val_repeatability", "lr"]


@dataclass
class StepResult:
    loss_total: float
    loss_ori: float
    loss_kpts: float


class Objective:
    """Total loss of a batch of pairs, averaged over pairs.

    The loss objects live as long as the objective, so `freeze` pins the
    keypoint proposals for finite-difference checks.
    """

    def __init__(self, config: RekdConfig, pairs: Sequence[RigidPair]):
        if not pairs:
            raise ValueError("a batch needs at least one pair")
        shapes = {p.img_a.shape for p in pairs} | {p.img_b.shape for p in pairs}
        if len(shapes) != 1:
            raise ShapeError(f"pairs of a batch must share one image size, got {sorted(shapes)}")
        self.config = config
        self.pairs = list(pairs)
        self.orientation = [OrientationAlignmentLoss(p.transform) for p in self.pairs]
        self.keypoints = [
            KeypointLoss(p.transform, config.window_sizes, config.window_weights)
            for p in self.pairs
        ]

    def freeze(self):
        for loss in self.keypoints:
            loss.freeze()

    def evaluate(
        self, model: RekdModel, training: bool = True, gradients: bool = True
    ) -> Tuple[StepResult, Optional[Dict[str, np.ndarray]]]:
        cfg = self.config
        n = len(self.pairs)
        out_a = model.forward(np.stack([p.img_a for p in self.pairs]), training)
        out_b = model.forward(np.stack([p.img_b for p in self.pairs]), training)
        d_ka, d_kb = np.zeros_like(out_a.K), np.zeros_like(out_b.K)
        d_oa, d_ob = np.zeros_like(out_a.O), np.zeros_like(out_b.O)

        ori, kpts = 0.0, 0.0
        for i in range(n):
            if cfg.use_orientation_loss:
                loss = self.orientation[i]
                ori += loss.forward(out_a.O[i], out_b.O[i]) / n
                if gradients:
                    d_oa[i], d_ob[i] = loss.backward(cfg.beta / n)
            if cfg.use_keypoint_loss:
                loss = self.keypoints[i]
                kpts += loss.forward(out_a.K[i], out_b.K[i]) / n
                if gradients:
                    d_ka[i], d_kb[i] = loss.backward(1.0 / n)

        for name, value in (("orientation loss", ori), ("keypoint loss", kpts)):
            if not math.isfinite(value):
                raise NumericalError(f"non-finite {name}")
        result = StepResult(total_loss(ori, kpts, cfg.beta), ori, kpts)
        if not gradients:
            return result, None

        grads = model.backward(out_a, d_ka, d_oa)
        for name, g in model.backward(out_b, d_kb, d_ob).items():
            grads[name] += g
        return result, grads


def train_step(model: RekdModel, pairs: Sequence[RigidPair], state: AdamState) -> StepResult:
    """One Adam step on a batch of pairs."""
    result, grads = Objective(model.config, pairs).evaluate(model, training=True)
    adam_step(model.params, grads, state)
    return result


def learning_rate(config: RekdConfig, epoch: int) -> float:
    """Step decay, epochs counted from 1."""
    return config.learning_rate * config.lr_decay ** ((epoch - 1) // config.lr_decay_every)


def validation_repeatability(
    model: RekdModel, pairs: Sequence[RigidPair], num_kpts: int
) -> float:
    if not pairs:
        return float("nan")
    scores = [
        repeatability(detect(model, p.img_a, num_kpts), detect(model, p.img_b, num_kpts), p.transform)
        for p in pairs
    ]
    return float(np.mean(scores))


@dataclass
class FitResult:
    best_epoch: int
    best_repeatability: float
    history: List[dict]


def fit(
    model: RekdModel,
    train: Union[PairDataset, Sequence[RigidPair]],
    val: Union[PairDataset, Sequence[RigidPair], None],
    out: Union[str, Path],
    log_path: Optional[Union[str, Path]] = None,
) -> FitResult:
    """Train for `config.epochs` epochs, keeping the checkpoint with the best validation repeatability.

    Without validation pairs the last epoch is kept. One CSV row per epoch
    goes to `log_path` (default: `<out>.log.csv`).
    """
    cfg = model.config
    out = Path(out)
    log_path = Path(log_path) if log_path else out.with_name(out.name + ".log.csv")
    train_pairs = list(train)
    val_pairs = list(val) if val is not None else []
    if not train_pairs:
        raise ValueError("no training pairs")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(
        lr=cfg.learning_rate, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps
    )
    best_epoch, best_rep = 0, -math.inf
    history = []
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for epoch in range(1, cfg.epochs + 1):
            state.lr = learning_rate(cfg, epoch)
            order = rng.permutation(len(train_pairs))
            totals = np.zeros(3)
            batches = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_pairs[i] for i in order[start : start + cfg.batch_size]]
                result = train_step(model, batch, state)
                totals += (result.loss_total, result.loss_ori, result.loss_kpts)
                batches += 1
            totals /= batches

            val_rep = validation_repeatability(model, val_pairs, cfg.validation_keypoints)
            row = {
                "epoch": epoch,
                "loss_total": float(totals[0]),
                "loss_ori": float(totals[1]),
                "loss_kpts": float(totals[2]),
                "val_repeatability": val_rep,
                "lr": state.lr,
            }
            history.append(row)
            writer.writerow([epoch] + [f"{row[c]:.6f}" for c in LOG_COLUMNS[1:5]] + [repr(state.lr)])
            fh.flush()
            logger.info("epoch done", extra=row)

            improved = not val_pairs or val_rep > best_rep
            if improved:
                best_epoch, best_rep = epoch, val_rep
                save_checkpoint(model, out)
    logger.info("training done", extra={"best_epoch": best_epoch, "checkpoint": str(out)})
    return FitResult(best_epoch, best_rep, history)
