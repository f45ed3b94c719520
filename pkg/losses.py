"""
Dice losses for training and Dice / confusion metrics for evaluation.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import ConfigInvalid, EmptyDataset, ShapeMismatch
from nncore import Tensor, mul, tsum

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6
NUM_REGIONS = 6
FINAL_BOLUS_WEIGHT = 2.5
FINAL_OTHER_WEIGHT = 0.7


@dataclass
class LossWeights:
    """w[i][t] for stage i and region t."""

    weights: List[List[float]]

    def __post_init__(self):
        for row in self.weights:
            if len(row) != NUM_REGIONS:
                raise ConfigInvalid(f"Each stage needs {NUM_REGIONS} loss weights, got {len(row)}")
            if any(w < 0 for w in row):
                raise ConfigInvalid(f"Loss weights must be non-negative, got {row}")

    @property
    def num_stages(self) -> int:
        return len(self.weights)

    @classmethod
    def default(cls, num_stages: int) -> "LossWeights":
        """Intermediate stages weigh every region 1.0; the final stage favours the bolus (channel 0)."""
        if num_stages < 1:
            raise ConfigInvalid(f"num_stages must be >= 1, got {num_stages}")
        final = [FINAL_BOLUS_WEIGHT] + [FINAL_OTHER_WEIGHT] * (NUM_REGIONS - 1)
        return cls([[1.0] * NUM_REGIONS for _ in range(num_stages - 1)] + [final])

    def to_dict(self) -> dict:
        return {"weights": [list(map(float, row)) for row in self.weights]}

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return cls([[float(w) for w in row] for row in data["weights"]])


def _check_pair(pred: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"Prediction {pred.shape} and target {target.shape} differ")
    return target.astype(pred.dtype)


def dice_loss(pred: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps) over the last two axes.

    A leading batch axis is allowed; the per-image losses are averaged.
    """
    y = _check_pair(pred, target)
    axes = (-2, -1)
    inter = tsum(mul(pred, y), axis=axes)
    denom = tsum(pred, axis=axes) + y.sum(axis=axes) + eps
    loss = 1.0 - (inter * 2.0 + eps) / denom
    if loss.ndim:
        loss = tsum(loss) * (1.0 / loss.values.size)
    return loss


def stage_loss(pred: Tensor, masks: np.ndarray, weights: Sequence[float]) -> Tensor:
    """sum_t w[t] * dice_loss(pred[:, t], masks[:, t]) for B x 6 x H x W (or 6 x H x W) inputs."""
    _check_pair(pred, masks)
    channel_axis = pred.ndim - 3
    if pred.shape[channel_axis] != len(weights):
        raise ShapeMismatch(f"{pred.shape[channel_axis]} channels but {len(weights)} weights")
    masks = np.asarray(masks)
    total = None
    for t, w in enumerate(weights):
        key = (slice(None),) * channel_axis + (t,)
        term = dice_loss(pred[key], masks[key]) * float(w)
        total = term if total is None else total + term
    return total


def total_loss(stage_probs: Sequence[Tensor], masks: np.ndarray, weights: LossWeights) -> Tensor:
    """Sum of the stage losses (intermediate supervision)."""
    if not stage_probs:
        raise ConfigInvalid("total_loss needs at least one stage")
    if len(stage_probs) != weights.num_stages:
        raise ConfigInvalid(f"{len(stage_probs)} stage outputs but {weights.num_stages} weight rows")
    total = None
    for probs, row in zip(stage_probs, weights.weights):
        term = stage_loss(probs, masks, row)
        total = term if total is None else total + term
    return total


def threshold(probs: np.ndarray, theta: float = 0.5) -> np.ndarray:
    """Binary maps o = [y >= theta]; a probability of exactly theta counts as positive."""
    if not (0.0 < theta < 1.0):
        raise ConfigInvalid(f"Threshold must lie in (0, 1), got {theta}")
    return (np.asarray(probs) >= theta).astype(np.uint8)


def dice_score(pred: np.ndarray, target: np.ndarray) -> float:
    """2|o & y| / (|o| + |y|); two empty maps score 1.0."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"Prediction {pred.shape} and target {target.shape} differ")
    size = int(pred.sum()) + int(target.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, target).sum()) / size


def confusion_counts(pred: np.ndarray, target: np.ndarray) -> Tuple[int, int, int, int]:
    """(TP, FP, TN, FN) pixel counts of a binary prediction against its ground truth."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"Prediction {pred.shape} and target {target.shape} differ")
    tp = int(np.sum(pred & target))
    fp = int(np.sum(pred & ~target))
    tn = int(np.sum(~pred & ~target))
    fn = int(np.sum(~pred & target))
    return tp, fp, tn, fn


def per_region_dice(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Dice of every region channel for one image (6 x H x W inputs)."""
    return np.array([dice_score(p, g) for p, g in zip(pred_masks, gt_masks)], dtype=np.float64)


def macro_dice(pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-image Dice averaged over images, one value per region."""
    if len(pred_masks) == 0:
        raise EmptyDataset("macro_dice needs at least one image")
    scores = np.stack([per_region_dice(p, g) for p, g in zip(pred_masks, gt_masks)])
    return scores.mean(axis=0)
