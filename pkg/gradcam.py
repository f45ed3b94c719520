"""
GradCAM over the decoder blocks of a segmentation stage.
Used to rank which anatomical regions the bolus prediction relies on,
i.e. to pick the context regions handed from one stage to the next.
"""

import csv
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from cin import DECODER_BLOCKS, REGIONS, CinModel, cin_forward, region_index
from errors import BlockOutOfRange, ConfigInvalid, EmptyDataset, ShapeMismatch
from nncore import Tape, Tensor, backward, interp_matrix, mul, tsum
from pen import enhance, pen_stack_batch

logger = logging.getLogger(__name__)

TARGET_MODES = ("full", "masked")


def check_block(block: int) -> None:
    if not (1 <= block <= DECODER_BLOCKS):
        raise BlockOutOfRange(f"Decoder block must be in 1..{DECODER_BLOCKS}, got {block}")


def _normalize(cam: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize to `size`, then scale to max 1 (all-zero stays all-zero)."""
    mh = interp_matrix(cam.shape[0], size[0])
    mw = interp_matrix(cam.shape[1], size[1])
    heat = np.maximum(mh @ cam.astype(np.float64) @ mw.T, 0.0)
    peak = heat.max()
    return heat / peak if peak > 0 else np.zeros(size, dtype=np.float64)


def block_heatmaps(model: CinModel, img: np.ndarray, target_region: str = "bolus",
                   target_mode: str = "full", masks: Optional[np.ndarray] = None,
                   stage_index: Optional[int] = None) -> List[np.ndarray]:
    """Heatmaps of all decoder blocks for one frame, from a single backward pass.

    The target scalar is the sum of the region's logits over the whole map
    ("full") or over its ground-truth pixels ("masked").
    """
    if target_mode not in TARGET_MODES:
        raise ConfigInvalid(f"Unknown GradCAM target mode {target_mode!r}; expected one of {TARGET_MODES}")
    if target_mode == "masked" and masks is None:
        raise ConfigInvalid("Masked GradCAM target needs ground-truth masks")
    channel = region_index(target_region)
    stage_index = model.num_stages - 1 if stage_index is None else stage_index
    if not (0 <= stage_index < model.num_stages):
        raise ConfigInvalid(f"Stage index {stage_index} outside 0..{model.num_stages - 1}")

    dtype = model.stages[0].head.weight.dtype
    stack = Tensor(pen_stack_batch([img], model.pen_config, dtype=dtype), dtype=dtype)
    stage_inputs: list = []
    cin_forward(model, enhance(stack, model.pen), training=False, stage_inputs=stage_inputs)
    stage_in = stage_inputs[stage_index].detach()

    taps: list = []
    with Tape() as tape:
        logits = model.stages[stage_index](stage_in, training=False, taps=taps)
        region_logits = logits[:, channel]
        if target_mode == "masked":
            gt = np.asarray(masks)[channel]
            if gt.shape != region_logits.shape[1:]:
                raise ShapeMismatch(f"Mask {gt.shape} does not match logits {region_logits.shape[1:]}")
            region_logits = mul(region_logits, gt[None].astype(dtype))
        target = tsum(region_logits)
        backward(target, tape)

    size = img.shape
    heatmaps = []
    for activation in taps:
        grad = tape.grad(activation)[0].astype(np.float64)
        acts = activation.values[0].astype(np.float64)
        alpha = grad.mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(alpha, acts, axes=(0, 0)), 0.0)
        heatmaps.append(_normalize(cam, size))
    return heatmaps


def gradcam_map(model: CinModel, img: np.ndarray, target_region: str = "bolus", decoder_block: int = 4,
                target_mode: str = "full", masks: Optional[np.ndarray] = None,
                stage_index: Optional[int] = None) -> np.ndarray:
    """H x W heatmap in [0, 1] for one decoder block (1 = deepest, 4 = last)."""
    check_block(decoder_block)
    maps = block_heatmaps(model, img, target_region, target_mode, masks, stage_index)
    return maps[decoder_block - 1]


def region_mass(heatmap: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Mean heat inside each region's ground truth; NaN where the region is absent."""
    masses = np.full(len(REGIONS), np.nan)
    for t, mask in enumerate(np.asarray(masks).astype(bool)):
        if mask.shape != heatmap.shape:
            raise ShapeMismatch(f"Mask {mask.shape} does not match heatmap {heatmap.shape}")
        if mask.any():
            masses[t] = float(heatmap[mask].mean())
    return masses


def rank_regions(masses: np.ndarray) -> List[Tuple[str, float]]:
    """Regions by descending mass; ties keep the canonical region order."""
    scores = [(name, 0.0 if np.isnan(m) else float(m)) for name, m in zip(REGIONS, masses)]
    return sorted(scores, key=lambda item: -item[1])


def region_importance(model: CinModel, samples: Sequence, target_region: str = "bolus",
                      blocks: Sequence[int] = (1, 2, 3, 4), target_mode: str = "full",
                      stage_index: Optional[int] = None) -> List[Tuple[str, float]]:
    """Average per-region heat over images and decoder blocks, ranked."""
    if not samples:
        raise EmptyDataset("region_importance needs at least one sample")
    for block in blocks:
        check_block(block)

    rows = []
    for sample in samples:
        maps = block_heatmaps(model, sample.image, target_region, target_mode, sample.masks, stage_index)
        for block in blocks:
            rows.append(region_mass(maps[block - 1], sample.masks))
    table = np.array(rows)
    present = ~np.isnan(table)
    totals = np.where(present, table, 0.0).sum(axis=0)
    counts = present.sum(axis=0)
    means = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
    ranking = rank_regions(means)
    logger.info(f"Region importance for {target_region}: "
                + ", ".join(f"{name}={score:.3f}" for name, score in ranking))
    return ranking


def write_ranking_csv(path: str, ranking: Sequence[Tuple[str, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "region", "importance"])
        for rank, (name, score) in enumerate(ranking, start=1):
            writer.writerow([rank, name, f"{score:.6f}"])
