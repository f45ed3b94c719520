"""
Dataset storage, patient-level splitting and model checkpoints.
Frames live as grayscale PNGs with six binary region masks each,
tied together by a JSON-lines manifest.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

import imgproc
from cin import REGIONS, CinConfig, CinModel, build_model
from errors import BadManifest, BadMaskShape, ConfigInvalid, CorruptFile, MissingFile, TooFewPatients
from nncore import AdamWState, read_arrays, write_arrays
from pen import PenConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
IMAGE_DIR = "images"
MASK_DIR = "masks"


@dataclass
class Sample:
    """One annotated frame: image (H x W uint8) and masks (6 x H x W, values 0/1, overlap allowed)."""

    image: np.ndarray
    masks: np.ndarray
    patient_id: str
    frame_id: str

    def __post_init__(self):
        self.image = imgproc.check_gray(self.image)
        self.masks = np.asarray(self.masks)
        if self.masks.shape != (len(REGIONS),) + self.image.shape:
            raise BadMaskShape(
                f"Frame {self.frame_id}: masks {self.masks.shape} do not match image {self.image.shape}"
            )
        if not np.isin(self.masks, (0, 1)).all():
            raise BadMaskShape(f"Frame {self.frame_id}: masks must be binary")
        self.masks = self.masks.astype(np.uint8)
        if not self.patient_id:
            raise BadManifest(f"Frame {self.frame_id}: empty patient_id")


def _read_mask(path: str, shape: Tuple[int, int], frame_id: str) -> np.ndarray:
    mask = imgproc.read_gray_png(path)
    if mask.shape != shape:
        raise BadMaskShape(f"Frame {frame_id}: mask {path} is {mask.shape}, image is {shape}")
    values = np.unique(mask)
    if not np.isin(values, (0, 1, 255)).all() or (1 in values and 255 in values):
        raise BadMaskShape(f"Frame {frame_id}: mask {path} is not binary (values {values[:8].tolist()})")
    return (mask > 0).astype(np.uint8)


def load_dataset(root: str) -> List[Sample]:
    """Load every frame listed in `<root>/manifest.jsonl`, in manifest order."""
    manifest_path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise MissingFile(f"No manifest at {manifest_path}")

    samples = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                image_rel = entry["image"]
                mask_rels = entry["masks"]
                patient_id = str(entry["patient_id"])
                frame_id = str(entry["frame_id"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise BadManifest(f"{manifest_path}:{line_no}: {e}") from e
            if not isinstance(mask_rels, dict) or set(mask_rels) != set(REGIONS):
                raise BadManifest(f"{manifest_path}:{line_no}: masks must name exactly {REGIONS}")

            image = imgproc.read_gray_png(os.path.join(root, image_rel))
            masks = np.stack([
                _read_mask(os.path.join(root, mask_rels[region]), image.shape, frame_id)
                for region in REGIONS
            ])
            samples.append(Sample(image=image, masks=masks, patient_id=patient_id, frame_id=frame_id))

    logger.info(f"Loaded {len(samples)} frames from {root}")
    return samples


def save_dataset(root: str, samples: Sequence[Sample]) -> str:
    """Write samples in the on-disk layout (masks as 0/255 PNGs); returns the manifest path."""
    os.makedirs(os.path.join(root, IMAGE_DIR), exist_ok=True)
    for region in REGIONS:
        os.makedirs(os.path.join(root, MASK_DIR, region), exist_ok=True)

    manifest_path = os.path.join(root, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        for sample in samples:
            name = f"{sample.frame_id}.png"
            image_rel = f"{IMAGE_DIR}/{name}"
            imgproc.write_gray_png(os.path.join(root, image_rel), sample.image)
            mask_rels = {}
            for region, mask in zip(REGIONS, sample.masks):
                rel = f"{MASK_DIR}/{region}/{name}"
                imgproc.write_gray_png(os.path.join(root, rel), (mask * 255).astype(np.uint8))
                mask_rels[region] = rel
            record = {"image": image_rel, "masks": mask_rels,
                      "patient_id": sample.patient_id, "frame_id": sample.frame_id}
            f.write(json.dumps(record, sort_keys=True) + "\n")

    logger.info(f"Wrote {len(samples)} frames to {root}")
    return manifest_path


def split_by_patient(samples: Sequence[Sample], ratios: Tuple[int, int, int] = (8, 1, 1),
                     seed: int = 0) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """Shuffle patients (not frames) and cut them into train/val/test by ratio.

    Validation and test get floor(n * r / total) patients (at least one each);
    the remainder goes to train.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigInvalid(f"Split ratios must be three non-negative numbers, got {ratios}")
    patients = sorted({s.patient_id for s in samples})
    if len(patients) < 3:
        raise TooFewPatients(f"Need at least 3 patients for a three-way split, got {len(patients)}")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    total = float(sum(ratios))
    n = len(order)
    n_val = max(1, int(n * ratios[1] // total))
    n_test = max(1, int(n * ratios[2] // total))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise TooFewPatients(f"{n} patients leave none for training with ratios {ratios}")

    groups = {
        "train": set(order[:n_train]),
        "val": set(order[n_train:n_train + n_val]),
        "test": set(order[n_train + n_val:]),
    }
    train = [s for s in samples if s.patient_id in groups["train"]]
    val = [s for s in samples if s.patient_id in groups["val"]]
    test = [s for s in samples if s.patient_id in groups["test"]]
    logger.info(f"Patient split {n_train}/{n_val}/{n_test} -> frames {len(train)}/{len(val)}/{len(test)}")
    return train, val, test


# Checkpoints

def save_checkpoint(model: CinModel, path: str) -> None:
    """Parameters, BN running stats, optimizer moments and configs in one file."""
    arrays: Dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param.{name}"] = p.values
    for name, buf in model.named_buffers():
        arrays[f"buffer.{name}"] = buf
    meta = {
        "cin": model.config.to_dict(),
        "pen": model.pen_config.to_dict(),
        "context_sets": [list(c) for c in model.config.context_sets()],
        "dtype": np.dtype(model.stages[0].head.weight.dtype).name,
        "optimizer": None,
    }
    state = model.optimizer_state
    if state is not None:
        meta["optimizer"] = state.hyperparameters()
        for name, m in state.exp_avg.items():
            arrays[f"optim.m.{name}"] = m
        for name, v in state.exp_avg_sq.items():
            arrays[f"optim.v.{name}"] = v

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_arrays(path, arrays, meta)
    logger.info(f"Saved checkpoint to {path} ({len(arrays)} arrays)")


def load_checkpoint(path: str) -> CinModel:
    arrays, meta = read_arrays(path)
    try:
        config = CinConfig.from_dict(meta["cin"])
        pen_config = PenConfig.from_dict(meta["pen"])
        dtype = np.dtype(meta.get("dtype", "float32"))
    except (KeyError, TypeError) as e:
        raise CorruptFile(f"{path}: incomplete checkpoint metadata ({e})") from e

    model = build_model(config, pen_config, dtype=dtype)
    for name, p in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise CorruptFile(f"{path}: parameter {name} missing or misshapen")
        p.values = arrays[key].astype(dtype)
    for name, buf in model.named_buffers():
        key = f"buffer.{name}"
        if key not in arrays or arrays[key].shape != buf.shape:
            raise CorruptFile(f"{path}: buffer {name} missing or misshapen")
        buf[...] = arrays[key]

    hyper = meta.get("optimizer")
    if hyper is not None:
        state = AdamWState(**hyper)
        for key, value in arrays.items():
            if key.startswith("optim.m."):
                state.exp_avg[key[len("optim.m."):]] = value
            elif key.startswith("optim.v."):
                state.exp_avg_sq[key[len("optim.v."):]] = value
        model.optimizer_state = state
    logger.info(f"Loaded {config.num_stages}-stage model from {path}")
    return model
