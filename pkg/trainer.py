"""
Training loop, evaluation and ablation harnesses.
PEN and CIN parameters are optimized jointly with AdamW on the summed
stage Dice losses; the learning rate decays linearly per epoch.
"""

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cin import REGIONS, CinConfig, CinModel, build_model, cin_forward, peci_forward
from data import Sample, load_checkpoint, save_checkpoint
from errors import ConfigInvalid, Diverged, EmptyDataset
from losses import LossWeights, macro_dice, threshold, total_loss
from nncore import AdamWState, LrSchedule, Tape, Tensor, adamw_step, backward, lr_linear
from pen import PenConfig, enhance, pen_stack_batch

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
AVERAGE_COLUMN = "average"
BOLUS = REGIONS.index("bolus")
# Order in which the growing ensembles add pipelines
INCREMENTAL_ORDER = ("identity", "sharpen", "clahe", "clahe,sharpen", "clahe,clahe")


@dataclass
class TrainConfig:
    """Everything a training run depends on; saved next to its outputs."""

    epochs: int = 250
    batch_size: int = 16
    initial_lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: Optional[int] = 2000
    threshold: float = 0.5
    workers: int = 1
    dataset_dir: Optional[str] = None
    output_dir: Optional[str] = None
    cin: CinConfig = field(default_factory=CinConfig)
    pen: PenConfig = field(default_factory=PenConfig)
    loss_weights: Optional[LossWeights] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigInvalid(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigInvalid(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.initial_lr > 0):
            raise ConfigInvalid(f"initial_lr must be positive, got {self.initial_lr}")
        if self.weight_decay < 0:
            raise ConfigInvalid(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigInvalid(f"max_steps must be >= 1 when set, got {self.max_steps}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigInvalid(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.workers < 1:
            raise ConfigInvalid(f"workers must be >= 1, got {self.workers}")
        self.cin.validate()
        if self.loss_weights is not None and self.loss_weights.num_stages != self.cin.num_stages:
            raise ConfigInvalid(
                f"{self.loss_weights.num_stages} loss weight rows for {self.cin.num_stages} stages"
            )

    def weights(self) -> LossWeights:
        return self.loss_weights or LossWeights.default(self.cin.num_stages)

    def model_config(self) -> CinConfig:
        return replace(self.cin, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "initial_lr": self.initial_lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "max_steps": self.max_steps,
            "threshold": self.threshold,
            "workers": self.workers,
            "dataset_dir": self.dataset_dir,
            "output_dir": self.output_dir,
            "cin": self.cin.to_dict(),
            "pen": self.pen.to_dict(),
            "loss_weights": None if self.loss_weights is None else self.loss_weights.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"Unknown run config keys: {sorted(unknown)}")
        values = dict(data)
        try:
            if "cin" in values:
                values["cin"] = CinConfig.from_dict(values["cin"])
            if "pen" in values:
                values["pen"] = PenConfig.from_dict(values["pen"])
            if values.get("loss_weights") is not None:
                values["loss_weights"] = LossWeights.from_dict(values["loss_weights"])
            return cls(**values)
        except (TypeError, KeyError) as e:
            raise ConfigInvalid(f"Malformed run config: {e}") from e


@dataclass
class EvalResult:
    """Macro-averaged per-image Dice, one value per region."""

    dice: np.ndarray
    n_images: int

    @property
    def average(self) -> float:
        return float(np.mean(self.dice))

    @property
    def bolus(self) -> float:
        return float(self.dice[BOLUS])

    def as_dict(self) -> Dict[str, float]:
        row = {region: float(d) for region, d in zip(REGIONS, self.dice)}
        row[AVERAGE_COLUMN] = self.average
        return row


@dataclass
class TrainResult:
    model: CinModel
    history: List[dict]
    steps: int
    best_val_bolus: Optional[float] = None
    best_path: Optional[str] = None
    last_path: Optional[str] = None


def _stack_masks(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.masks for s in samples]).astype(np.float64)


def _model_dtype(model: CinModel):
    return model.stages[0].head.weight.dtype


class Trainer:
    """Joint PEN + CIN optimization over a fixed training split."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.model = build_model(config.model_config(), config.pen)
        self.model.optimizer_state = AdamWState(weight_decay=config.weight_decay)
        self.weights = config.weights()
        self.schedule = LrSchedule(initial_lr=config.initial_lr, total_epochs=config.epochs)
        self.steps = 0
        self.history: List[dict] = []

    def _log_path(self) -> Optional[str]:
        if not self.config.output_dir:
            return None
        return os.path.join(self.config.output_dir, LOG_NAME)

    def _write_record(self, record: dict) -> None:
        path = self._log_path()
        if path is None:
            return
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def train_step(self, stack: np.ndarray, masks: np.ndarray, lr: float) -> float:
        """One forward/backward/AdamW update on a mini-batch; returns the loss."""
        model = self.model
        dtype = _model_dtype(model)
        params = model.parameter_dict()
        with Tape() as tape:
            outputs = peci_forward(model, Tensor(stack, dtype=dtype), training=True)
            loss = total_loss([probs for _, probs in outputs], masks, self.weights)
            value = loss.item()
            if not math.isfinite(value):
                logger.error(f"Non-finite loss {value} at step {self.steps}")
                raise Diverged(f"Loss became {value} at step {self.steps}")
            backward(loss, tape, params.values())
        grads = {name: p.grad for name, p in params.items()}
        adamw_step(params, grads, model.optimizer_state, lr)
        self.steps += 1
        return value

    def fit(self, train_set: Sequence[Sample], val_set: Sequence[Sample] = ()) -> TrainResult:
        cfg = self.config
        if not train_set:
            raise EmptyDataset("Training split is empty")
        if cfg.output_dir:
            os.makedirs(cfg.output_dir, exist_ok=True)
            log_path = self._log_path()
            if os.path.exists(log_path):
                os.remove(log_path)

        dtype = _model_dtype(self.model)
        stacks = pen_stack_batch([s.image for s in train_set], cfg.pen, workers=cfg.workers, dtype=dtype)
        masks = _stack_masks(train_set).astype(dtype)
        val_stacks = None
        if val_set:
            val_stacks = pen_stack_batch([s.image for s in val_set], cfg.pen, workers=cfg.workers, dtype=dtype)

        rng = np.random.default_rng(cfg.seed)
        best = None
        best_path = os.path.join(cfg.output_dir, BEST_NAME) if cfg.output_dir else None
        logger.info(
            f"Training {cfg.cin.num_stages}-stage model on {len(train_set)} frames "
            f"(batch {cfg.batch_size}, lr {cfg.initial_lr}, max steps {cfg.max_steps})"
        )

        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and self.steps >= cfg.max_steps:
                break
            lr = lr_linear(self.schedule, epoch)
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and self.steps >= cfg.max_steps:
                    break
                idx = order[start:start + cfg.batch_size]
                losses.append(self.train_step(stacks[idx], masks[idx], lr))

            record = {"epoch": epoch + 1, "lr": lr, "steps": self.steps,
                      "train_loss": float(np.mean(losses)) if losses else None}
            if val_set:
                result = evaluate_stacks(self.model, val_stacks, val_set, cfg.threshold, cfg.batch_size)
                record["val_dice"] = result.as_dict()
                if best is None or result.bolus > best:
                    best = result.bolus
                    if best_path:
                        save_checkpoint(self.model, best_path)
            self.history.append(record)
            self._write_record(record)
            logger.info(
                f"Epoch {epoch + 1}/{cfg.epochs} loss {record['train_loss']} lr {lr:.6f}"
                + (f" val bolus {record['val_dice']['bolus']:.4f}" if val_set else "")
            )

        last_path = None
        if cfg.output_dir:
            last_path = os.path.join(cfg.output_dir, LAST_NAME)
            save_checkpoint(self.model, last_path)
            if best is None:
                save_checkpoint(self.model, best_path)
        return TrainResult(model=self.model, history=self.history, steps=self.steps,
                           best_val_bolus=best, best_path=best_path, last_path=last_path)


def train(config: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample] = ()) -> TrainResult:
    try:
        return Trainer(config).fit(train_set, val_set)
    except Diverged as e:
        logger.error(f"Training diverged: {e}")
        raise


# Evaluation

def predict_probs(model: CinModel, stacks: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Final-stage probabilities for precomputed PEN input stacks, eval mode."""
    dtype = _model_dtype(model)
    chunks = []
    for start in range(0, len(stacks), batch_size):
        outputs = peci_forward(model, Tensor(stacks[start:start + batch_size], dtype=dtype), training=False)
        chunks.append(outputs[-1][1].values)
    return np.concatenate(chunks)


def score_predictions(probs: Sequence[np.ndarray], masks: Sequence[np.ndarray], theta: float = 0.5) -> EvalResult:
    """Threshold and score per image, then average per region."""
    if len(probs) == 0:
        raise EmptyDataset("Nothing to evaluate")
    preds = [threshold(p, theta) for p in probs]
    return EvalResult(dice=macro_dice(preds, list(masks)), n_images=len(preds))


def evaluate_stacks(model: CinModel, stacks: np.ndarray, samples: Sequence[Sample], theta: float = 0.5,
                    batch_size: int = 16) -> EvalResult:
    if not samples:
        raise EmptyDataset("Evaluation split is empty")
    probs = predict_probs(model, stacks, batch_size)
    return score_predictions(list(probs), [s.masks for s in samples], theta)


def evaluate(model, samples: Sequence[Sample], theta: float = 0.5, workers: int = 1,
             batch_size: int = 16) -> EvalResult:
    """Per-region macro Dice of a model (or checkpoint path) on a split."""
    if isinstance(model, str):
        model = load_checkpoint(model)
    if not samples:
        raise EmptyDataset("Evaluation split is empty")
    stacks = pen_stack_batch([s.image for s in samples], model.pen_config, workers=workers,
                             dtype=_model_dtype(model))
    result = evaluate_stacks(model, stacks, samples, theta, batch_size)
    logger.info(f"Evaluated {result.n_images} frames: average Dice {result.average:.4f}, "
                f"bolus {result.bolus:.4f}")
    return result


def write_table(path: str, rows: Sequence[dict]) -> None:
    """CSV with columns model, the six regions, average, then any extra columns."""
    columns = ["model", *REGIONS, AVERAGE_COLUMN]
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    logger.info(f"Wrote {len(rows)} rows to {path}")


# Ablations

@dataclass
class Splits:
    train: Sequence[Sample]
    val: Sequence[Sample]
    test: Sequence[Sample]


def _variant_dir(base: TrainConfig, kind: str, name: str) -> Optional[str]:
    if not base.output_dir:
        return None
    slug = "".join(c if c.isalnum() or c in "-_=" else "_" for c in name).strip("_")
    return os.path.join(base.output_dir, f"ablate_{kind}", slug)


def _run_variant(name: str, config: TrainConfig, splits: Splits, seeds: Sequence[int]) -> Tuple[dict, List[TrainResult]]:
    """Train one configuration per seed and average its test Dice."""
    scores = []
    results = []
    for seed in seeds:
        out = config.output_dir
        if out and len(seeds) > 1:
            out = os.path.join(out, f"seed{seed}")
        cfg = replace(config, seed=seed, output_dir=out)
        result = train(cfg, splits.train, splits.val)
        scores.append(evaluate(result.model, splits.test, cfg.threshold, cfg.workers, cfg.batch_size).dice)
        results.append(result)
    row = {"model": name}
    row.update(EvalResult(dice=np.mean(scores, axis=0), n_images=len(splits.test)).as_dict())
    return row, results


def time_inference(model: CinModel, stacks: np.ndarray, repeats: int = 3) -> float:
    """Best-of-`repeats` CIN time per image in milliseconds, on precomputed stacks."""
    dtype = _model_dtype(model)
    x_bar = enhance(Tensor(stacks, dtype=dtype), model.pen)
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        cin_forward(model, x_bar, training=False)
        best = min(best, time.perf_counter() - start)
    return 1000.0 * best / len(stacks)


def ablate_stages(base: TrainConfig, splits: Splits, stage_counts: Sequence[int] = (1, 2, 3, 4),
                  seeds: Sequence[int] = (0,), timing_repeats: int = 3) -> List[dict]:
    """One row per cascade depth: test Dice, train bolus Dice and inference time."""
    rows = []
    for count in stage_counts:
        name = f"S={count}"
        cfg = replace(base, cin=replace(base.cin, num_stages=count, contexts=None), loss_weights=None,
                      output_dir=_variant_dir(base, "stages", name))
        row, results = _run_variant(name, cfg, splits, seeds)
        model = results[0].model
        row["train_bolus"] = float(np.mean([
            evaluate(r.model, splits.train, cfg.threshold, cfg.workers, cfg.batch_size).bolus for r in results
        ]))
        stacks = pen_stack_batch([s.image for s in splits.test], model.pen_config, dtype=_model_dtype(model))
        per_image = time_inference(model, stacks, timing_repeats)
        row["ms_per_image"] = per_image
        row["ms_per_stage"] = per_image / count
        rows.append(row)
        logger.info(f"Stage ablation {name}: bolus {row['bolus']:.4f}, {per_image:.2f} ms/image")
    return rows


def incremental_order(pipelines: Sequence) -> tuple:
    """Sort pipelines into INCREMENTAL_ORDER; unlisted ones keep their place after the listed ones."""
    rank = {name: i for i, name in enumerate(INCREMENTAL_ORDER)}
    return tuple(sorted(pipelines, key=lambda p: rank.get(str(p), len(rank))))


def preprocessing_variants(pen: PenConfig) -> List[Tuple[str, PenConfig]]:
    """Single-algorithm PENs, growing ensembles, a CLAHE-only ensemble and the full PEN."""
    pipelines = pen.pipelines
    variants = [("Identity mapping (CIN)", PenConfig.without_pen())]
    for spec in pipelines:
        if spec.steps != ("identity",):
            variants.append((str(spec), PenConfig(pipelines=(spec,))))
    ordered = incremental_order(pipelines)
    for k in range(2, len(ordered)):
        names = "+".join(str(p) for p in ordered[:k])
        variants.append((f"first {k}: {names}", PenConfig(pipelines=ordered[:k])))
    clahe_only = tuple(p for p in pipelines if "clahe" in p.steps)
    if clahe_only:
        variants.append(("CLAHE-based only (no identity)", PenConfig(pipelines=clahe_only)))
    variants.append((f"PEN (N={len(pipelines)})", pen))
    return variants


def ablate_preprocessing(base: TrainConfig, splits: Splits,
                         variants: Optional[Sequence[Tuple[str, PenConfig]]] = None,
                         seeds: Sequence[int] = (0,)) -> List[dict]:
    """One row per PEN input set, with per-image preprocessing wall time."""
    variants = list(variants) if variants is not None else preprocessing_variants(base.pen)
    images = [s.image for s in splits.test]
    rows = []
    for name, pen in variants:
        start = time.perf_counter()
        pen_stack_batch(images, pen)
        preprocess_ms = 1000.0 * (time.perf_counter() - start) / max(len(images), 1)
        cfg = replace(base, pen=pen, output_dir=_variant_dir(base, "preprocessing", name))
        row, _ = _run_variant(name, cfg, splits, seeds)
        row["num_inputs"] = pen.num_inputs
        row["preprocess_ms"] = preprocess_ms
        rows.append(row)
    return rows


DEFAULT_CONTEXT_CHOICES: Tuple[Tuple[str, ...], ...] = (
    REGIONS,
    ("cervical_spine", "mandible"),
    ("hyoid_bone", "vocal_fold"),
    ("hyoid_bone", "vocal_fold", "soft_tissue"),
)


def ablate_context(base: TrainConfig, splits: Splits,
                   choices: Sequence[Sequence[str]] = DEFAULT_CONTEXT_CHOICES,
                   seeds: Sequence[int] = (0,)) -> List[dict]:
    """One row per context set (used between every pair of stages)."""
    num_stages = max(base.cin.num_stages, 2)
    rows = []
    for choice in choices:
        choice = tuple(choice)
        if not choice:
            raise ConfigInvalid("An empty context set turns the cascade into independent stages")
        name = "all" if set(choice) == set(REGIONS) else "+".join(choice)
        cin = replace(base.cin, num_stages=num_stages, contexts=(choice,) * (num_stages - 1))
        cfg = replace(base, cin=cin, loss_weights=None, output_dir=_variant_dir(base, "context", name))
        row, _ = _run_variant(name, cfg, splits, seeds)
        row["stage2_in_channels"] = cin.stage_configs()[1].in_channels
        rows.append(row)
    return rows


def ablate_components(base: TrainConfig, splits: Splits, seeds: Sequence[int] = (0,)) -> List[dict]:
    """Single-stage baseline without PEN, the 2-stage cascade without PEN, and the full model."""
    variants = [
        ("TransUNet", 1, PenConfig.without_pen()),
        ("CIN (w/o PEN)", 2, PenConfig.without_pen()),
        ("PECI-Net", 2, base.pen if base.pen.enabled else PenConfig()),
    ]
    rows = []
    for name, stages, pen in variants:
        cin = replace(base.cin, num_stages=stages, contexts=None)
        cfg = replace(base, cin=cin, pen=pen, loss_weights=None,
                      output_dir=_variant_dir(base, "components", name))
        row, _ = _run_variant(name, cfg, splits, seeds)
        rows.append(row)
    return rows
