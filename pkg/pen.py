"""
Preprocessing ensemble network (PEN).
Runs N classical enhancement pipelines on a frame, stacks the results and
fuses them into a 3-channel image with a trainable 7x7 convolution + ReLU.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

import imgproc
from errors import ConfigInvalid, ShapeMismatch
from imgproc import ClaheParams, PipelineSpec
from nncore import TRAIN_DTYPE, Tensor, concat_channels, conv2d, relu

logger = logging.getLogger(__name__)

PEN_OUT_CHANNELS = 3
PEN_KERNEL = 7


@dataclass(frozen=True)
class PenConfig:
    """Which pipelines feed the ensemble; `enabled=False` means gray replication instead of PEN."""

    pipelines: Tuple[PipelineSpec, ...] = field(default_factory=imgproc.default_pipelines)
    enabled: bool = True

    def __post_init__(self):
        if not self.pipelines:
            raise ConfigInvalid("PEN needs at least one pipeline")

    @property
    def num_inputs(self) -> int:
        return len(self.pipelines)

    @classmethod
    def without_pen(cls) -> "PenConfig":
        """The "CIN (w/o PEN)" configuration: raw gray values replicated to 3 channels."""
        return cls(pipelines=(PipelineSpec(("identity",)),), enabled=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], clahe: Optional[ClaheParams] = None,
                    enabled: bool = True) -> "PenConfig":
        clahe = clahe or ClaheParams()
        return cls(pipelines=tuple(PipelineSpec.parse(t, clahe) for t in tokens), enabled=enabled)

    def to_dict(self) -> dict:
        clahe = self.pipelines[0].clahe
        return {
            "pipelines": [str(p) for p in self.pipelines],
            "clahe": clahe.to_dict(),
            "enabled": self.enabled,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PenConfig":
        clahe = ClaheParams.from_dict(data.get("clahe", {}))
        tokens = data.get("pipelines") or [str(p) for p in imgproc.default_pipelines()]
        return cls.from_tokens(tokens, clahe, enabled=bool(data.get("enabled", True)))


@dataclass
class PenWeights:
    """theta_PEN: 3 x N x 7 x 7 kernel and 3 biases."""

    weight: Tensor
    bias: Tensor

    @property
    def num_inputs(self) -> int:
        return self.weight.shape[1]

    def named_parameters(self):
        yield "pen.weight", self.weight
        yield "pen.bias", self.bias


def pen_apply_algorithms(img: np.ndarray, config: PenConfig) -> np.ndarray:
    """Stack the enhanced variants of one frame as an N x H x W float array in [0, 1]."""
    img = imgproc.check_gray(img)
    layers = [imgproc.apply_pipeline(spec, img) for spec in config.pipelines]
    return np.stack(layers).astype(np.float64) / 255.0


def pen_stack_batch(images: Sequence[np.ndarray], config: PenConfig, workers: int = 1,
                    dtype=TRAIN_DTYPE) -> np.ndarray:
    """Enhanced stacks for many frames, B x N x H x W, in input order."""
    if workers > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stacks = list(pool.map(lambda im: pen_apply_algorithms(im, config), images))
    else:
        stacks = [pen_apply_algorithms(im, config) for im in images]
    return np.stack(stacks).astype(dtype)


def pen_init(config: PenConfig, seed: int, dtype=TRAIN_DTYPE) -> PenWeights:
    """He-normal kernel (fan_in = N * 49), zero bias."""
    rng = np.random.default_rng(seed)
    n = config.num_inputs
    fan_in = n * PEN_KERNEL * PEN_KERNEL
    weight = rng.standard_normal((PEN_OUT_CHANNELS, n, PEN_KERNEL, PEN_KERNEL)) * math.sqrt(2.0 / fan_in)
    return PenWeights(
        weight=Tensor(weight.astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros(PEN_OUT_CHANNELS, dtype=dtype), requires_grad=True),
    )


def pen_forward(stack: Tensor, weights: PenWeights) -> Tensor:
    """x_bar = ReLU(Conv7x7(stack)) with same padding; B x N x H x W -> B x 3 x H x W."""
    if stack.ndim != 4 or stack.shape[1] != weights.num_inputs:
        raise ShapeMismatch(
            f"PEN expects B x {weights.num_inputs} x H x W input, got {stack.shape}"
        )
    return relu(conv2d(stack, weights.weight, weights.bias, stride=1, pad=PEN_KERNEL // 2))


def replicate_gray(stack: Tensor) -> Tensor:
    """Gray-value replication into 3 channels, used when PEN is disabled."""
    if stack.ndim != 4 or stack.shape[1] != 1:
        raise ShapeMismatch(f"Gray replication needs a single input channel, got {stack.shape}")
    return concat_channels([stack] * PEN_OUT_CHANNELS)


def enhance(stack: Tensor, weights: Optional[PenWeights]) -> Tensor:
    """Front end of the network: PEN when weights are given, gray replication otherwise."""
    if weights is None:
        return replicate_gray(stack)
    return pen_forward(stack, weights)
