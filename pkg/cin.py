"""
Cascaded inference network (CIN).
Each stage is a TransUNet-style encoder / transformer / decoder with skips.
Stage 1 sees the enhanced image; later stages also see selected logit
channels of the previous stage. Outputs are per-region sigmoids.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

import imgproc
from errors import ConfigInvalid, ShapeMismatch
from losses import threshold
from nncore import (
    TRAIN_DTYPE,
    AdamWState,
    BatchNorm2d,
    Conv2d,
    ConvBnRelu,
    LayerNorm,
    Module,
    Tensor,
    TransformerBlock,
    bilinear_upsample,
    concat_channels,
    relu,
    reshape,
    select_channels,
    sigmoid,
    transpose,
)
from pen import PEN_OUT_CHANNELS, PenConfig, PenWeights, enhance, pen_init, pen_stack_batch

logger = logging.getLogger(__name__)

REGIONS: Tuple[str, ...] = ("bolus", "mandible", "hyoid_bone", "vocal_fold", "cervical_spine", "soft_tissue")
DEFAULT_CONTEXT: Tuple[str, ...] = ("cervical_spine", "mandible")
DECODER_BLOCKS = 4


def region_index(name: str) -> int:
    try:
        return REGIONS.index(name)
    except ValueError:
        raise ConfigInvalid(f"Unknown region {name!r}; expected one of {REGIONS}") from None


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters of one segmentation stage."""

    preset: str = "mini"
    in_channels: int = PEN_OUT_CHANNELS
    out_channels: int = len(REGIONS)
    image_size: int = 64
    encoder_channels: Tuple[int, ...] = (16, 32, 64)
    stem_kernel: int = 3
    bottleneck_blocks: int = 0
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    head_channels: int = 64
    decoder_channels: Tuple[int, ...] = (32, 16, 16, 16)

    @classmethod
    def mini(cls, in_channels: int = PEN_OUT_CHANNELS, image_size: int = 64) -> "StageConfig":
        return cls(preset="mini", in_channels=in_channels, image_size=image_size)

    @classmethod
    def paper(cls, in_channels: int = PEN_OUT_CHANNELS, image_size: int = 224) -> "StageConfig":
        # 224 input -> 1/16 features -> 14 x 14 x 768 tokens, 12 blocks, decoder 512..16 -> 6
        return cls(
            preset="paper",
            in_channels=in_channels,
            image_size=image_size,
            encoder_channels=(64, 256, 512, 1024),
            stem_kernel=7,
            bottleneck_blocks=1,
            hidden_size=768,
            num_layers=12,
            num_heads=12,
            mlp_dim=3072,
            head_channels=512,
            decoder_channels=(256, 128, 64, 16),
        )

    @classmethod
    def from_preset(cls, preset: str, in_channels: int, image_size: Optional[int] = None) -> "StageConfig":
        if preset == "mini":
            return cls.mini(in_channels, image_size or 64)
        if preset == "paper":
            return cls.paper(in_channels, image_size or 224)
        raise ConfigInvalid(f"Unknown backbone preset {preset!r}; expected 'mini' or 'paper'")

    @property
    def token_grid(self) -> int:
        return self.image_size // 2 ** len(self.encoder_channels)

    def validate(self) -> None:
        levels = len(self.encoder_channels)
        if levels < 1 or levels > DECODER_BLOCKS:
            raise ConfigInvalid(f"Need 1..{DECODER_BLOCKS} encoder levels, got {levels}")
        if self.image_size % 2 ** levels:
            raise ConfigInvalid(f"Image size {self.image_size} not divisible by {2 ** levels}")
        if len(self.decoder_channels) != DECODER_BLOCKS:
            raise ConfigInvalid(f"Need {DECODER_BLOCKS} decoder blocks, got {len(self.decoder_channels)}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigInvalid("Stage channel counts must be positive")


@dataclass(frozen=True)
class CinConfig:
    """Number of stages, their backbone, and the context regions passed between stages."""

    num_stages: int = 2
    contexts: Optional[Tuple[Tuple[str, ...], ...]] = None
    preset: str = "mini"
    image_size: int = 64
    seed: int = 0

    def context_sets(self) -> Tuple[Tuple[str, ...], ...]:
        if self.contexts is None:
            return (DEFAULT_CONTEXT,) * max(self.num_stages - 1, 0)
        return tuple(tuple(c) for c in self.contexts)

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ConfigInvalid(f"num_stages must be >= 1, got {self.num_stages}")
        contexts = self.context_sets()
        if len(contexts) != self.num_stages - 1:
            raise ConfigInvalid(
                f"{self.num_stages} stages need {self.num_stages - 1} context sets, got {len(contexts)}"
            )
        for i, ctx in enumerate(contexts):
            if not ctx:
                raise ConfigInvalid(f"Context set for stage {i + 2} is empty")
            if len(set(ctx)) != len(ctx):
                raise ConfigInvalid(f"Context set for stage {i + 2} repeats a region: {ctx}")
            for name in ctx:
                region_index(name)

    def stage_configs(self) -> List[StageConfig]:
        """Stage 1 takes 3 channels; every later stage takes 3 plus the size of its context set."""
        widths = [PEN_OUT_CHANNELS] + [PEN_OUT_CHANNELS + len(c) for c in self.context_sets()]
        return [StageConfig.from_preset(self.preset, w, self.image_size) for w in widths]

    def to_dict(self) -> dict:
        return {
            "num_stages": self.num_stages,
            "contexts": None if self.contexts is None else [list(c) for c in self.contexts],
            "preset": self.preset,
            "image_size": self.image_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CinConfig":
        contexts = data.get("contexts")
        return cls(
            num_stages=int(data.get("num_stages", 2)),
            contexts=None if contexts is None else tuple(tuple(c) for c in contexts),
            preset=data.get("preset", "mini"),
            image_size=int(data.get("image_size", 64)),
            seed=int(data.get("seed", 0)),
        )


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand, identity shortcut."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype):
        width = max(channels // 4, 1)
        self.reduce = ConvBnRelu(channels, width, 1, rng, dtype=dtype)
        self.conv = ConvBnRelu(width, width, 3, rng, dtype=dtype)
        self.expand = Conv2d(width, channels, 1, rng, dtype=dtype)
        self.expand_bn = BatchNorm2d(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.expand_bn(self.expand(self.conv(self.reduce(x, training), training)), training)
        return relu(h + x)


class EncoderLevel(Module):
    """Stride-2 convolution (+ optional bottlenecks): halves the resolution."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, blocks: int, rng: np.random.Generator, dtype):
        self.down = ConvBnRelu(in_ch, out_ch, kernel, rng, stride=2, dtype=dtype)
        self.blocks = [Bottleneck(out_ch, rng, dtype) for _ in range(blocks)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = self.down(x, training)
        for block in self.blocks:
            x = block(x, training)
        return x


class DecoderBlock(Module):
    """Optional 2x bilinear upsampling, optional skip concatenation, Conv + BN + ReLU."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, upsample: bool, rng: np.random.Generator, dtype):
        self.upsample = upsample
        self.skip_ch = skip_ch
        self.conv = ConvBnRelu(in_ch + skip_ch, out_ch, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor, skip: Optional[Tensor], training: bool) -> Tensor:
        if self.upsample:
            x = bilinear_upsample(x, 2)
        if skip is not None:
            x = concat_channels([x, skip])
        return self.conv(x, training)


class Stage(Module):
    """One segmentation stage: C x H x W input -> one logit map per region."""

    def __init__(self, config: StageConfig, rng: np.random.Generator, dtype=TRAIN_DTYPE):
        config.validate()
        self.config = config
        levels = len(config.encoder_channels)

        self.encoder = []
        in_ch = config.in_channels
        for i, ch in enumerate(config.encoder_channels):
            kernel = config.stem_kernel if i == 0 else 3
            self.encoder.append(EncoderLevel(in_ch, ch, kernel, config.bottleneck_blocks, rng, dtype))
            in_ch = ch

        grid = config.token_grid
        self.patch_embed = Conv2d(in_ch, config.hidden_size, 1, rng, dtype=dtype)
        self.pos_embed = Tensor((rng.standard_normal((1, grid * grid, config.hidden_size)) * 0.02).astype(dtype),
                                requires_grad=True)
        self.blocks = [
            TransformerBlock(config.hidden_size, config.num_heads, config.mlp_dim, rng, dtype)
            for _ in range(config.num_layers)
        ]
        self.norm = LayerNorm(config.hidden_size, dtype)
        self.conv_more = ConvBnRelu(config.hidden_size, config.head_channels, 3, rng, dtype=dtype)

        # decoder block k lands on resolution grid * 2^(k+1) until full size is reached
        self.decoder = []
        in_ch = config.head_channels
        for k, out_ch in enumerate(config.decoder_channels):
            upsample = k < levels
            skip_level = levels - 2 - k
            skip_ch = config.encoder_channels[skip_level] if upsample and skip_level >= 0 else 0
            self.decoder.append(DecoderBlock(in_ch, skip_ch, out_ch, upsample, rng, dtype))
            in_ch = out_ch
        self.head = Conv2d(in_ch, config.out_channels, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False, taps: Optional[list] = None) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ShapeMismatch(
                f"Stage expects B x {cfg.in_channels} x {cfg.image_size} x {cfg.image_size}, got {x.shape}"
            )
        features = []
        h = x
        for level in self.encoder:
            h = level(h, training)
            features.append(h)

        batch = x.shape[0]
        grid = cfg.token_grid
        tokens = self.patch_embed(h)
        tokens = transpose(reshape(tokens, (batch, cfg.hidden_size, grid * grid)), (0, 2, 1))
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        h = reshape(transpose(tokens, (0, 2, 1)), (batch, cfg.hidden_size, grid, grid))
        h = self.conv_more(h, training)

        levels = len(self.encoder)
        for k, block in enumerate(self.decoder):
            skip_level = levels - 2 - k
            skip = features[skip_level] if block.skip_ch else None
            h = block(h, skip, training)
            if taps is not None:
                taps.append(h)
        return self.head(h)


def stage_forward(stage: Stage, x: Tensor, training: bool = False) -> Tensor:
    return stage(x, training)


@dataclass
class CinModel:
    """The stages, the context regions handed between them and the attached PEN weights."""

    config: CinConfig
    pen_config: PenConfig
    stages: List[Stage]
    context_indices: List[Tuple[int, ...]]
    pen: Optional[PenWeights]
    optimizer_state: Optional[AdamWState] = None

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def named_parameters(self):
        if self.pen is not None:
            yield from self.pen.named_parameters()
        for i, stage in enumerate(self.stages):
            yield from stage.named_parameters(f"stages.{i}.")

    def named_buffers(self):
        for i, stage in enumerate(self.stages):
            yield from stage.named_buffers(f"stages.{i}.")

    def parameter_dict(self) -> dict:
        return dict(self.named_parameters())

    def stage_parameters(self, index: int) -> List[Tensor]:
        return self.stages[index].parameters()


def build_model(config: CinConfig, pen_config: Optional[PenConfig] = None, dtype=TRAIN_DTYPE) -> CinModel:
    """Randomly initialised (seeded) PEN + CIN."""
    pen_config = pen_config or PenConfig()
    config.validate()
    stage_cfgs = config.stage_configs()
    stages = []
    for i, scfg in enumerate(stage_cfgs):
        rng = np.random.default_rng([config.seed, i + 1])
        stages.append(Stage(scfg, rng, dtype))
    contexts = [tuple(region_index(r) for r in ctx) for ctx in config.context_sets()]
    if not pen_config.enabled and pen_config.num_inputs != 1:
        raise ConfigInvalid("Gray replication (PEN disabled) takes exactly one pipeline")
    pen = pen_init(pen_config, config.seed, dtype) if pen_config.enabled else None
    logger.info(
        f"Built {config.num_stages}-stage {config.preset} model: stage inputs "
        f"{[s.in_channels for s in stage_cfgs]}, PEN inputs {pen_config.num_inputs if pen else 'off'}"
    )
    return CinModel(config=config, pen_config=pen_config, stages=stages, context_indices=contexts, pen=pen)


LogitHook = Callable[[int, Tensor], Tensor]


def cin_forward(model: CinModel, x_bar: Tensor, training: bool = False,
                logit_hook: Optional[LogitHook] = None,
                stage_inputs: Optional[list] = None) -> List[Tuple[Tensor, Tensor]]:
    """Run the cascade; returns (logits, probabilities) per stage.

    `logit_hook(i, logits)` may replace a stage's logits before they are used as
    context (test injection); `stage_inputs` collects every stage's input.
    """
    if x_bar.ndim != 4 or x_bar.shape[1] != PEN_OUT_CHANNELS:
        raise ShapeMismatch(f"CIN expects B x {PEN_OUT_CHANNELS} x H x W, got {x_bar.shape}")
    outputs = []
    logits = None
    for i, stage in enumerate(model.stages):
        if i == 0:
            stage_in = x_bar
        else:
            context = select_channels(logits, model.context_indices[i - 1])
            stage_in = concat_channels([x_bar, context])
        if stage_inputs is not None:
            stage_inputs.append(stage_in)
        logits = stage(stage_in, training)
        outputs.append((logits, sigmoid(logits)))
        if logit_hook is not None:
            logits = logit_hook(i, logits)
    return outputs


def peci_forward(model: CinModel, stack: Tensor, training: bool = False) -> List[Tuple[Tensor, Tensor]]:
    """Enhanced stack (B x N x H x W) -> PEN -> CIN."""
    return cin_forward(model, enhance(stack, model.pen), training)


def predict(model: CinModel, img: np.ndarray, theta: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Binary masks and final-stage probabilities (each |T| x H x W) for one frame."""
    img = imgproc.check_gray(img)
    dtype = model.stages[0].head.weight.dtype
    stack = pen_stack_batch([img], model.pen_config, dtype=dtype)
    outputs = peci_forward(model, Tensor(stack, dtype=dtype), training=False)
    probs = outputs[-1][1].values[0]
    return threshold(probs, theta), probs
