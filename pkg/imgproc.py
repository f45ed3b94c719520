"""
Classical X-ray enhancement algorithms for 8-bit grayscale frames.
Identity, Laplacian sharpening, CLAHE and their compositions.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from PIL import Image

from errors import ConfigInvalid, EmptyHistogram, ImageTooSmall, MissingFile, ShapeMismatch

logger = logging.getLogger(__name__)

NUM_BINS = 256
STEP_NAMES = ("identity", "sharpen", "clahe")


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def check_gray(img: np.ndarray) -> np.ndarray:
    """Validate a GrayImage (2-D uint8 array) and return it."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeMismatch(f"Expected a 2-D grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ShapeMismatch(f"Expected uint8 intensities, got {img.dtype}")
    return img


@dataclass(frozen=True)
class ClaheParams:
    """Tile grid and clip limit for CLAHE."""

    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0  # relative to the mean bin height; math.inf disables clipping
    bins: int = NUM_BINS

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ConfigInvalid(f"CLAHE tile grid must be positive, got {self.tiles_x}x{self.tiles_y}")
        if not (self.clip_limit > 1.0):
            raise ConfigInvalid(f"CLAHE clip_limit must be > 1.0 or inf, got {self.clip_limit}")
        if self.bins != NUM_BINS:
            raise ConfigInvalid(f"CLAHE works on {NUM_BINS} bins, got {self.bins}")

    def absolute_clip(self, tile_pixels: int) -> float:
        """Convert the relative clip limit to a per-bin count ceiling."""
        if math.isinf(self.clip_limit):
            return math.inf
        return float(max(1, int(round_half_away(self.clip_limit * tile_pixels / self.bins))))

    def to_dict(self) -> dict:
        return {
            "tiles_x": self.tiles_x,
            "tiles_y": self.tiles_y,
            "clip_limit": "inf" if math.isinf(self.clip_limit) else self.clip_limit,
            "bins": self.bins,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClaheParams":
        clip = data.get("clip_limit", 2.0)
        return cls(
            tiles_x=int(data.get("tiles_x", 8)),
            tiles_y=int(data.get("tiles_y", 8)),
            clip_limit=math.inf if clip in ("inf", None) else float(clip),
            bins=int(data.get("bins", NUM_BINS)),
        )


@dataclass(frozen=True)
class PipelineSpec:
    """Ordered chain of enhancement steps, applied left to right."""

    steps: Tuple[str, ...]
    clahe: ClaheParams = field(default_factory=ClaheParams)

    def __post_init__(self):
        if not self.steps:
            raise ConfigInvalid("A pipeline needs at least one step")
        unknown = [s for s in self.steps if s not in STEP_NAMES]
        if unknown:
            raise ConfigInvalid(f"Unknown pipeline steps {unknown}; expected some of {STEP_NAMES}")

    @classmethod
    def parse(cls, text: str, clahe: ClaheParams = None) -> "PipelineSpec":
        """Parse a token list such as "clahe,sharpen"."""
        steps = tuple(token.strip().lower() for token in text.split(",") if token.strip())
        return cls(steps=steps, clahe=clahe or ClaheParams())

    def __str__(self) -> str:
        return ",".join(self.steps)


def default_pipelines(clahe: ClaheParams = None) -> Tuple[PipelineSpec, ...]:
    """The five enhancement pipelines of the preprocessing ensemble, in fixed order."""
    clahe = clahe or ClaheParams()
    return tuple(
        PipelineSpec.parse(text, clahe)
        for text in ("identity", "sharpen", "clahe", "clahe,clahe", "clahe,sharpen")
    )


def identity(img: np.ndarray) -> np.ndarray:
    """Return an exact copy of the frame."""
    return check_gray(img).copy()


def laplacian_sharpen(img: np.ndarray) -> np.ndarray:
    """Add the negative 4-neighbour Laplacian to every pixel (replicate borders)."""
    img = check_gray(img)
    height, width = img.shape
    if height < 3 or width < 3:
        raise ImageTooSmall(f"Sharpening needs at least 3x3 pixels, got {width}x{height}")

    x = np.pad(img.astype(np.float64), 1, mode="edge")
    center = x[1:-1, 1:-1]
    neighbours = x[2:, 1:-1] + x[:-2, 1:-1] + x[1:-1, 2:] + x[1:-1, :-2]
    sharpened = 5.0 * center - neighbours
    return round_half_away(np.clip(sharpened, 0.0, 255.0)).astype(np.uint8)


def clip_redistribute(hist: np.ndarray, clip: float) -> np.ndarray:
    """Clip a 256-bin histogram at `clip` counts and spread the excess evenly."""
    hist = np.asarray(hist, dtype=np.int64)
    if hist.shape != (NUM_BINS,):
        raise ShapeMismatch(f"Expected {NUM_BINS} bins, got {hist.shape}")
    if math.isinf(clip):
        return hist.copy()

    ceiling = int(clip)
    excess = int(np.maximum(hist - ceiling, 0).sum())
    clipped = np.minimum(hist, ceiling)
    clipped += excess // NUM_BINS
    remainder = excess % NUM_BINS
    clipped[:remainder] += 1
    return clipped


def tile_lut(hist: np.ndarray) -> np.ndarray:
    """Equalization lookup table: LUT[v] = round(255 * CDF(v) / total)."""
    hist = np.asarray(hist, dtype=np.int64)
    total = int(hist.sum())
    if total <= 0:
        raise EmptyHistogram("Cannot build a lookup table from an empty histogram")
    cdf = np.cumsum(hist)
    # integer form of round-half-away for non-negative values
    return ((510 * cdf + total) // (2 * total)).astype(np.uint8)


def _tile_weights(length: int, tile: int, tiles: int):
    """Nearest tile-center indices and bilinear weights along one axis."""
    pos = (np.arange(length, dtype=np.float64) + 0.5) / tile - 0.5
    lo = np.floor(pos).astype(np.int64)
    weight = pos - lo
    hi = lo + 1

    before = lo < 0
    after = lo >= tiles - 1
    lo[before] = 0
    hi[before] = 0
    weight[before] = 0.0
    lo[after] = tiles - 1
    hi[after] = tiles - 1
    weight[after] = 0.0
    return lo, hi, weight


def clahe(img: np.ndarray, params: ClaheParams = None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization with bilinear tile blending."""
    img = check_gray(img)
    params = params or ClaheParams()
    height, width = img.shape
    if width < params.tiles_x or height < params.tiles_y:
        raise ImageTooSmall(
            f"CLAHE grid {params.tiles_x}x{params.tiles_y} leaves empty tiles on a {width}x{height} image"
        )

    # ceil-sized tiles: when a side is not a multiple of the grid, trailing tiles may hold
    # only edge padding (e.g. 5 px over 4 tiles gives tiles of 2 and a last tile past the image)
    tile_h = -(-height // params.tiles_y)
    tile_w = -(-width // params.tiles_x)
    padded = np.pad(
        img,
        ((0, tile_h * params.tiles_y - height), (0, tile_w * params.tiles_x - width)),
        mode="edge",
    )

    ceiling = params.absolute_clip(tile_h * tile_w)
    luts = np.empty((params.tiles_y, params.tiles_x, NUM_BINS), dtype=np.float64)
    for ty in range(params.tiles_y):
        for tx in range(params.tiles_x):
            block = padded[ty * tile_h:(ty + 1) * tile_h, tx * tile_w:(tx + 1) * tile_w]
            hist = np.bincount(block.ravel(), minlength=NUM_BINS)
            luts[ty, tx] = tile_lut(clip_redistribute(hist, ceiling))

    y0, y1, wy = _tile_weights(height, tile_h, params.tiles_y)
    x0, x1, wx = _tile_weights(width, tile_w, params.tiles_x)
    wy = wy[:, None]
    wx = wx[None, :]
    y0, y1 = y0[:, None], y1[:, None]
    x0, x1 = x0[None, :], x1[None, :]

    top = (1.0 - wx) * luts[y0, x0, img] + wx * luts[y0, x1, img]
    bottom = (1.0 - wx) * luts[y1, x0, img] + wx * luts[y1, x1, img]
    blended = (1.0 - wy) * top + wy * bottom
    return round_half_away(np.clip(blended, 0.0, 255.0)).astype(np.uint8)


def apply_step(step: str, img: np.ndarray, params: ClaheParams) -> np.ndarray:
    if step == "identity":
        return identity(img)
    if step == "sharpen":
        return laplacian_sharpen(img)
    return clahe(img, params)


def apply_pipeline(spec: PipelineSpec, img: np.ndarray) -> np.ndarray:
    """Run the steps of `spec` left to right, e.g. [clahe, sharpen] = sharpen(clahe(x))."""
    out = check_gray(img)
    for step in spec.steps:
        out = apply_step(step, out, spec.clahe)
    return out


def read_gray_png(path: str) -> np.ndarray:
    """Load an 8-bit grayscale PNG as a uint8 array."""
    try:
        with Image.open(path) as image:
            return np.array(image.convert("L"), dtype=np.uint8)
    except FileNotFoundError as e:
        raise MissingFile(f"Image not found: {path}") from e


def write_gray_png(path: str, img: np.ndarray) -> None:
    """Save a uint8 array as an 8-bit grayscale PNG."""
    Image.fromarray(check_gray(img)).save(path, format="PNG")
