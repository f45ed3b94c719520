"""
Rendering of prediction overlays and GradCAM heatmaps with Pillow.
"""

import logging
import os
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

import imgproc
from errors import ShapeMismatch

logger = logging.getLogger(__name__)

TP_COLOR = (0, 0, 255)  # blue
FP_COLOR = (0, 255, 0)  # green
FN_COLOR = (255, 0, 0)  # red

# purple -> blue -> cyan -> green -> yellow -> red
HEAT_STOPS = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
HEAT_COLORS = np.array([
    [68, 1, 84],
    [59, 82, 200],
    [33, 190, 230],
    [60, 200, 80],
    [250, 220, 40],
    [230, 20, 20],
], dtype=np.float64)


def render_overlay(image: np.ndarray, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """RGB frame with TP blue, FP green, FN red; true negatives keep their gray value."""
    image = imgproc.check_gray(image)
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != image.shape or target.shape != image.shape:
        raise ShapeMismatch(f"Overlay needs masks shaped like the image {image.shape}")

    rgb = np.repeat(image[:, :, None], 3, axis=2)
    rgb[pred & target] = TP_COLOR
    rgb[pred & ~target] = FP_COLOR
    rgb[~pred & target] = FN_COLOR
    return rgb


def render_prediction(image: np.ndarray, pred: np.ndarray, color=TP_COLOR) -> np.ndarray:
    """Prediction-only overlay, for frames without ground truth."""
    image = imgproc.check_gray(image)
    rgb = np.repeat(image[:, :, None], 3, axis=2)
    rgb[np.asarray(pred).astype(bool)] = color
    return rgb


def heatmap_to_rgb(heatmap: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] onto the color ramp (red = highest)."""
    heat = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    channels = [np.interp(heat, HEAT_STOPS, HEAT_COLORS[:, c]) for c in range(3)]
    return np.stack(channels, axis=-1).round().astype(np.uint8)


def blend(image: np.ndarray, rgb: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    gray = np.repeat(imgproc.check_gray(image)[:, :, None], 3, axis=2).astype(np.float64)
    out = (1.0 - alpha) * gray + alpha * rgb.astype(np.float64)
    return np.clip(out.round(), 0, 255).astype(np.uint8)


def save_rgb(path: str, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeMismatch(f"Expected an H x W x 3 uint8 image, got {rgb.shape} {rgb.dtype}")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(rgb).save(path, "PNG")


def _load_font(size: int):
    try:
        return ImageFont.truetype("DejaVuSans.ttf", size)
    except OSError:
        return ImageFont.load_default()


def save_panel(path: str, tiles: Sequence[np.ndarray], labels: Optional[Sequence[str]] = None,
               scale: int = 2, caption_height: int = 16) -> None:
    """Lay RGB tiles out side by side with a caption strip under each one."""
    if not tiles:
        raise ShapeMismatch("A panel needs at least one tile")
    height, width = tiles[0].shape[:2]
    tile_w, tile_h = width * scale, height * scale
    panel = Image.new("RGB", (tile_w * len(tiles), tile_h + caption_height), (0, 0, 0))
    draw = ImageDraw.Draw(panel)
    font = _load_font(max(caption_height - 4, 8))

    for i, tile in enumerate(tiles):
        if tile.shape[:2] != (height, width):
            raise ShapeMismatch(f"Panel tiles differ in size: {tile.shape} vs {(height, width)}")
        image = Image.fromarray(np.asarray(tile, dtype=np.uint8)).resize((tile_w, tile_h), Image.Resampling.NEAREST)
        panel.paste(image, (i * tile_w, 0))
        if labels:
            draw.text((i * tile_w + 2, tile_h + 1), labels[i], fill=(255, 255, 255), font=font)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    panel.save(path, "PNG")
    logger.info(f"Saved panel of {len(tiles)} tiles to {path}")
