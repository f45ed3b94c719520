"""
Synthetic lateral swallow fluoroscopy phantom.
Draws per-patient neck anatomy, moves a bolus along the pharynx and
composites everything with exponential attenuation, so regions overlap
translucently like in real X-ray frames.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from cin import REGIONS
from data import Sample, save_dataset
from errors import BadParams

logger = logging.getLogger(__name__)

MAX_DISTRACTORS = 3
JITTER = 0.03
CORRIDOR_MARGIN = 0.05


def _default_densities() -> Dict[str, float]:
    return {
        "soft_tissue": 0.35,
        "cervical_spine": 1.0,
        "mandible": 0.9,
        "hyoid_bone": 0.55,
        "vocal_fold": 0.2,
    }


@dataclass(frozen=True)
class SynthParams:
    """Phantom geometry scale, attenuation densities, noise and bolus ambiguity."""

    image_size: int = 64
    ambiguity: float = 0.5
    noise_level: float = 0.03
    densities: Dict[str, float] = field(default_factory=_default_densities)
    bolus_density_clear: float = 1.0
    bolus_density_ambiguous: float = 0.12

    def __post_init__(self):
        if self.image_size < 32:
            raise BadParams(f"image_size must be >= 32, got {self.image_size}")
        if not (0.0 <= self.ambiguity <= 1.0):
            raise BadParams(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if self.noise_level < 0:
            raise BadParams(f"noise_level must be >= 0, got {self.noise_level}")
        missing = set(REGIONS) - {"bolus"} - set(self.densities)
        if missing:
            raise BadParams(f"Missing densities for {sorted(missing)}")
        if any(d <= 0 for d in self.densities.values()):
            raise BadParams("Attenuation densities must be positive")
        if not (self.bolus_density_clear > 0 and self.bolus_density_ambiguous > 0):
            raise BadParams("Bolus densities must be positive")

    @property
    def bolus_density(self) -> float:
        """Falls from the clear density to near soft-tissue contrast as ambiguity rises."""
        a = self.ambiguity
        return (1.0 - a) * self.bolus_density_clear + a * self.bolus_density_ambiguous

    @property
    def num_distractors(self) -> int:
        return int(math.floor(self.ambiguity * MAX_DISTRACTORS + 0.5))


@dataclass
class Anatomy:
    """Fixed per patient: everything but the bolus and the swallow-driven elevation."""

    spine_x: float
    spine_width: float
    spine_tilt: float
    vertebra_height: float
    mandible_center: Tuple[float, float]
    mandible_radii: Tuple[float, float]
    hyoid_offset: Tuple[float, float]
    vocal_offset: Tuple[float, float]
    gain: float


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def _ellipse(yy: np.ndarray, xx: np.ndarray, center: Tuple[float, float], radii: Tuple[float, float]) -> np.ndarray:
    cx, cy = center
    rx, ry = radii
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def draw_anatomy(rng: np.random.Generator, size: int) -> Anatomy:
    s = float(size)
    return Anatomy(
        spine_x=s * rng.uniform(0.70, 0.74),
        spine_width=s * rng.uniform(0.08, 0.10),
        spine_tilt=rng.uniform(-0.05, 0.05),
        vertebra_height=s * rng.uniform(0.09, 0.11),
        mandible_center=(s * rng.uniform(0.30, 0.36), s * rng.uniform(0.12, 0.17)),
        mandible_radii=(s * rng.uniform(0.26, 0.30), s * rng.uniform(0.16, 0.19)),
        hyoid_offset=(s * rng.uniform(0.20, 0.24), s * rng.uniform(0.08, 0.11)),
        vocal_offset=(s * rng.uniform(0.13, 0.16), s * rng.uniform(0.32, 0.36)),
        gain=rng.uniform(0.85, 1.0),
    )


def static_masks(anatomy: Anatomy, size: int) -> Dict[str, np.ndarray]:
    """Spine and mandible masks, which fix the swallow path."""
    s = float(size)
    yy, xx = _grid(size)

    # vertebral bodies from the skull base down, separated by disc gaps
    left = anatomy.spine_x + anatomy.spine_tilt * (yy - 0.3 * s)
    in_column = (xx >= left) & (xx < left + anatomy.spine_width) & (yy >= 0.3 * s)
    period = anatomy.vertebra_height + 0.02 * s
    in_body = np.mod(yy - 0.3 * s, period) < anatomy.vertebra_height
    spine = in_column & in_body

    # lower half of an elliptical ring
    cx, cy = anatomy.mandible_center
    rx, ry = anatomy.mandible_radii
    radius = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    thickness = 0.05 * s / ry
    mandible = (radius <= 1.0) & (radius >= 1.0 - thickness) & (yy >= cy)

    return {"cervical_spine": spine, "mandible": mandible}


def path_anchors(spine: np.ndarray, mandible: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Start (oropharynx) and end (upper esophagus) of the bolus path, as (x, y) points."""
    size = spine.shape[0]
    s = float(size)
    if not spine.any() or not mandible.any():
        raise BadParams("Spine and mandible masks must be non-empty to place the bolus path")
    rows = np.flatnonzero(spine.any(axis=1))
    anterior = np.array([np.flatnonzero(spine[r])[0] for r in rows], dtype=np.float64)
    x_s = float(anterior.mean())
    ys, xs = np.nonzero(mandible)
    x_m = float(xs.max())
    y_m = float(ys.max())

    start = np.array([min(x_m - 0.03 * s, x_s - 0.10 * s), y_m - 0.06 * s])
    end = np.array([x_s - 0.08 * s, s - 1.0])
    return start, end


def bolus_corridor(masks: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Path segment and half-width in which the bolus centroid must lie, from a frame's masks."""
    spine = np.asarray(masks[REGIONS.index("cervical_spine")]).astype(bool)
    mandible = np.asarray(masks[REGIONS.index("mandible")]).astype(bool)
    start, end = path_anchors(spine, mandible)
    half_width = (JITTER * math.sqrt(2.0) + CORRIDOR_MARGIN) * spine.shape[0]
    return start, end, half_width


def distance_to_segment(point: np.ndarray, start: np.ndarray, end: np.ndarray) -> float:
    d = end - start
    t = float(np.clip(np.dot(point - start, d) / max(float(np.dot(d, d)), 1e-12), 0.0, 1.0))
    return float(np.linalg.norm(point - (start + t * d)))


def render_frame(anatomy: Anatomy, params: SynthParams, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One frame: uint8 image and 6 x H x W binary masks in canonical region order."""
    size = params.image_size
    s = float(size)
    yy, xx = _grid(size)
    fixed = static_masks(anatomy, size)
    start, end = path_anchors(fixed["cervical_spine"], fixed["mandible"])

    # bolus: progress along the path plus bounded jitter
    progress = rng.uniform(0.0, 1.0)
    jitter = np.clip(rng.normal(0.0, JITTER / 2, size=2), -JITTER, JITTER) * s
    center = start + progress * (end - start) + jitter
    center = np.clip(center, 0.0, s - 1.0)
    radii = (s * rng.uniform(0.05, 0.07), s * rng.uniform(0.07, 0.10))
    bolus = _ellipse(yy, xx, (center[0], center[1]), radii)

    # hyoid and larynx rise while the bolus passes
    elevation = 0.05 * s * math.sin(math.pi * progress)
    x_s = end[0] + 0.08 * s
    y_m = start[1] + 0.06 * s
    hyoid = _ellipse(yy, xx, (x_s - anatomy.hyoid_offset[0], y_m + anatomy.hyoid_offset[1] - elevation),
                     (0.05 * s, 0.03 * s))
    vocal = _ellipse(yy, xx, (x_s - anatomy.vocal_offset[0], y_m + anatomy.vocal_offset[1] - 0.8 * elevation),
                     (0.04 * s, 0.06 * s))

    # soft tissue spans the neck and contains the whole bolus corridor
    soft = (xx >= x_s - 0.35 * s) & (xx <= x_s + anatomy.spine_width + 0.05 * s) & (yy >= y_m - 0.15 * s)

    regions = {
        "bolus": bolus,
        "mandible": fixed["mandible"],
        "hyoid_bone": hyoid,
        "vocal_fold": vocal,
        "cervical_spine": fixed["cervical_spine"],
        "soft_tissue": soft,
    }
    masks = np.stack([regions[name] for name in REGIONS]).astype(np.uint8)

    attenuation = np.zeros((size, size), dtype=np.float64)
    for name in REGIONS:
        density = params.bolus_density if name == "bolus" else params.densities[name]
        attenuation += density * regions[name]

    # unlabeled lookalike blobs away from the swallow path
    half_width = (JITTER * math.sqrt(2.0) + CORRIDOR_MARGIN) * s
    for _ in range(params.num_distractors):
        radius = s * rng.uniform(0.04, 0.06)
        for _attempt in range(50):
            spot = rng.uniform(0.1 * s, 0.9 * s, size=2)
            if distance_to_segment(spot, start, end) > half_width + 2 * radius:
                attenuation += 0.9 * params.bolus_density * _ellipse(yy, xx, (spot[0], spot[1]), (radius, radius))
                break

    intensity = 255.0 * anatomy.gain * np.exp(-attenuation)
    intensity += rng.normal(0.0, params.noise_level * 255.0, size=intensity.shape)
    image = np.clip(np.floor(intensity + 0.5), 0, 255).astype(np.uint8)
    return image, masks


def synth_samples(n_patients: int, frames_per_patient: int, seed: int = 0,
                  params: SynthParams = None) -> List[Sample]:
    """Generate the phantom dataset in memory; fully determined by (seed, params)."""
    params = params or SynthParams()
    if n_patients < 1:
        raise BadParams(f"n_patients must be >= 1, got {n_patients}")
    if frames_per_patient < 1:
        raise BadParams(f"frames_per_patient must be >= 1, got {frames_per_patient}")

    samples = []
    for pi in range(n_patients):
        anatomy = draw_anatomy(np.random.default_rng([seed, pi, 0]), params.image_size)
        for fi in range(frames_per_patient):
            rng = np.random.default_rng([seed, pi, fi + 1])
            image, masks = render_frame(anatomy, params, rng)
            samples.append(Sample(image=image, masks=masks,
                                  patient_id=f"P{pi:03d}", frame_id=f"p{pi:03d}_f{fi:03d}"))
    return samples


def synth_generate(root: str, n_patients: int, frames_per_patient: int, seed: int = 0,
                   params: SynthParams = None) -> List[Sample]:
    """Generate the phantom dataset and write it under `root`."""
    params = params or SynthParams()
    samples = synth_samples(n_patients, frames_per_patient, seed, params)
    save_dataset(root, samples)
    logger.info(
        f"Generated {len(samples)} synthetic frames ({n_patients} patients, "
        f"ambiguity {params.ambiguity}) in {root}"
    )
    return samples
