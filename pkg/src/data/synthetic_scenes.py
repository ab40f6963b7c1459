"""
Synthetic Two-Domain Scenes

Procedural detection scenes: 1-5 anti-aliased shapes (circle, square,
triangle) with random size, colour and position on a smooth textured
background. Target-domain scenes share the geometry of the source scene with
the same seed and add a photometric shift:

    fog       pixel' = pixel * exp(-beta * depth) + haze * (1 - exp(-beta * depth)),
              depth = 1 at the top row and 0 at the bottom row
    contrast  pixel' = mean + contrast_scale * (pixel - mean)
    hue       rotation of RGB about the grey axis
    noise     additive Gaussian noise

Each step is skipped when its parameter is neutral, so a neutral shift leaves
the image bit-identical to the source rendering.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from src.data.preprocessing import CLASS_NAMES, IMAGE_SIZE, MAX_OBJECTS, SOURCE, TARGET
from src.errors import ConfigError
from src.losses.matching import GroundTruth

SUPERSAMPLE = 4
MIN_SIZE, MAX_SIZE = 0.18, 0.38     # shape size as a fraction of the shorter image side
MAX_PLACEMENT_TRIES = 20
MAX_OVERLAP_FRACTION = 0.3     # of the smaller box; shapes that cannot be placed are dropped


# === Shift ===

@dataclass
class ShiftConfig:
    """
    Photometric target-domain shift.

    fog_density : beta >= 0
    haze_color : RGB in [0, 1]
    contrast_scale : > 0, 1 is neutral
    hue_rotation : radians, 0 is neutral
    noise_std : >= 0
    """
    fog_density: float = 0.0
    haze_color: tuple[float, float, float] = (0.8, 0.8, 0.82)
    contrast_scale: float = 1.0
    hue_rotation: float = 0.0
    noise_std: float = 0.0

    def validate(self) -> "ShiftConfig":
        self.haze_color = tuple(float(c) for c in self.haze_color)
        if self.fog_density < 0:
            raise ConfigError(f"shift.fog_density must be non-negative, got {self.fog_density}")
        if len(self.haze_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.haze_color):
            raise ConfigError(f"shift.haze_color must be three values in [0, 1], got {self.haze_color}")
        if self.contrast_scale <= 0:
            raise ConfigError(f"shift.contrast_scale must be positive, got {self.contrast_scale}")
        if self.noise_std < 0:
            raise ConfigError(f"shift.noise_std must be non-negative, got {self.noise_std}")
        return self

    @property
    def is_neutral(self) -> bool:
        return (self.fog_density == 0 and self.contrast_scale == 1
                and self.hue_rotation == 0 and self.noise_std == 0)

    def to_dict(self) -> dict:
        return asdict(self)


SHIFT_PRESETS = {
    "none": ShiftConfig(),
    "fog": ShiftConfig(fog_density=2.0),
    "dense_fog": ShiftConfig(fog_density=4.0),
    "style": ShiftConfig(contrast_scale=0.7, hue_rotation=0.6, noise_std=0.03),
    "fog_style": ShiftConfig(fog_density=2.0, contrast_scale=0.7, hue_rotation=0.6, noise_std=0.03),
}


def shift_preset(name: str) -> ShiftConfig:
    if name not in SHIFT_PRESETS:
        raise ConfigError(f"unknown shift preset {name!r}; choose from {sorted(SHIFT_PRESETS)}")
    return ShiftConfig(**asdict(SHIFT_PRESETS[name]))


# === Scene ===

@dataclass
class Scene:
    """
    One rendered image with its annotations.

    image : (3, H, W) float64 in [0, 1]
    annotations : GroundTruth, always present (target labels are only used for evaluation)
    domain : 0 source, 1 target
    seed : geometry seed; equal seeds give equal annotations in both domains
    """
    image: np.ndarray
    annotations: GroundTruth
    domain: int
    seed: int
    name: str = field(default="")


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Base colour plus a smooth low-frequency luminance field and fine grain."""
    base = rng.uniform(0.25, 0.6, size=3)
    coarse = rng.uniform(0, 255, size=(6, 6)).astype(np.uint8)
    field_ = np.asarray(Image.fromarray(coarse).resize((width, height), Image.Resampling.BILINEAR),
                        dtype=np.float64) / 255.0
    grain = rng.normal(0.0, 0.015, size=(height, width))
    image = base[:, None, None] + 0.25 * (field_ - 0.5)[None] + grain[None]
    return np.clip(image, 0.0, 1.0)


def _coverage(class_id: int, box_px: tuple[float, float, float, float], height: int, width: int) -> np.ndarray:
    """Anti-aliased [0, 1] coverage of one shape: drawn at SUPERSAMPLE x, box-filtered down."""
    s = SUPERSAMPLE
    x1, y1, x2, y2 = (v * s for v in box_px)
    mask = Image.new("L", (width * s, height * s), 0)
    draw = ImageDraw.Draw(mask)
    shape = CLASS_NAMES[class_id]
    if shape == "circle":
        draw.ellipse([x1, y1, x2, y2], fill=255)
    elif shape == "square":
        draw.rectangle([x1, y1, x2, y2], fill=255)
    else:
        draw.polygon([((x1 + x2) / 2, y1), (x1, y2), (x2, y2)], fill=255)
    small = mask.resize((width, height), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def _overlap(box: np.ndarray, placed: list[np.ndarray]) -> float:
    """Largest share of either box covered by the other, over all placed boxes."""
    best = 0.0
    area = (box[2] - box[0]) * (box[3] - box[1])
    for other in placed:
        ix = max(0.0, min(box[2], other[2]) - max(box[0], other[0]))
        iy = max(0.0, min(box[3], other[3]) - max(box[1], other[1]))
        smaller = min(area, (other[2] - other[0]) * (other[3] - other[1]))
        best = max(best, ix * iy / smaller)
    return best


def render_scene(seed: int, image_size: tuple[int, int] = IMAGE_SIZE,
                 max_objects: int = MAX_OBJECTS) -> tuple[np.ndarray, GroundTruth]:
    """Source-domain rendering of `seed`: (image, annotations)."""
    height, width = image_size
    rng = np.random.default_rng(seed)
    image = _background(rng, height, width)
    side = min(height, width)

    classes, boxes, placed = [], [], []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        class_id = int(rng.integers(0, len(CLASS_NAMES)))
        color = rng.uniform(0.0, 1.0, size=3)
        for _ in range(MAX_PLACEMENT_TRIES):
            size = rng.uniform(MIN_SIZE, MAX_SIZE) * side
            cx = rng.uniform(size / 2, width - size / 2)
            cy = rng.uniform(size / 2, height - size / 2)
            corners = np.array([cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2])
            if _overlap(corners, placed) <= MAX_OVERLAP_FRACTION:
                break
        else:
            continue
        placed.append(corners)
        alpha = _coverage(class_id, tuple(corners), height, width)[None]
        image = image * (1.0 - alpha) + color[:, None, None] * alpha
        classes.append(class_id)
        boxes.append([cx / width, cy / height, size / width, size / height])

    return np.clip(image, 0.0, 1.0), GroundTruth(np.array(classes), np.array(boxes))


def _hue_matrix(angle: float) -> np.ndarray:
    k = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * cross + (1 - np.cos(angle)) * np.outer(k, k)


def apply_shift(image: np.ndarray, shift: ShiftConfig, rng: np.random.Generator) -> np.ndarray:
    """Fog, then contrast, hue and noise; neutral steps are skipped entirely."""
    height = image.shape[1]
    if shift.fog_density > 0:
        depth = 1.0 - np.arange(height, dtype=np.float64) / max(height - 1, 1)
        transmission = np.exp(-shift.fog_density * depth)[None, :, None]
        haze = np.asarray(shift.haze_color, dtype=np.float64)[:, None, None]
        image = image * transmission + haze * (1.0 - transmission)
    if shift.contrast_scale != 1:
        mean = image.mean()
        image = mean + shift.contrast_scale * (image - mean)
    if shift.hue_rotation != 0:
        image = np.einsum("ij,jhw->ihw", _hue_matrix(shift.hue_rotation), image)
    if shift.noise_std > 0:
        image = image + rng.normal(0.0, shift.noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_scene(seed: int, domain: int, shift: ShiftConfig | None = None,
                   image_size: tuple[int, int] = IMAGE_SIZE, max_objects: int = MAX_OBJECTS) -> Scene:
    """
    Render one scene.

    Parameters
    ----------
    seed : int
        Geometry seed. Source and target scenes with equal seeds have identical
        annotations.
    domain : int
        0 (source) or 1 (target); only target scenes receive `shift`.
    shift : ShiftConfig, optional
        Defaults to the neutral shift.

    Returns
    -------
    Scene
    """
    if domain not in (SOURCE, TARGET):
        raise ConfigError(f"domain must be 0 or 1, got {domain!r}")
    image, annotations = render_scene(seed, image_size, max_objects)
    if domain == TARGET and shift is not None and not shift.is_neutral:
        noise_rng = np.random.default_rng(np.random.SeedSequence([seed, TARGET]))
        image = apply_shift(image, shift, noise_rng)
    return Scene(image=image, annotations=annotations, domain=domain, seed=seed)


SPLIT_CODES = {"train": 0, "val": 1}


def scene_seed(base_seed: int, split: str, index: int) -> int:
    """Seed of scene `index` of a split; independent of the domain."""
    return int(np.random.SeedSequence([base_seed, SPLIT_CODES[split], index]).generate_state(1)[0])


__all__ = [
    "ShiftConfig",
    "SHIFT_PRESETS",
    "shift_preset",
    "Scene",
    "render_scene",
    "apply_shift",
    "generate_scene",
    "scene_seed",
    "SPLIT_CODES",
]
