"""
Glyph palette of the mock generator and the toy corpus.

Every category is drawn as an axis aligned filled shape with its own hue on a gray,
textured background. Pixels are assigned to hue bins with the same rule everywhere
(corpus check, glyph reading, detector features), so a category is recoverable from
the colors inside its box.
"""
from dataclasses import dataclass
import logging
from typing import Dict, Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

glyph_logger = logging.getLogger('synthdet.glyphs')

SHAPES = ('rectangle', 'ellipse', 'diamond', 'cross', 'triangle')
SATURATION_THRESHOLD = 0.3
N_HUE_BINS = 12
MIN_GLYPH_SIZE = 4


@dataclass(frozen=True)
class Glyph:
    shape: str
    hue: float


def default_palette(category_names: Sequence[str]) -> Dict[str, Glyph]:
    """One distinctive (shape, hue) pair per category, hues evenly spread over the circle."""
    n = max(len(category_names), 1)
    if n > N_HUE_BINS:
        raise ValueError(f'the glyph palette supports at most {N_HUE_BINS} categories, got {n}')
    return {name: Glyph(SHAPES[i % len(SHAPES)], i / n) for i, name in enumerate(category_names)}


def background_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Gray texture in [0, 1]: coarse blocks of random luminance plus pixel noise."""
    coarse = rng.uniform(0.35, 0.65, size=(height // 8 + 1, width // 8 + 1))
    base = np.kron(coarse, np.ones((8, 8)))[:height, :width]
    base = base + rng.normal(0, 0.03, size=(height, width))
    gray = np.clip(base, 0, 1)
    return np.repeat(gray[:, :, None], 3, axis=2)


def glyph_mask(shape: str, height: int, width: int) -> np.ndarray:
    """Boolean mask of a shape filling a height x width box."""
    yy, xx = np.mgrid[0:height, 0:width]
    # normalised pixel centers in [-1, 1]
    u = (xx + 0.5) / width * 2 - 1
    v = (yy + 0.5) / height * 2 - 1
    if shape == 'rectangle':
        return np.ones((height, width), dtype=bool)
    if shape == 'ellipse':
        return u ** 2 + v ** 2 <= 1
    if shape == 'diamond':
        return np.abs(u) + np.abs(v) <= 1
    if shape == 'cross':
        return (np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3)
    if shape == 'triangle':
        return np.abs(u) <= (v + 1) / 2
    raise ValueError(f'unknown glyph shape {shape!r}')


def box_to_slices(box, height: int, width: int):
    """Integer pixel slices covered by an xywh box, clipped to the image."""
    x, y, w, h = box
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = int(round(x + w)), int(round(y + h))
    x0, x1 = max(x0, 0), min(x1, width)
    y0, y1 = max(y0, 0), min(y1, height)
    return slice(y0, y1), slice(x0, x1)


def render_glyph(image: np.ndarray, box, glyph: Glyph, rng: np.random.Generator) -> None:
    """
    Draw a glyph into a float image in place.

    Raises
    ------
    ValueError
        If the box covers less than MIN_GLYPH_SIZE pixels in either direction.
    """
    rows, cols = box_to_slices(box, image.shape[0], image.shape[1])
    h, w = rows.stop - rows.start, cols.stop - cols.start
    if h < MIN_GLYPH_SIZE or w < MIN_GLYPH_SIZE:
        raise ValueError(f'box {box} too small to render a glyph (< {MIN_GLYPH_SIZE}x{MIN_GLYPH_SIZE} px)')
    color = hsv_to_rgb([glyph.hue, rng.uniform(0.8, 1.0), rng.uniform(0.75, 0.95)])
    mask = glyph_mask(glyph.shape, h, w)
    region = image[rows, cols]
    region[mask] = color


def fill_background(image: np.ndarray, box, rng: np.random.Generator) -> None:
    """Replace the pixels of a box with fresh background texture in place."""
    rows, cols = box_to_slices(box, image.shape[0], image.shape[1])
    h, w = rows.stop - rows.start, cols.stop - cols.start
    if h > 0 and w > 0:
        image[rows, cols] = background_texture(rng, h, w)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255), 0, 255).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=float) / 255.0


def hue_bin_map(image: np.ndarray, n_bins: int = N_HUE_BINS,
                saturation_threshold: float = SATURATION_THRESHOLD) -> np.ndarray:
    """
    Assign every pixel to a color bin.

    Bin 0 holds unsaturated (background) pixels, bins 1..n_bins the saturated pixels
    by quantised hue.
    """
    hsv = rgb_to_hsv(to_float(image) if image.dtype == np.uint8 else image)
    bins = np.round(hsv[..., 0] * n_bins).astype(int) % n_bins + 1
    return np.where(hsv[..., 1] >= saturation_threshold, bins, 0)


def identify_glyph(image: np.ndarray, box, palette: Dict[str, Glyph],
                   min_coverage: float = 0.2) -> Optional[str]:
    """
    Read back which category's glyph occupies a box.

    The saturated pixels inside the box vote with their hue; the palette entry with the
    closest hue on the color circle wins. Returns None when less than min_coverage of the
    box is saturated (a blank region).
    """
    rows, cols = box_to_slices(box, image.shape[0], image.shape[1])
    region = image[rows, cols]
    if region.size == 0:
        return None
    hsv = rgb_to_hsv(to_float(region) if region.dtype == np.uint8 else region)
    saturated = hsv[..., 1] >= SATURATION_THRESHOLD
    if saturated.mean() < min_coverage:
        return None
    angles = hsv[..., 0][saturated] * 2 * np.pi
    mean_hue = (np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()) / (2 * np.pi)) % 1.0

    def circular_distance(h):
        d = abs(h - mean_hue) % 1.0
        return min(d, 1 - d)

    return min(palette, key=lambda name: circular_distance(palette[name].hue))
