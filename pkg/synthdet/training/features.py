"""
Closed-form anchor features of the toy detector.

Every pixel is assigned to a color bin (background or one of the hue bins). For each
anchor the color histograms of three regions are computed from integral images: the
central half of the anchor window, the window itself and the surrounding ring of the
window expanded by a factor of two. Together with the edge density inside the window and
a bias term this gives one feature block, which is placed in the slot of the anchor's
scale so that each anchor scale gets its own linear weights.
"""
import logging

import numpy as np

from ..generation.glyphs import N_HUE_BINS, hue_bin_map, to_float

features_logger = logging.getLogger('synthdet.features')

N_COLOR_BINS = N_HUE_BINS + 1
EDGE_THRESHOLD = 0.1
BLOCK_SIZE = 3 * N_COLOR_BINS + 2


def feature_dim(n_scales: int) -> int:
    return BLOCK_SIZE * n_scales


def integral_image(planes: np.ndarray) -> np.ndarray:
    """Integral image of shape (C, H+1, W+1) for planes of shape (C, H, W)."""
    c, h, w = planes.shape
    ii = np.zeros((c, h + 1, w + 1), dtype=float)
    ii[:, 1:, 1:] = planes.cumsum(axis=1).cumsum(axis=2)
    return ii


def _pixel_rects(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """Integer (x0, y0, x1, y1) rectangles of xywh boxes, clipped to the image."""
    x0 = np.clip(np.round(boxes[:, 0]), 0, width)
    y0 = np.clip(np.round(boxes[:, 1]), 0, height)
    x1 = np.clip(np.round(boxes[:, 0] + boxes[:, 2]), 0, width)
    y1 = np.clip(np.round(boxes[:, 1] + boxes[:, 3]), 0, height)
    return np.stack([x0, y0, np.maximum(x1, x0), np.maximum(y1, y0)], axis=1).astype(int)


def _region_sums(ii: np.ndarray, rects: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = rects.T
    return (ii[:, y1, x1] - ii[:, y0, x1] - ii[:, y1, x0] + ii[:, y0, x0]).T


def _scaled(boxes: np.ndarray, factor: float) -> np.ndarray:
    cx = boxes[:, 0] + boxes[:, 2] / 2
    cy = boxes[:, 1] + boxes[:, 3] / 2
    w = boxes[:, 2] * factor
    h = boxes[:, 3] * factor
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def _fractions(sums: np.ndarray, areas: np.ndarray) -> np.ndarray:
    out = np.zeros_like(sums)
    np.divide(sums, areas[:, None], out=out, where=areas[:, None] > 0)
    return out


def edge_map(image: np.ndarray) -> np.ndarray:
    """Binary map of pixels with a strong luminance step to their right or lower neighbour."""
    gray = to_float(image).mean(axis=2) if image.dtype == np.uint8 else image.mean(axis=2)
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :-1] = np.abs(np.diff(gray, axis=1))
    gy[:-1, :] = np.abs(np.diff(gray, axis=0))
    return ((gx + gy) > EDGE_THRESHOLD).astype(float)


def anchor_features(image: np.ndarray, anchors: np.ndarray, scale_index: np.ndarray, n_scales: int) -> np.ndarray:
    """
    Feature matrix of one image.

    Parameters
    ----------
    image : np.ndarray
        (H, W, 3) uint8 image.
    anchors : np.ndarray
        (A, 4) anchor boxes in xywh.
    scale_index : np.ndarray
        (A,) index of the anchor scale of every anchor.
    n_scales : int
        Number of anchor scales.

    Returns
    -------
    np.ndarray
        (A, feature_dim(n_scales)) features.
    """
    height, width = image.shape[:2]
    bins = hue_bin_map(image)
    planes = np.stack([bins == b for b in range(N_COLOR_BINS)] + [edge_map(image) > 0]).astype(float)
    ii = integral_image(planes)

    window = _pixel_rects(anchors, height, width)
    inner = _pixel_rects(_scaled(anchors, 0.5), height, width)
    outer = _pixel_rects(_scaled(anchors, 2.0), height, width)

    def rect_area(r):
        return ((r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])).astype(float)

    window_sums = _region_sums(ii, window)
    inner_sums = _region_sums(ii, inner)
    ring_sums = _region_sums(ii, outer) - window_sums
    window_area = rect_area(window)

    block = np.concatenate([_fractions(inner_sums[:, :N_COLOR_BINS], rect_area(inner)),
                            _fractions(window_sums[:, :N_COLOR_BINS], window_area),
                            _fractions(ring_sums[:, :N_COLOR_BINS], rect_area(outer) - window_area),
                            _fractions(window_sums[:, N_COLOR_BINS:], window_area),
                            np.ones((len(anchors), 1))], axis=1)

    features = np.zeros((len(anchors), feature_dim(n_scales)), dtype=float)
    for s in range(n_scales):
        rows = scale_index == s
        features[rows, s * BLOCK_SIZE:(s + 1) * BLOCK_SIZE] = block[rows]
    return features
