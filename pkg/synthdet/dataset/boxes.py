"""
Box helpers shared by filtering, training and evaluation.
All boxes are COCO style (x, y, w, h) with a top-left origin in pixels.
"""
from typing import Sequence, Tuple

import numpy as np

Box = Tuple[float, float, float, float]


def as_array(boxes: Sequence[Box]) -> np.ndarray:
    """Convert a sequence of boxes to a float array of shape (N, 4)."""
    arr = np.asarray(boxes, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=float)
    return arr.reshape(-1, 4)


def area(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, 2] * boxes[:, 3]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Pairwise intersection over union between two box arrays.

    Parameters
    ----------
    a : np.ndarray
        Boxes of shape (N, 4) in xywh.
    b : np.ndarray
        Boxes of shape (M, 4) in xywh.

    Returns
    -------
    np.ndarray
        IoU values of shape (N, M). Pairs with an empty union get 0.
    """
    a = as_array(a)
    b = as_array(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=float)

    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]

    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter

    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip xywh boxes to the image rectangle [0, width] x [0, height]."""
    boxes = as_array(boxes)
    x1 = np.clip(boxes[:, 0], 0, width)
    y1 = np.clip(boxes[:, 1], 0, height)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, width)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, height)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Standard (dx, dy, dw, dh) regression targets of targets relative to anchors."""
    acx = anchors[:, 0] + 0.5 * anchors[:, 2]
    acy = anchors[:, 1] + 0.5 * anchors[:, 3]
    tcx = targets[:, 0] + 0.5 * targets[:, 2]
    tcy = targets[:, 1] + 0.5 * targets[:, 3]
    return np.stack([(tcx - acx) / anchors[:, 2],
                     (tcy - acy) / anchors[:, 3],
                     np.log(targets[:, 2] / anchors[:, 2]),
                     np.log(targets[:, 3] / anchors[:, 3])], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, max_log_scale: float = 4.0) -> np.ndarray:
    """Inverse of encode_deltas; the size terms are clamped to keep exp finite."""
    acx = anchors[:, 0] + 0.5 * anchors[:, 2]
    acy = anchors[:, 1] + 0.5 * anchors[:, 3]
    cx = acx + deltas[:, 0] * anchors[:, 2]
    cy = acy + deltas[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(np.clip(deltas[:, 2], -max_log_scale, max_log_scale))
    h = anchors[:, 3] * np.exp(np.clip(deltas[:, 3], -max_log_scale, max_log_scale))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, w, h], axis=1)


def greedy_nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """
    Greedily select high-scoring boxes and skip boxes covered by an already selected one.

    Returns the indices of the kept boxes ordered by descending score. Ties are broken
    by the original index so the result does not depend on sort stability.
    """
    boxes = as_array(boxes)
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=float)))
    keep = []
    while len(order) > 0:
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.asarray(keep, dtype=int)
