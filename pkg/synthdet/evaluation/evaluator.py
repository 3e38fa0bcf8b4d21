"""
COCO style box evaluation with rare/common/frequent aggregates.

AP of a category is the mean over the IoU thresholds 0.50:0.05:0.95 of the 101 point
interpolated area under the precision recall curve. Categories without ground truth are
left out of every mean, and a frequency bucket without categories has no AP at all.
"""
from dataclasses import asdict, dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..dataset.boxes import as_array, iou_matrix
from ..dataset.dataset_io import Dataset, InstanceAnnotation
from ..dataset.detections import Detection

eval_logger = logging.getLogger('synthdet.evaluator')

IOU_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0, 1, 101)
MAX_DETECTIONS = 100


@dataclass(frozen=True)
class CategoryEval:
    name: str
    num_gt: int
    frequency_bucket: Optional[str]
    ap: Optional[float]
    ap50: Optional[float]
    # interpolated precision at the 101 recall points, IoU 0.5
    precision50: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_rare: Optional[float]
    ap_common: Optional[float]
    ap_frequent: Optional[float]
    per_category: Dict[int, CategoryEval]

    def to_dict(self) -> dict:
        out = asdict(self)
        out['per_category'] = {str(k): v for k, v in out['per_category'].items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> 'EvalResult':
        per_category = {int(k): CategoryEval(**v) for k, v in data['per_category'].items()}
        return cls(**{**data, 'per_category': per_category})

    def summary_row(self) -> Dict[str, Optional[float]]:
        """AP columns scaled by 100 for display."""
        return {name: None if value is None else 100 * value
                for name, value in (('AP', self.ap), ('AP50', self.ap50), ('AP_r', self.ap_rare),
                                    ('AP_c', self.ap_common), ('AP_f', self.ap_frequent))}


def match_for_eval(dets: Sequence[Detection], gts: Sequence[InstanceAnnotation], iou_threshold: float) -> np.ndarray:
    """
    Greedy one-to-one matching of the detections of one image and category.

    Detections are visited in the given order (by descending score); each one takes the
    unmatched ground truth box of its category with the highest IoU, provided the IoU is
    at least iou_threshold, and is a false positive otherwise.

    Returns
    -------
    np.ndarray
        Boolean true positive flag per detection.
    """
    flags = np.zeros(len(dets), dtype=bool)
    if not len(dets) or not len(gts):
        return flags
    ious = iou_matrix(as_array([d.bbox for d in dets]), as_array([g.bbox for g in gts]))
    matched = np.zeros(len(gts), dtype=bool)
    for i, det in enumerate(dets):
        candidates = np.array([not matched[j] and gts[j].category_id == det.category_id
                               and ious[i, j] >= iou_threshold for j in range(len(gts))])
        if not candidates.any():
            continue
        j = int(np.argmax(np.where(candidates, ious[i], -1.0)))
        matched[j] = True
        flags[i] = True
    return flags


def precision_recall(flags: Sequence[bool], num_gt: int):
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1 - np.asarray(flags, dtype=float))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    return precision, recall


def interpolated_precision(flags: Sequence[bool], num_gt: int) -> np.ndarray:
    """Precision envelope sampled at the 101 recall points; 0 beyond the reached recall."""
    out = np.zeros(len(RECALL_POINTS))
    if num_gt == 0 or len(flags) == 0:
        return out
    precision, recall = precision_recall(flags, num_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side='left')
    reached = idx < len(recall)
    out[reached] = envelope[idx[reached]]
    return out


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """
    101 point interpolated AP of flags ordered by descending score.

    Returns NaN if num_gt is 0; such a category is excluded from every mean.
    """
    if num_gt < 0:
        raise ValueError(f'num_gt must be >= 0, got {num_gt}')
    if num_gt == 0:
        return math.nan
    return float(interpolated_precision(flags, num_gt).mean())


def _sort_key(det: Detection):
    return (-det.score, det.image_id, tuple(det.bbox))


def _mean(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def evaluate(dets: Sequence[Detection], gt: Dataset, max_detections: int = MAX_DETECTIONS) -> EvalResult:
    """
    Evaluate detections over a whole dataset.

    Parameters
    ----------
    dets : sequence of Detection
        Detections on the images of gt, in any order.
    gt : Dataset
        Ground truth with frequency buckets assigned; filtered_out annotations are ignored.
    max_detections : int, optional
        Highest scoring detections kept per image and category. The default is 100.

    Raises
    ------
    ValueError
        If a detection references an unknown image or category.
    """
    image_ids = {img.id for img in gt.images}
    categories = {cat.id: cat for cat in gt.categories}
    for det in dets:
        if det.image_id not in image_ids:
            raise ValueError(f'detection references unknown image {det.image_id}')
        if det.category_id not in categories:
            raise ValueError(f'detection references unknown category {det.category_id}')

    gts: Dict[tuple, List[InstanceAnnotation]] = {}
    for ann in gt.annotations:
        if not ann.filtered_out:
            gts.setdefault((ann.image_id, ann.category_id), []).append(ann)
    grouped: Dict[tuple, List[Detection]] = {}
    for det in sorted(dets, key=_sort_key):
        grouped.setdefault((det.image_id, det.category_id), []).append(det)
    for key in grouped:
        grouped[key] = grouped[key][:max_detections]

    per_category = {}
    ap75 = []
    for cat_id, cat in sorted(categories.items()):
        num_gt = sum(len(v) for (_, c), v in gts.items() if c == cat_id)
        image_keys = sorted(k for k in set(gts) | set(grouped) if k[1] == cat_id)
        aps = []
        precision50 = np.zeros(len(RECALL_POINTS))
        for threshold in IOU_THRESHOLDS:
            scored = []
            for key in image_keys:
                image_dets = grouped.get(key, [])
                flags = match_for_eval(image_dets, gts.get(key, []), threshold)
                scored.extend(zip(image_dets, flags))
            scored.sort(key=lambda pair: _sort_key(pair[0]))
            flags = [flag for _, flag in scored]
            aps.append(average_precision(flags, num_gt))
            if threshold == 0.5 and num_gt:
                precision50 = interpolated_precision(flags, num_gt)
        per_category[cat_id] = CategoryEval(
            name=cat.name, num_gt=num_gt, frequency_bucket=cat.frequency_bucket,
            ap=float(np.mean(aps)) if num_gt else None,
            ap50=aps[0] if num_gt else None,
            precision50=[float(p) for p in precision50])
        if num_gt:
            ap75.append(aps[IOU_THRESHOLDS.index(0.75)])

    evaluated = [c for c in per_category.values() if c.ap is not None]
    ap = _mean(c.ap for c in evaluated)
    result = EvalResult(
        ap=ap if ap is not None else 0.0,
        ap50=_mean(c.ap50 for c in evaluated) or 0.0,
        ap75=_mean(ap75) or 0.0,
        ap_rare=_mean(c.ap for c in evaluated if c.frequency_bucket == 'rare'),
        ap_common=_mean(c.ap for c in evaluated if c.frequency_bucket == 'common'),
        ap_frequent=_mean(c.ap for c in evaluated if c.frequency_bucket == 'frequent'),
        per_category=per_category)
    eval_logger.info(f'evaluated {len(dets)} detections on {len(gt.images)} images: '
                     f'AP={100 * result.ap:.2f}, AP50={100 * result.ap50:.2f}')
    return result


def save_eval(result: EvalResult, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(result.to_dict(), f, indent=1, sort_keys=True)


def load_eval(path: Union[str, Path]) -> EvalResult:
    with open(path) as f:
        return EvalResult.from_dict(json.load(f))

