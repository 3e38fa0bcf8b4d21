"""
Instance level filtering of generated annotations with a detector trained on real data only.

An annotation of a generated image is kept if the detector supports it with at least one
prediction whose score is greater than tau_s and whose IoU with the annotation is greater
than tau_iou. Unsupported annotations are flagged filtered_out rather than deleted: the
pixels of a bad instance remain in the image and training has to ignore that region.
"""
from dataclasses import dataclass, replace
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..dataset.boxes import Box, as_array, iou_matrix
from ..dataset.dataset_io import Dataset, InstanceAnnotation
from ..dataset.detections import Detection
from ..training.batch_sampler import SamplerConfig
from ..training.toy_detector import TrainState, TrainingConfig, predict_dataset, train

filter_logger = logging.getLogger('synthdet.detector_filter')

REPORT_COLUMNS = ['annotation_id', 'image_id', 'category_id', 'kept', 'best_score', 'best_iou',
                  'tau_s', 'tau_iou', 'corruption']


@dataclass(frozen=True)
class DetectorFilterConfig:
    tau_s: float = 0.2
    tau_iou: float = 0.3
    class_agnostic: bool = False

    def __post_init__(self):
        for name in ('tau_s', 'tau_iou'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f'{name} must be in [0, 1], got {value}')

    @classmethod
    def from_config(cls, conf: dict) -> 'DetectorFilterConfig':
        return cls(tau_s=float(conf.get('tau_s', 0.2)), tau_iou=float(conf.get('tau_iou', 0.3)),
                   class_agnostic=bool(conf.get('class_agnostic', False)))


def iou(a: Box, b: Box) -> float:
    """
    Intersection over union of two xywh boxes.

    Raises
    ------
    ValueError
        If one of the boxes has zero area.
    """
    for box in (a, b):
        if box[2] <= 0 or box[3] <= 0:
            raise ValueError(f'box {box} has zero area')
    return float(iou_matrix(as_array([a]), as_array([b]))[0, 0])


def _support(gt: InstanceAnnotation, preds: Sequence[Detection], overlaps: np.ndarray,
             cfg: DetectorFilterConfig) -> Tuple[bool, float, float]:
    """(supported, best score among overlapping candidates, best IoU among confident candidates)."""
    supported = False
    best_score = 0.0
    best_iou = 0.0
    for pred, overlap in zip(preds, overlaps):
        if not cfg.class_agnostic and pred.category_id != gt.category_id:
            continue
        confident = pred.score > cfg.tau_s
        overlapping = overlap > cfg.tau_iou
        supported = supported or (confident and overlapping)
        if overlapping:
            best_score = max(best_score, pred.score)
        if confident:
            best_iou = max(best_iou, float(overlap))
    return supported, best_score, best_iou


def filter_instances(gt: Sequence[InstanceAnnotation], preds: Sequence[Detection], cfg: DetectorFilterConfig,
                     ) -> Tuple[List[InstanceAnnotation], List[InstanceAnnotation]]:
    """
    Split the annotations of one generated image into supported and unsupported ones.

    Returns
    -------
    kept : list of InstanceAnnotation
    removed : list of InstanceAnnotation
        The unsupported annotations with filtered_out=True.

    Raises
    ------
    ValueError
        If the annotations or predictions do not all refer to the same image.
    """
    kept, removed, _ = _filter_image(gt, preds, cfg)
    return kept, removed


def _filter_image(gt: Sequence[InstanceAnnotation], preds: Sequence[Detection], cfg: DetectorFilterConfig):
    image_ids = {ann.image_id for ann in gt} | {p.image_id for p in preds}
    if len(image_ids) > 1:
        raise ValueError(f'annotations and predictions refer to several images: {sorted(image_ids)}')
    overlaps = iou_matrix(as_array([a.bbox for a in gt]), as_array([p.bbox for p in preds]))
    kept, removed, records = [], [], []
    for i, ann in enumerate(gt):
        supported, best_score, best_iou = _support(ann, preds, overlaps[i], cfg)
        if supported:
            kept.append(replace(ann, filtered_out=False))
        else:
            removed.append(replace(ann, filtered_out=True))
        records.append({'annotation_id': ann.id, 'image_id': ann.image_id, 'category_id': ann.category_id,
                        'kept': supported, 'best_score': best_score, 'best_iou': best_iou,
                        'tau_s': cfg.tau_s, 'tau_iou': cfg.tau_iou, 'corruption': ann.corruption})
    return kept, removed, records


def train_filter_detector(real: Dataset, cfg: TrainingConfig, config_hash: Optional[str] = None) -> TrainState:
    """
    Train the filter detector on real images only: no synthetic batches, no background ignore.

    Raises
    ------
    ValueError
        If the dataset is not real or has no images.
    """
    if real.source != 'real':
        raise ValueError('the filter detector is trained on real data only')
    if not real.images:
        raise ValueError('cannot train the filter detector on an empty dataset')
    real_only = replace(cfg, background_ignore=False,
                        sampler=SamplerConfig(p=0.0, batch_size=cfg.sampler.batch_size, seed=cfg.sampler.seed))
    filter_logger.info(f'train filter detector on {len(real.images)} real images')
    return train(real, None, real_only, config_hash=config_hash)


def run_filter(synth: Dataset, det: Optional[TrainState], cfg: DetectorFilterConfig,
               predictions: Optional[Sequence[Detection]] = None, nms_iou: float = 0.5,
               score_floor: float = 0.01) -> Tuple[Dataset, pd.DataFrame]:
    """
    Flag every unsupported annotation of a generated dataset.

    Parameters
    ----------
    synth : Dataset
        Generated dataset, usually after image filtering.
    det : TrainState or None
        Filter detector; only used when no predictions are given.
    cfg : DetectorFilterConfig
    predictions : sequence of Detection, optional
        Precomputed predictions of the filter detector on synth.

    Returns
    -------
    Dataset
        synth with filtered_out set on every unsupported annotation, order preserved.
    pd.DataFrame
        One report record per annotation.
    """
    if predictions is None:
        if det is None:
            raise ValueError('run_filter needs a filter detector or precomputed predictions')
        predictions = predict_dataset(det, synth, nms_iou=nms_iou, score_floor=score_floor)
    image_ids = {img.id for img in synth.images}
    preds_by_image: Dict[int, List[Detection]] = {i: [] for i in image_ids}
    for pred in predictions:
        if pred.image_id not in image_ids:
            raise ValueError(f'prediction references unknown image {pred.image_id}')
        preds_by_image[pred.image_id].append(pred)
    if not predictions:
        filter_logger.warning('the filter detector made no predictions, every annotation will be removed')

    flags = {}
    records = []
    for image_id, anns in synth.annotations_by_image().items():
        kept, removed, image_records = _filter_image(anns, preds_by_image[image_id], cfg)
        flags.update({ann.id: False for ann in kept})
        flags.update({ann.id: True for ann in removed})
        records.extend(image_records)

    flagged = replace(synth, annotations=tuple(replace(ann, filtered_out=flags[ann.id]) for ann in synth.annotations))
    report = pd.DataFrame(records, columns=REPORT_COLUMNS).sort_values('annotation_id', kind='stable') \
        .reset_index(drop=True)
    n_removed = int((~report['kept']).sum()) if len(report) else 0
    filter_logger.info(f'instance filter tau_s={cfg.tau_s}, tau_iou={cfg.tau_iou}: '
                       f'removed {n_removed} of {len(records)} annotations')
    if len(report) and report['corruption'].notna().any():
        corrupted = report['corruption'].notna()
        filter_logger.info(f'removed {int((~report["kept"] & corrupted).sum())} of {int(corrupted.sum())} corrupted '
                           f'and {int((~report["kept"] & ~corrupted).sum())} of {int((~corrupted).sum())} clean '
                           f'annotations')
    return flagged, report


def removal_rates(report: pd.DataFrame) -> Dict[str, float]:
    """Share of corrupted and of clean annotations removed, from a report carrying mock ground truth."""
    corrupted = report['corruption'].notna()
    removed = ~report['kept'].astype(bool)
    return {'corrupted_removed': float(removed[corrupted].mean()) if corrupted.any() else math.nan,
            'clean_removed': float(removed[~corrupted].mean()) if (~corrupted).any() else math.nan}
