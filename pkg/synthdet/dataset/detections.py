"""
Detections as emitted by the toy detector and consumed by the instance filter and the evaluator.
"""
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import List, Sequence, Union

import pandas as pd

from .boxes import Box

detections_logger = logging.getLogger('synthdet.detections')

DETECTION_COLUMNS = ['image_id', 'category_id', 'x', 'y', 'w', 'h', 'score']


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    bbox: Box
    score: float

    def __post_init__(self):
        if not 0 <= self.score <= 1:
            raise ValueError(f'detection score must be in [0, 1], got {self.score}')


def detections_to_frame(detections: Sequence[Detection]) -> pd.DataFrame:
    rows = [(d.image_id, d.category_id, *d.bbox, d.score) for d in detections]
    return pd.DataFrame(rows, columns=DETECTION_COLUMNS)


def detections_from_frame(frame: pd.DataFrame) -> List[Detection]:
    return [Detection(image_id=int(row.image_id), category_id=int(row.category_id),
                      bbox=(float(row.x), float(row.y), float(row.w), float(row.h)), score=float(row.score))
            for row in frame.itertuples(index=False)]


def write_detections(detections: Sequence[Detection], path: Union[str, Path]) -> None:
    """Write detections as json lines, one record per detection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    detections_to_frame(detections).to_json(path, orient='records', lines=True, double_precision=15)
    detections_logger.info(f'wrote {len(detections)} detections to {path.name}')


def read_detections(path: Union[str, Path]) -> List[Detection]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.stat().st_size == 0:
        return []
    return detections_from_frame(pd.read_json(path, orient='records', lines=True))
