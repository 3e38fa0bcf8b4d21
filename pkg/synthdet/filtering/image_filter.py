"""
Image level filtering of generated images by a global quality (aesthetic) score.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import logging
import math
from pathlib import Path
from typing import Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd
import requests

from ..dataset.dataset_io import Dataset, ImageRecord, read_image
from ..generation.generation_client import encode_image, post_json_with_retries

filter_logger = logging.getLogger('synthdet.image_filter')

REPORT_COLUMNS = ['image_id', 'score', 'tau_a', 'kept', 'reason']


@dataclass(frozen=True)
class ImageFilterConfig:
    tau_a: float = 4.5

    def __post_init__(self):
        # -inf disables the filter, nan and +inf make no sense
        if math.isnan(self.tau_a) or self.tau_a == math.inf:
            raise ValueError(f'tau_a must be finite or -inf, got {self.tau_a}')

    @classmethod
    def from_config(cls, conf: dict) -> 'ImageFilterConfig':
        return cls(tau_a=float(conf.get('tau_a', 4.5)))


@dataclass(frozen=True)
class FilterReport:
    decisions: pd.DataFrame

    @property
    def discarded(self) -> pd.DataFrame:
        return self.decisions[~self.decisions['kept']]

    def write(self, path: Union[str, Path]) -> None:
        write_report(self.decisions, path)


class AestheticScorer(Protocol):
    def score(self, image: np.ndarray, record: ImageRecord) -> float:
        ...


class ConstantScorer:
    needs_pixels = False

    def __init__(self, value: float):
        self.value = float(value)

    def score(self, image: np.ndarray, record: ImageRecord) -> float:
        return self.value


class CorruptionDensityScorer:
    """
    Mock aesthetic model keyed to the ground truth of the mock generator.

    score = clean_score - corruption_penalty * corruption_density + jitter, where the
    jitter is uniform in [-jitter, jitter] and seeded by the generation seed of the image,
    so rescoring gives identical values.
    """
    needs_pixels = False

    def __init__(self, clean_score: float = 6.0, corruption_penalty: float = 4.0, jitter: float = 0.25):
        self.clean_score = clean_score
        self.corruption_penalty = corruption_penalty
        self.jitter = jitter

    @classmethod
    def from_config(cls, conf: dict) -> 'CorruptionDensityScorer':
        return cls(clean_score=float(conf.get('clean_score', 6.0)),
                   corruption_penalty=float(conf.get('corruption_penalty', 4.0)),
                   jitter=float(conf.get('jitter', 0.25)))

    def score(self, image: np.ndarray, record: ImageRecord) -> float:
        if record.corruption_density is None:
            raise ValueError(f'image {record.id} carries no mock corruption density')
        seed = record.generation_seed if record.generation_seed is not None else record.id
        noise = np.random.default_rng(seed).uniform(-self.jitter, self.jitter)
        return self.clean_score - self.corruption_penalty * record.corruption_density + noise


class AestheticServiceScorer:
    """Adapter of a remote aesthetic predictor: {image_b64} -> {score}."""

    def __init__(self, url: str, timeout: float = 30.0, max_retries: int = 3, backoff_seconds: float = 1.0,
                 session: Optional[requests.Session] = None):
        self.url = url
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.session = session or requests.Session()

    @classmethod
    def from_config(cls, conf: dict) -> 'AestheticServiceScorer':
        return cls(url=conf['url'], timeout=float(conf.get('timeout', 30)),
                   max_retries=int(conf.get('max_retries', 3)),
                   backoff_seconds=float(conf.get('backoff_seconds', 1.0)))

    def score(self, image: np.ndarray, record: ImageRecord) -> float:
        answer = post_json_with_retries(self.session, self.url, {'image_b64': encode_image(image)},
                                        timeout=self.timeout, max_retries=self.max_retries,
                                        backoff_seconds=self.backoff_seconds)
        return float(answer['score'])


def scorer_from_config(conf: dict) -> AestheticScorer:
    kind = conf.get('scorer', 'corruption_density')
    if kind == 'corruption_density':
        return CorruptionDensityScorer.from_config(conf.get('mock', {}))
    if kind == 'constant':
        return ConstantScorer(conf.get('constant', 5.0))
    if kind == 'service':
        return AestheticServiceScorer.from_config(conf['service'])
    raise ValueError(f'unknown aesthetic scorer {kind!r}')


def _score_one(d: Dataset, record: ImageRecord, scorer: AestheticScorer) -> float:
    try:
        image = read_image(d, record) if getattr(scorer, 'needs_pixels', True) else None
        value = float(scorer.score(image, record))
        if not math.isfinite(value):
            raise ValueError(f'non-finite score {value}')
        return value
    except Exception as e:
        filter_logger.warning(f'scoring image {record.id} failed: {e}')
        return math.nan


def score_images(d: Dataset, scorer: AestheticScorer, max_workers: int = 1) -> Dataset:
    """
    Attach an aesthetic score to every image of a synthetic dataset.

    A failing scorer does not stop the run: the image gets the score NaN, which
    filter_by_score treats as a discard.

    Raises
    ------
    ValueError
        If the dataset is not synthetic.
    """
    if d.source != 'synthetic':
        raise ValueError('only generated images are scored')
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            scores = list(pool.map(lambda rec: _score_one(d, rec, scorer), d.images))
    else:
        scores = [_score_one(d, rec, scorer) for rec in d.images]
    n_failed = sum(math.isnan(s) for s in scores)
    if n_failed:
        filter_logger.warning(f'{n_failed} of {len(scores)} images could not be scored')
    images = tuple(replace(rec, aesthetic_score=s) for rec, s in zip(d.images, scores))
    return replace(d, images=images)


def filter_by_score(d: Dataset, cfg: ImageFilterConfig) -> Tuple[Dataset, FilterReport]:
    """
    Discard images scoring less than tau_a together with all their annotations.

    A score equal to tau_a is kept. Images with a failed (NaN) score are discarded with
    reason 'scoring_failed'.

    Returns
    -------
    kept : Dataset
    report : FilterReport
        One record per image {image_id, score, tau_a, kept, reason}.

    Raises
    ------
    ValueError
        If an image was never scored.
    """
    records = []
    keep_ids = set()
    for rec in d.images:
        if rec.aesthetic_score is None:
            raise ValueError(f'image {rec.id} has not been scored')
        if math.isnan(rec.aesthetic_score):
            kept, reason = False, 'scoring_failed'
        elif rec.aesthetic_score >= cfg.tau_a:
            kept, reason = True, None
        else:
            kept, reason = False, 'below_tau_a'
        if kept:
            keep_ids.add(rec.id)
        records.append({'image_id': rec.id, 'score': rec.aesthetic_score, 'tau_a': cfg.tau_a,
                        'kept': kept, 'reason': reason})

    kept_dataset = replace(d,
                           images=tuple(rec for rec in d.images if rec.id in keep_ids),
                           annotations=tuple(ann for ann in d.annotations if ann.image_id in keep_ids))
    report = FilterReport(pd.DataFrame(records, columns=REPORT_COLUMNS).astype({'kept': bool}))
    filter_logger.info(f'image filter tau_a={cfg.tau_a}: kept {len(keep_ids)} of {len(d.images)} images, '
                       f'{len(d.annotations) - len(kept_dataset.annotations)} annotations removed with them')
    return kept_dataset, report


def write_report(report: pd.DataFrame, path: Union[str, Path]) -> None:
    """Write a report DataFrame as json lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(path, orient='records', lines=True)


def read_report(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_json(path, orient='records', lines=True)
