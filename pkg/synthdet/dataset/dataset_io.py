"""
Loading, validation, subsampling and persistence of COCO style detection datasets.

Real and generated datasets share the same types; the extra fields a generated dataset
needs (source, generation seed, aesthetic score, filter flags, mock ground truth) are
written under the vendor key ``synthdet`` so that standard COCO tools still parse the files.
"""
from dataclasses import astuple, dataclass, field, replace
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .boxes import Box, clip_boxes

dataset_logger = logging.getLogger('synthdet.dataset_io')

VENDOR_KEY = 'synthdet'
SOURCES = ('real', 'synthetic')
FREQUENCY_BUCKETS = ('rare', 'common', 'frequent')
RARE_MAX = 10
COMMON_MAX = 100


class DatasetValidationError(ValueError):
    """Raised when a dataset file violates the schema or the referential invariants."""

    def __init__(self, message: str, record_type: Optional[str] = None, record_id: Any = None):
        self.record_type = record_type
        self.record_id = record_id
        if record_type is not None:
            message = f'{record_type} {record_id}: {message}'
        super().__init__(message)


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    image_count: int = 0
    frequency_bucket: Optional[str] = None


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_path: str
    source: str = 'real'
    aesthetic_score: Optional[float] = None
    generation_seed: Optional[int] = None
    source_image_id: Optional[int] = None
    # mock generator ground truth, fraction of corrupted boxes on the image
    corruption_density: Optional[float] = None

    # a failed aesthetic score is NaN, two records with NaN scores compare equal
    def _key(self) -> tuple:
        return tuple('nan' if isinstance(v, float) and math.isnan(v) else v for v in astuple(self))

    def __eq__(self, other):
        if other.__class__ is not self.__class__:
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


@dataclass(frozen=True)
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: Box
    filtered_out: bool = False
    # mock generator ground truth: None for clean boxes, else the corruption kind
    corruption: Optional[str] = None
    # COCO keys we do not interpret (segmentation, iscrowd, ...) are passed through
    extra: Dict[str, Any] = field(default_factory=dict, compare=True)


@dataclass(frozen=True)
class Dataset:
    images: Tuple[ImageRecord, ...]
    annotations: Tuple[InstanceAnnotation, ...]
    categories: Tuple[Category, ...]
    source: str = 'real'
    # directory relative image paths are resolved against, not serialized
    image_root: Optional[Path] = field(default=None, compare=False)

    def annotations_by_image(self) -> Dict[int, List[InstanceAnnotation]]:
        """Group annotations by image id, keeping file order; images without boxes map to []."""
        grouped = {img.id: [] for img in self.images}
        for ann in self.annotations:
            grouped[ann.image_id].append(ann)
        return grouped

    def category_names(self) -> Dict[int, str]:
        return {cat.id: cat.name for cat in self.categories}

    def image_path(self, record: ImageRecord) -> Path:
        path = Path(record.file_path)
        if not path.is_absolute() and self.image_root is not None:
            path = Path(self.image_root, path)
        return path


def validate_dataset(d: Dataset) -> Dataset:
    """
    Check the referential invariants of a dataset.

    Raises
    ------
    DatasetValidationError
        Naming the first offending record.
    """
    if d.source not in SOURCES:
        raise DatasetValidationError(f'unknown dataset source {d.source!r}')

    cat_ids = set()
    for cat in d.categories:
        if cat.id in cat_ids:
            raise DatasetValidationError('duplicate category id', 'category', cat.id)
        cat_ids.add(cat.id)
        if cat.frequency_bucket is not None and cat.frequency_bucket not in FREQUENCY_BUCKETS:
            raise DatasetValidationError(f'unknown frequency bucket {cat.frequency_bucket!r}', 'category', cat.id)

    images = {}
    for img in d.images:
        if img.id in images:
            raise DatasetValidationError('duplicate image id', 'image', img.id)
        if img.width <= 0 or img.height <= 0:
            raise DatasetValidationError(f'invalid size {img.width}x{img.height}', 'image', img.id)
        if img.source not in SOURCES:
            raise DatasetValidationError(f'unknown source {img.source!r}', 'image', img.id)
        images[img.id] = img

    ann_ids = set()
    for ann in d.annotations:
        if ann.id in ann_ids:
            raise DatasetValidationError('duplicate annotation id', 'annotation', ann.id)
        ann_ids.add(ann.id)
        if ann.image_id not in images:
            raise DatasetValidationError(f'dangling reference to image_id {ann.image_id}', 'annotation', ann.id)
        if ann.category_id not in cat_ids:
            raise DatasetValidationError(f'dangling reference to category_id {ann.category_id}',
                                         'annotation', ann.id)
        x, y, w, h = ann.bbox
        img = images[ann.image_id]
        if w <= 0 or h <= 0:
            raise DatasetValidationError(f'zero-area box {ann.bbox}', 'annotation', ann.id)
        if x < 0 or y < 0 or x + w > img.width + 1e-6 or y + h > img.height + 1e-6:
            raise DatasetValidationError(f'box {ann.bbox} outside image bounds', 'annotation', ann.id)
    return d


def _require(record: dict, keys: Tuple[str, ...], record_type: str) -> None:
    for key in keys:
        if key not in record:
            raise DatasetValidationError(f'missing field {key!r}', record_type, record.get('id', '?'))


def _parse_image(record: dict, default_source: str) -> ImageRecord:
    _require(record, ('id', 'width', 'height', 'file_name'), 'image')
    ext = record.get(VENDOR_KEY, {})
    return ImageRecord(id=int(record['id']),
                       width=int(record['width']),
                       height=int(record['height']),
                       file_path=str(record['file_name']),
                       source=ext.get('source', default_source),
                       aesthetic_score=math.nan if ext.get('scoring_failed') else ext.get('aesthetic_score'),
                       generation_seed=ext.get('generation_seed'),
                       source_image_id=ext.get('source_image_id'),
                       corruption_density=ext.get('corruption_density'),
                       )


def _parse_annotation(record: dict, images: Dict[int, ImageRecord]) -> InstanceAnnotation:
    _require(record, ('id', 'image_id', 'category_id', 'bbox'), 'annotation')
    bbox = record['bbox']
    if len(bbox) != 4:
        raise DatasetValidationError(f'bbox must have 4 values, got {bbox}', 'annotation', record['id'])
    image = images.get(int(record['image_id']))
    x, y, w, h = (float(v) for v in bbox)
    if image is not None and (x < 0 or y < 0 or x + w > image.width or y + h > image.height):
        # boxes are stored clipped to the image, degenerate ones are rejected afterwards
        bbox = clip_boxes(np.asarray([bbox], dtype=float), image.width, image.height)[0]
    ext = record.get(VENDOR_KEY, {})
    extra = {k: v for k, v in record.items()
             if k not in ('id', 'image_id', 'category_id', 'bbox', 'area', VENDOR_KEY)}
    return InstanceAnnotation(id=int(record['id']),
                              image_id=int(record['image_id']),
                              category_id=int(record['category_id']),
                              bbox=tuple(float(v) for v in bbox),
                              filtered_out=bool(ext.get('filtered_out', False)),
                              corruption=ext.get('corruption'),
                              extra=extra,
                              )


def _parse_category(record: dict) -> Category:
    _require(record, ('id', 'name'), 'category')
    ext = record.get(VENDOR_KEY, {})
    return Category(id=int(record['id']),
                    name=str(record['name']),
                    image_count=int(ext.get('image_count', record.get('image_count', 0))),
                    frequency_bucket=ext.get('frequency_bucket'),
                    )


def dataset_from_coco(coco: dict, image_root: Optional[Path] = None) -> Dataset:
    """Build and validate a Dataset from an already parsed COCO dictionary."""
    for key in ('images', 'annotations', 'categories'):
        if key not in coco:
            raise DatasetValidationError(f'missing top-level key {key!r}')
    source = coco.get(VENDOR_KEY, {}).get('source', 'real')
    images = [_parse_image(r, source) for r in coco['images']]
    image_map = {img.id: img for img in images}
    annotations = [_parse_annotation(r, image_map) for r in coco['annotations']]
    categories = [_parse_category(r) for r in coco['categories']]
    d = Dataset(images=tuple(images),
                annotations=tuple(annotations),
                categories=tuple(categories),
                source=source,
                image_root=image_root)
    return validate_dataset(d)


def dataset_to_coco(d: Dataset) -> dict:
    """Convert a Dataset to a COCO dictionary with the vendor extension keys."""
    images = []
    for img in d.images:
        ext = {'source': img.source}
        for key in ('aesthetic_score', 'generation_seed', 'source_image_id', 'corruption_density'):
            if getattr(img, key) is not None:
                ext[key] = getattr(img, key)
        if img.aesthetic_score is not None and math.isnan(img.aesthetic_score):
            # NaN is not valid json
            ext['aesthetic_score'] = None
            ext['scoring_failed'] = True
        images.append({'id': img.id, 'width': img.width, 'height': img.height,
                       'file_name': img.file_path, VENDOR_KEY: ext})

    annotations = []
    for ann in d.annotations:
        record = {'id': ann.id, 'image_id': ann.image_id, 'category_id': ann.category_id,
                  'bbox': list(ann.bbox), 'area': ann.bbox[2] * ann.bbox[3]}
        record.update(ann.extra)
        ext = {'filtered_out': ann.filtered_out}
        if ann.corruption is not None:
            ext['corruption'] = ann.corruption
        record[VENDOR_KEY] = ext
        annotations.append(record)

    categories = []
    for cat in d.categories:
        ext = {'image_count': cat.image_count}
        if cat.frequency_bucket is not None:
            ext['frequency_bucket'] = cat.frequency_bucket
        categories.append({'id': cat.id, 'name': cat.name, VENDOR_KEY: ext})

    return {'images': images, 'annotations': annotations, 'categories': categories,
            VENDOR_KEY: {'source': d.source}}


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Load a COCO json file into a validated Dataset.

    Parameters
    ----------
    path : str or Path
        Location of the json file. Relative image paths are resolved against its directory.

    Returns
    -------
    Dataset

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    DatasetValidationError
        On malformed json, missing fields, dangling references, duplicate ids or zero-area boxes.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'dataset file {path} not found')
    with open(path) as f:
        try:
            coco = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetValidationError(f'malformed json in {path.name}: {e}') from e
    d = dataset_from_coco(coco, image_root=path.parent)
    dataset_logger.info(f'loaded {path.name}: {len(d.images)} images, '
                        f'{len(d.annotations)} annotations, {len(d.categories)} categories')
    return d


def save_dataset(d: Dataset, path: Union[str, Path]) -> None:
    """Write a Dataset as COCO json; the parent directory is created if needed."""
    validate_dataset(d)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(dataset_to_coco(d), f, indent=1)
    dataset_logger.info(f'saved {len(d.images)} images to {path}')


def select_images(d: Dataset, image_ids) -> Dataset:
    """Restrict a dataset to the given image ids, keeping all and only their annotations."""
    keep = set(image_ids)
    return replace(d,
                   images=tuple(img for img in d.images if img.id in keep),
                   annotations=tuple(ann for ann in d.annotations if ann.image_id in keep))


def subsample(d: Dataset, fraction: float, seed: int) -> Dataset:
    """
    Uniformly select a fraction of the images of a real dataset.

    round(fraction * n) images are drawn without replacement (rounding half up), the
    selection keeps the original image order. For a fixed seed the subsets are nested,
    i.e. a larger fraction always contains the images of a smaller one.

    Raises
    ------
    ValueError
        If the dataset is not real, fraction is outside (0, 1] or selects no image.
    """
    if d.source != 'real':
        raise ValueError('subsample is only defined for real datasets')
    if not 0 < fraction <= 1:
        raise ValueError(f'fraction must be in (0, 1], got {fraction}')
    n_images = len(d.images)
    n_select = int(np.floor(fraction * n_images + 0.5))
    if n_select == 0:
        raise ValueError(f'fraction {fraction} of {n_images} images selects no image')

    rng = np.random.default_rng(seed)
    order = rng.permutation(n_images)[:n_select]
    chosen = {d.images[i].id for i in order}
    dataset_logger.info(f'subsampled {n_select} of {n_images} images (fraction={fraction}, seed={seed})')
    return select_images(d, chosen)


def frequency_bucket(image_count: int, rare_max: int = RARE_MAX, common_max: int = COMMON_MAX) -> str:
    if image_count <= rare_max:
        return 'rare'
    if image_count <= common_max:
        return 'common'
    return 'frequent'


def assign_frequency_buckets(d: Dataset, rare_max: int = RARE_MAX, common_max: int = COMMON_MAX) -> Dataset:
    """Count the distinct images per category and assign the rare/common/frequent bucket."""
    images_per_cat = {cat.id: set() for cat in d.categories}
    for ann in d.annotations:
        images_per_cat[ann.category_id].add(ann.image_id)
    categories = tuple(replace(cat,
                               image_count=len(images_per_cat[cat.id]),
                               frequency_bucket=frequency_bucket(len(images_per_cat[cat.id]),
                                                                 rare_max, common_max))
                       for cat in d.categories)
    return replace(d, categories=categories)


def copy_buckets(d: Dataset, reference: Dataset) -> Dataset:
    """Take image counts and buckets from a reference (training) dataset, e.g. for a test split."""
    ref = {cat.id: cat for cat in reference.categories}
    categories = tuple(replace(cat, image_count=ref[cat.id].image_count,
                               frequency_bucket=ref[cat.id].frequency_bucket)
                       if cat.id in ref else cat
                       for cat in d.categories)
    return replace(d, categories=categories)


def read_image(d: Dataset, record: ImageRecord) -> np.ndarray:
    """Read the pixels of an image record as an (H, W, 3) uint8 array."""
    with Image.open(d.image_path(record)) as img:
        return np.asarray(img.convert('RGB'), dtype=np.uint8)


def write_image(image: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode='RGB').save(path)


def with_absolute_paths(d: Dataset) -> Dataset:
    """Resolve all image paths so the dataset json can be saved to any directory."""
    images = tuple(replace(img, file_path=str(d.image_path(img).resolve())) for img in d.images)
    return replace(d, images=images, image_root=None)
