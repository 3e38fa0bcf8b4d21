"""
Grounded inpainting: the adapter of a remote inference service and the deterministic
mock generator used for tests and desk experiments.

Both backends take the image, its boxes with labels and prompts, and a seed, and return
an image of the same size in which the annotated regions were repainted with new
instances of the same class. The mock additionally reports per box whether it spoiled
the instance, which is the ground truth the filters are measured against.
"""
import base64
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import io
import logging
from pathlib import Path
import time
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from PIL import Image
import requests

from .glyphs import Glyph, default_palette, fill_background, render_glyph, to_float, to_uint8
from .prompt_builder import build_prompts
from ..dataset.boxes import Box
from ..dataset.dataset_io import Dataset, ImageRecord, InstanceAnnotation, read_image, write_image
from ..dataset.toy_corpus import place_box

generation_logger = logging.getLogger('synthdet.generation_client')

CORRUPTION_KINDS = ('wrong_category', 'blank', 'misplaced')


class GenerationError(RuntimeError):
    """Inpainting failed; carries the retry metadata of the request."""

    def __init__(self, message: str, attempts: int = 1, last_status: Optional[int] = None,
                 retryable: bool = False):
        self.attempts = attempts
        self.last_status = last_status
        self.retryable = retryable
        super().__init__(f'{message} (attempts={attempts}, last_status={last_status})')


@dataclass(frozen=True)
class BoxRequest:
    box: Box
    category_name: str
    box_prompt: str


@dataclass(frozen=True)
class GenerationRequest:
    image: np.ndarray = field(compare=False)
    boxes: Tuple[BoxRequest, ...]
    image_prompt: str
    seed: int


@dataclass(frozen=True)
class BoxMetadata:
    corrupted: bool
    corruption_kind: Optional[str] = None
    rendered_category: Optional[str] = None


@dataclass(frozen=True)
class GenerationResult:
    image: np.ndarray = field(compare=False)
    seed: int
    # only the mock knows what it did to each box
    per_box_metadata: Optional[Tuple[BoxMetadata, ...]] = None
    hallucinations: Tuple[Tuple[Box, str], ...] = ()


@dataclass(frozen=True)
class MockGenConfig:
    corruption_rate: float = 0.3
    hallucination_rate: float = 0.2
    corruption_kinds: Tuple[str, ...] = CORRUPTION_KINDS
    glyph_palette: Optional[Dict[str, Glyph]] = None

    def __post_init__(self):
        for name in ('corruption_rate', 'hallucination_rate'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f'{name} must be in [0, 1], got {value}')
        unknown = set(self.corruption_kinds) - set(CORRUPTION_KINDS)
        if unknown or not self.corruption_kinds:
            raise ValueError(f'corruption_kinds must be a non-empty subset of {CORRUPTION_KINDS}')

    @classmethod
    def from_config(cls, conf: dict, category_names: Optional[Sequence[str]] = None) -> 'MockGenConfig':
        """category_names in category id order fix the glyph palette, as used by the glyph corpus."""
        return cls(corruption_rate=float(conf.get('corruption_rate', 0.3)),
                   hallucination_rate=float(conf.get('hallucination_rate', 0.2)),
                   corruption_kinds=tuple(conf.get('corruption_kinds') or CORRUPTION_KINDS),
                   glyph_palette=default_palette(list(category_names)) if category_names else None)


def dataset_palette(d: Dataset) -> Dict[str, Glyph]:
    """Glyph palette of a dataset's categories in id order, the palette the glyph corpus is drawn with."""
    return default_palette([c.name for c in sorted(d.categories, key=lambda c: c.id)])


class InpaintingBackend(Protocol):
    max_in_flight: int

    def inpaint(self, req: GenerationRequest) -> GenerationResult:
        ...


def _other_category(rng: np.random.Generator, palette: Dict[str, Glyph], name: str) -> Optional[str]:
    others = sorted(n for n in palette if n != name)
    if not others:
        return None
    return others[int(rng.integers(len(others)))]


def mock_inpaint(req: GenerationRequest, cfg: MockGenConfig) -> GenerationResult:
    """
    Deterministic stand-in for the diffusion model.

    Every box is cleared and repainted with a new glyph of its category. Independently per
    box and with probability corruption_rate the glyph is spoiled instead, the kind drawn
    uniformly from cfg.corruption_kinds:

    - wrong_category: the glyph of another category is drawn in the box
    - blank: the box is left as background
    - misplaced: the box is left as background and the glyph lands in free space elsewhere

    With probability hallucination_rate one extra glyph without annotation is drawn in
    free space. All randomness is drawn from the request seed.

    Raises
    ------
    GenerationError
        If a box is smaller than 4x4 pixels or a category has no glyph.
    """
    palette = cfg.glyph_palette or default_palette(sorted({b.category_name for b in req.boxes}))
    for b in req.boxes:
        if b.category_name not in palette:
            raise GenerationError(f'no glyph defined for category {b.category_name!r}')
        if b.box[2] < 4 or b.box[3] < 4:
            raise GenerationError(f'box {b.box} too small to render a glyph')

    rng = np.random.default_rng(req.seed)
    image = to_float(req.image).copy()
    height, width = image.shape[:2]
    occupied: List[Box] = [b.box for b in req.boxes]
    metadata = []

    for b in req.boxes:
        fill_background(image, b.box, rng)
        corrupted = rng.random() < cfg.corruption_rate
        kind = cfg.corruption_kinds[int(rng.integers(len(cfg.corruption_kinds)))] if corrupted else None
        rendered = b.category_name
        if kind == 'wrong_category':
            rendered = _other_category(rng, palette, b.category_name)
        elif kind == 'blank':
            rendered = None
        elif kind == 'misplaced':
            rendered = None
            free = place_box(rng, min(height, width), occupied, large_probability=0.0)
            if free is not None:
                occupied.append(free)
                render_glyph(image, free, palette[b.category_name], rng)
        if rendered is not None:
            render_glyph(image, b.box, palette[rendered], rng)
        metadata.append(BoxMetadata(corrupted=corrupted, corruption_kind=kind, rendered_category=rendered))

    hallucinations = []
    if rng.random() < cfg.hallucination_rate:
        free = place_box(rng, min(height, width), occupied, large_probability=0.0)
        if free is None:
            generation_logger.warning('no free space left for a hallucinated instance')
        else:
            name = sorted(palette)[int(rng.integers(len(palette)))]
            render_glyph(image, free, palette[name], rng)
            hallucinations.append((free, name))

    return GenerationResult(image=to_uint8(image), seed=req.seed,
                            per_box_metadata=tuple(metadata), hallucinations=tuple(hallucinations))


class MockGenerator:
    """InpaintingBackend backed by mock_inpaint."""
    max_in_flight = 1

    def __init__(self, cfg: MockGenConfig):
        self.cfg = cfg

    def inpaint(self, req: GenerationRequest) -> GenerationResult:
        return mock_inpaint(req, self.cfg)


def encode_image(image: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode='RGB').save(buffer, format='PNG')
    return base64.b64encode(buffer.getvalue()).decode()


def decode_image(payload: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(payload))) as img:
        return np.asarray(img.convert('RGB'), dtype=np.uint8)


def post_json_with_retries(session: requests.Session, url: str, payload: dict,
                           timeout: float = 60.0, max_retries: int = 3,
                           backoff_seconds: float = 1.0) -> dict:
    """
    POST a json payload and return the decoded json answer.

    Connection errors, timeouts and 5xx answers are retried up to max_retries times with
    exponential backoff (backoff_seconds * 2**attempt). 4xx answers are not retried.

    Raises
    ------
    GenerationError
        With the number of attempts and the last HTTP status.
    """
    last_status = None
    attempts = 0
    for attempt in range(max_retries + 1):
        attempts = attempt + 1
        try:
            response = session.post(url, json=payload, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            generation_logger.warning(f'request to {url} failed ({e}), attempt {attempts}')
        else:
            last_status = response.status_code
            if response.status_code < 400:
                try:
                    return response.json()
                except ValueError as e:
                    raise GenerationError(f'malformed response from {url}: {e}',
                                          attempts=attempts, last_status=last_status) from e
            if response.status_code < 500:
                raise GenerationError(f'service at {url} rejected the request',
                                      attempts=attempts, last_status=last_status)
            generation_logger.warning(f'service at {url} answered {response.status_code}, attempt {attempts}')
        if attempt < max_retries:
            time.sleep(backoff_seconds * 2 ** attempt)
    raise GenerationError(f'service at {url} unreachable', attempts=attempts,
                          last_status=last_status, retryable=True)


class InpaintingServiceClient:
    """
    Adapter of a remote grounded inpainting service speaking json over HTTP.

    Request: {image_b64, boxes: [{x, y, w, h, label, prompt}], image_prompt, seed}
    Response: {image_b64, seed}
    """

    def __init__(self, url: str, timeout: float = 60.0, max_retries: int = 3,
                 backoff_seconds: float = 1.0, max_in_flight: int = 4,
                 session: Optional[requests.Session] = None):
        self.url = url
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.max_in_flight = max_in_flight
        self.session = session or requests.Session()

    @classmethod
    def from_config(cls, conf: dict) -> 'InpaintingServiceClient':
        return cls(url=conf['url'],
                   timeout=float(conf.get('timeout', 60)),
                   max_retries=int(conf.get('max_retries', 3)),
                   backoff_seconds=float(conf.get('backoff_seconds', 1.0)),
                   max_in_flight=int(conf.get('max_in_flight', 4)))

    def inpaint(self, req: GenerationRequest) -> GenerationResult:
        payload = {'image_b64': encode_image(req.image),
                   'boxes': [{'x': b.box[0], 'y': b.box[1], 'w': b.box[2], 'h': b.box[3],
                              'label': b.category_name, 'prompt': b.box_prompt} for b in req.boxes],
                   'image_prompt': req.image_prompt,
                   'seed': int(req.seed)}
        answer = post_json_with_retries(self.session, self.url, payload, timeout=self.timeout,
                                        max_retries=self.max_retries, backoff_seconds=self.backoff_seconds)
        if 'image_b64' not in answer:
            raise GenerationError('malformed response: image_b64 missing', last_status=200)
        try:
            image = decode_image(answer['image_b64'])
        except Exception as e:
            raise GenerationError(f'malformed response: {e}', last_status=200) from e
        if image.shape != req.image.shape:
            raise GenerationError(f'service changed the image size from {req.image.shape} to {image.shape}',
                                  last_status=200)
        return GenerationResult(image=image, seed=int(answer.get('seed', req.seed)))

    def inpaint_many(self, reqs: Sequence[GenerationRequest]) -> List[GenerationResult]:
        return inpaint_many(reqs, self, self.max_in_flight)


def inpaint(req: GenerationRequest, backend: InpaintingBackend) -> GenerationResult:
    """
    Inpaint all boxes of a request with the given backend.

    A request without boxes has nothing to inpaint and the input image is returned as is.
    """
    if not req.boxes:
        return GenerationResult(image=np.array(req.image, copy=True), seed=req.seed,
                                per_box_metadata=() if isinstance(backend, MockGenerator) else None)
    result = backend.inpaint(req)
    if result.image.shape != req.image.shape:
        raise GenerationError(f'generated image has shape {result.image.shape}, expected {req.image.shape}')
    return result


def inpaint_many(reqs: Sequence[GenerationRequest], backend: InpaintingBackend,
                 max_in_flight: int = 1) -> List[GenerationResult]:
    """Run requests with at most max_in_flight in parallel, results in request order."""
    if max_in_flight < 1:
        raise ValueError(f'max_in_flight must be positive, got {max_in_flight}')
    if max_in_flight == 1 or len(reqs) < 2:
        return [inpaint(req, backend) for req in reqs]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda req: inpaint(req, backend), reqs))


def derive_seed(base_seed: int, image_id: int, copy_index: int) -> int:
    """Seed of one generated copy, a deterministic function of (base_seed, image_id, copy_index)."""
    return int(np.random.SeedSequence([base_seed, image_id, copy_index]).generate_state(1)[0])


def build_request(image: np.ndarray, annotations: List[InstanceAnnotation],
                  category_names: Dict[int, str], seed: int, article: str = 'a') -> GenerationRequest:
    prompts = build_prompts(annotations, category_names, article=article)
    boxes = tuple(BoxRequest(box=ann.bbox, category_name=category_names[ann.category_id], box_prompt=prompt)
                  for ann, (_, prompt) in zip(annotations, prompts.box_prompts))
    return GenerationRequest(image=image, boxes=boxes, image_prompt=prompts.image_prompt, seed=seed)


def generate_synthetic_dataset(d: Dataset, copies: int, base_seed: int, backend: InpaintingBackend,
                               output_dir: Path, article: str = 'a') -> Dataset:
    """
    Generate k inpainted copies of every real image.

    The annotation geometry and categories are reused unchanged; each copy gets its own
    seed derived from (base_seed, image_id, copy_index). Images are written to
    output_dir/synthetic/, mock ground truth is stored on the records.

    Parameters
    ----------
    d : Dataset
        The real dataset whose layouts are reused.
    copies : int
        Number of generated copies per real image, k >= 1.
    base_seed : int
        Seed all per-copy seeds are derived from.
    backend : InpaintingBackend
        MockGenerator or InpaintingServiceClient. A mock without glyph palette draws with
        the palette of d, so that generated glyphs look like the real ones. Requests are
        sent with at most backend.max_in_flight in parallel.
    output_dir : Path
        Root of the synthetic dataset; image paths are stored relative to it.

    Returns
    -------
    Dataset
        Synthetic dataset with k * |images| images and k * |annotations| annotations.
    """
    if copies < 1:
        raise ValueError(f'copies must be >= 1, got {copies}')
    if isinstance(backend, MockGenerator) and backend.cfg.glyph_palette is None:
        backend = MockGenerator(replace(backend.cfg, glyph_palette=dataset_palette(d)))
    output_dir = Path(output_dir)
    category_names = d.category_names()
    per_image = d.annotations_by_image()

    images: List[ImageRecord] = []
    annotations: List[InstanceAnnotation] = []
    for copy_index in range(copies):
        generation_logger.info(f'generate copy {copy_index + 1} of {copies} for {len(d.images)} images')
        seeds = [derive_seed(base_seed, record.id, copy_index) for record in d.images]
        reqs = [build_request(read_image(d, record), per_image[record.id], category_names, seed, article=article)
                for record, seed in zip(d.images, seeds)]
        results = inpaint_many(reqs, backend, backend.max_in_flight)
        for record, seed, result in zip(d.images, seeds, results):
            anns = per_image[record.id]
            new_id = len(images) + 1
            file_path = f'synthetic/{record.id:06d}_{copy_index}.png'
            write_image(result.image, Path(output_dir, file_path))

            density = None
            if result.per_box_metadata is not None:
                n_corrupt = sum(m.corrupted for m in result.per_box_metadata)
                density = n_corrupt / len(anns) if anns else 0.0
            images.append(replace(record, id=new_id, file_path=file_path, source='synthetic',
                                  generation_seed=seed, source_image_id=record.id, aesthetic_score=None,
                                  corruption_density=density))
            for i, ann in enumerate(anns):
                kind = result.per_box_metadata[i].corruption_kind if result.per_box_metadata else None
                annotations.append(replace(ann, id=len(annotations) + 1, image_id=new_id,
                                           filtered_out=False, corruption=kind))

    synth = Dataset(images=tuple(images), annotations=tuple(annotations), categories=d.categories,
                    source='synthetic', image_root=output_dir)
    generation_logger.info(f'generated {len(images)} synthetic images with {len(annotations)} annotations')
    return synth
