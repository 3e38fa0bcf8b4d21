"""
A minimal anchor based detector with linear heads on closed-form features.

The detector scores a fixed anchor grid with an objectness head, a category head over
K+1 classes (index 0 is background) and a box regression head. Gradients are derived
analytically, which keeps training deterministic and lets the loss masking of synthetic
images be checked exactly:

- background anchors of synthetic images whose foreground score exceeds tau_i are
  excluded from the objectness term and, independently, from the category-head
  background term
- anchors overlapping an annotation removed by the instance filter are ignored
- the mask loss is gated off for synthetic images
"""
from dataclasses import dataclass, field, replace
from enum import IntEnum
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp, softmax

from .batch_sampler import BatchSampler, SamplerConfig
from .features import anchor_features, feature_dim
from ..dataset.boxes import Box, as_array, clip_boxes, decode_deltas, encode_deltas, greedy_nms, iou_matrix
from ..dataset.dataset_io import Dataset, InstanceAnnotation, read_image
from ..dataset.detections import Detection

detector_logger = logging.getLogger('synthdet.toy_detector')


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f'training diverged at step {step} (loss={loss})')


class MatchLabel(IntEnum):
    """Negative anchor labels; labels >= 0 are the index of the matched ground truth box."""
    BACKGROUND = -1
    IOU_IGNORE = -2


@dataclass(frozen=True)
class AnchorGrid:
    anchors: np.ndarray = field(compare=False)
    scale_index: np.ndarray = field(compare=False)
    image_size: int
    stride: int
    scales: Tuple[float, ...]

    def __len__(self):
        return len(self.anchors)


def build_anchors(image_size: int, stride: int, scales: Sequence[float]) -> AnchorGrid:
    """
    Square anchors of every scale centered on every cell of a stride grid.

    Anchors are ordered cell by cell (row major), scales within a cell, and clipped to
    the image. A remainder of image_size not divisible by stride is dropped.

    Raises
    ------
    ValueError
        If stride or a scale is not positive, or stride exceeds the image size.
    """
    if stride <= 0:
        raise ValueError(f'stride must be positive, got {stride}')
    if stride > image_size:
        raise ValueError(f'stride {stride} exceeds the image size {image_size}')
    if not scales or min(scales) <= 0:
        raise ValueError(f'scales must be positive, got {scales}')
    n_cells = image_size // stride
    boxes, scale_index = [], []
    for row in range(n_cells):
        for col in range(n_cells):
            cx = col * stride + stride / 2
            cy = row * stride + stride / 2
            for s, size in enumerate(scales):
                boxes.append((cx - size / 2, cy - size / 2, size, size))
                scale_index.append(s)
    anchors = clip_boxes(np.asarray(boxes, dtype=float), image_size, image_size)
    return AnchorGrid(anchors=anchors, scale_index=np.asarray(scale_index, dtype=int),
                      image_size=image_size, stride=stride, scales=tuple(float(s) for s in scales))


def match_anchors(grid: AnchorGrid, gt_boxes: Sequence[Box], ignored_boxes: Sequence[Box] = (),
                  fg_iou: float = 0.5, bg_iou: float = 0.4) -> np.ndarray:
    """
    Assign every anchor a label: the index of its ground truth box, background or ignore.

    An anchor is positive if its best IoU with gt_boxes is >= fg_iou (assigned to the
    best box), background if it is < bg_iou and ignored in between. Anchors with IoU >=
    fg_iou to one of ignored_boxes (annotations removed by the instance filter) are
    ignored regardless of gt_boxes.
    """
    labels = np.full(len(grid), int(MatchLabel.BACKGROUND), dtype=int)
    if len(gt_boxes):
        ious = iou_matrix(grid.anchors, as_array(gt_boxes))
        best = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        labels = np.where(best_iou >= fg_iou, best, labels)
        labels = np.where((best_iou >= bg_iou) & (best_iou < fg_iou), int(MatchLabel.IOU_IGNORE), labels)
    if len(ignored_boxes):
        forced = iou_matrix(grid.anchors, as_array(ignored_boxes)).max(axis=1) >= fg_iou
        labels = np.where(forced, int(MatchLabel.IOU_IGNORE), labels)
    return labels


@dataclass(frozen=True)
class AnchorTargets:
    labels: np.ndarray
    # 0 for non positives, 1..K for the category of the matched box
    class_targets: np.ndarray
    box_targets: np.ndarray


def build_targets(grid: AnchorGrid, annotations: Sequence[InstanceAnnotation], category_index: Dict[int, int],
                  fg_iou: float = 0.5, bg_iou: float = 0.4) -> AnchorTargets:
    kept = [ann for ann in annotations if not ann.filtered_out]
    removed = [ann for ann in annotations if ann.filtered_out]
    labels = match_anchors(grid, [a.bbox for a in kept], [a.bbox for a in removed], fg_iou, bg_iou)
    class_targets = np.zeros(len(grid), dtype=int)
    box_targets = np.zeros((len(grid), 4), dtype=float)
    positive = labels >= 0
    if positive.any():
        matched = [kept[i] for i in labels[positive]]
        class_targets[positive] = [category_index[a.category_id] for a in matched]
        box_targets[positive] = encode_deltas(grid.anchors[positive], as_array([a.bbox for a in matched]))
    return AnchorTargets(labels=labels, class_targets=class_targets, box_targets=box_targets)


@dataclass(eq=False)
class DetectorParams:
    w_objectness: np.ndarray
    w_class: np.ndarray
    w_box: np.ndarray

    NAMES = ('w_objectness', 'w_class', 'w_box')

    @classmethod
    def initialize(cls, n_features: int, n_classes: int, seed: int, scale: float = 0.01) -> 'DetectorParams':
        """Seeded normal initialization; n_classes counts the background class."""
        rng = np.random.default_rng(seed)
        return cls(w_objectness=rng.normal(0, 1, n_features) * scale,
                   w_class=rng.normal(0, 1, (n_features, n_classes)) * scale,
                   w_box=rng.normal(0, 1, (n_features, 4)) * scale)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def copy(self) -> 'DetectorParams':
        return DetectorParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> 'DetectorParams':
        return DetectorParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def equals(self, other: 'DetectorParams') -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))


@dataclass(frozen=True)
class DetectorOutputs:
    objectness_logits: np.ndarray
    class_logits: np.ndarray
    box_deltas: np.ndarray

    @property
    def objectness(self) -> np.ndarray:
        return expit(self.objectness_logits)

    @property
    def class_probabilities(self) -> np.ndarray:
        return softmax(self.class_logits, axis=1)


@dataclass(frozen=True)
class OutputGradients:
    objectness_logits: np.ndarray
    class_logits: np.ndarray
    box_deltas: np.ndarray


def forward(params: DetectorParams, features: np.ndarray) -> DetectorOutputs:
    """
    Apply the linear heads to the (A, D) feature matrix of an image.

    Raises
    ------
    ValueError
        If the feature dimension does not match the parameters.
    """
    if features.ndim != 2 or features.shape[1] != len(params.w_objectness):
        raise ValueError(f'features of shape {features.shape} do not match {len(params.w_objectness)} weights')
    return DetectorOutputs(objectness_logits=features @ params.w_objectness,
                           class_logits=features @ params.w_class,
                           box_deltas=features @ params.w_box)


@dataclass(frozen=True)
class TrainingConfig:
    tau_i: float = 0.0
    learning_rate: float = 0.5
    iterations: int = 1500
    seed: int = 0
    sampler: SamplerConfig = SamplerConfig()
    background_ignore: bool = True
    apply_mask_loss_on_synthetic: bool = False
    lr_drop_steps: Tuple[int, ...] = ()
    lr_drop_factor: float = 0.1
    init_scale: float = 0.01
    image_size: int = 64
    anchor_stride: int = 16
    anchor_scales: Tuple[float, ...] = (16.0, 32.0)
    fg_iou: float = 0.5
    bg_iou: float = 0.4
    smooth_l1_beta: float = 1 / 9

    def __post_init__(self):
        if not 0 <= self.tau_i <= 1:
            raise ValueError(f'tau_i must be in [0, 1], got {self.tau_i}')
        if self.iterations < 0:
            raise ValueError(f'iterations must be >= 0, got {self.iterations}')
        if self.learning_rate <= 0:
            raise ValueError(f'learning_rate must be positive, got {self.learning_rate}')
        if not 0 <= self.bg_iou <= self.fg_iou <= 1:
            raise ValueError('anchor matching needs 0 <= bg_iou <= fg_iou <= 1')

    @classmethod
    def from_config(cls, conf: dict, seed: int = 0, background_ignore: bool = True,
                    p: Optional[float] = None) -> 'TrainingConfig':
        sampler = SamplerConfig.from_config(conf.get('sampler', {}), seed=seed)
        if p is not None:
            sampler = replace(sampler, p=p)
        anchors = conf.get('anchors', {})
        return cls(tau_i=float(conf.get('tau_i', 0.0)),
                   learning_rate=float(conf.get('learning_rate', 0.5)),
                   iterations=int(conf.get('iterations', 1500)),
                   seed=int(seed),
                   sampler=sampler,
                   background_ignore=background_ignore,
                   apply_mask_loss_on_synthetic=bool(conf.get('apply_mask_loss_on_synthetic', False)),
                   lr_drop_steps=tuple(int(s) for s in conf.get('lr_drop_steps') or ()),
                   lr_drop_factor=float(conf.get('lr_drop_factor', 0.1)),
                   init_scale=float(conf.get('init_scale', 0.01)),
                   image_size=int(conf.get('image_size', 64)),
                   anchor_stride=int(anchors.get('stride', 16)),
                   anchor_scales=tuple(float(s) for s in anchors.get('scales', (16, 32))),
                   fg_iou=float(anchors.get('fg_iou', 0.5)),
                   bg_iou=float(anchors.get('bg_iou', 0.4)))

    def learning_rate_at(self, step: int) -> float:
        n_drops = sum(step >= s for s in self.lr_drop_steps)
        return self.learning_rate * self.lr_drop_factor ** n_drops


@dataclass(frozen=True)
class LossBreakdown:
    objectness_loss: float
    classification_loss: float
    box_regression_loss: float
    mask_loss: float
    mask_loss_applied: bool
    # True for every background anchor excluded from at least one term
    per_anchor_mask: np.ndarray = field(compare=False)
    ignored_objectness: int
    ignored_head: int
    n_positive: int
    n_background: int

    @property
    def total(self) -> float:
        return self.objectness_loss + self.classification_loss + self.box_regression_loss + self.mask_loss

    @property
    def ignored_anchor_count(self) -> int:
        return int(self.per_anchor_mask.sum())


def _smooth_l1(diff: np.ndarray, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    small = np.abs(diff) < beta
    loss = np.where(small, 0.5 * diff ** 2 / beta, np.abs(diff) - 0.5 * beta)
    grad = np.where(small, diff / beta, np.sign(diff))
    return loss, grad


def assemble_loss(outputs: DetectorOutputs, targets: AnchorTargets, source: str,
                  cfg: TrainingConfig) -> Tuple[LossBreakdown, OutputGradients]:
    """
    Loss of one image and its gradient with respect to the detector outputs.

    - objectness: binary cross entropy over positives and included backgrounds,
      averaged over the contributing anchors
    - classification: softmax cross entropy over positives (target = category) and
      included backgrounds (target = background), averaged likewise
    - box regression: smooth L1 over positives, averaged over positives

    For synthetic images with background ignore enabled a background anchor is left out
    of the objectness term if its objectness exceeds tau_i, and out of the classification
    term if 1 - p(background) exceeds tau_i. The masks are constants of the loss, so the
    gradient of every left out output is exactly zero. Empty terms contribute 0.
    """
    if source not in ('real', 'synthetic'):
        raise ValueError(f'unknown source {source!r}')
    labels = targets.labels
    positive = labels >= 0
    background = labels == int(MatchLabel.BACKGROUND)

    ignore_backgrounds = source == 'synthetic' and cfg.background_ignore
    if ignore_backgrounds:
        excluded_obj = background & (outputs.objectness > cfg.tau_i)
        excluded_head = background & ((1 - outputs.class_probabilities[:, 0]) > cfg.tau_i)
    else:
        excluded_obj = np.zeros(len(labels), dtype=bool)
        excluded_head = np.zeros(len(labels), dtype=bool)

    # objectness
    obj_rows = positive | (background & ~excluded_obj)
    n_obj = int(obj_rows.sum())
    z = outputs.objectness_logits
    t = positive.astype(float)
    d_obj = np.zeros_like(z)
    obj_loss = 0.0
    if n_obj:
        obj_loss = float((np.logaddexp(0, z[obj_rows]) - t[obj_rows] * z[obj_rows]).sum() / n_obj)
        d_obj[obj_rows] = (expit(z[obj_rows]) - t[obj_rows]) / n_obj

    # classification
    cls_rows = positive | (background & ~excluded_head)
    n_cls = int(cls_rows.sum())
    logits = outputs.class_logits
    d_cls = np.zeros_like(logits)
    cls_loss = 0.0
    if n_cls:
        rows = np.flatnonzero(cls_rows)
        target = targets.class_targets[rows]
        cls_loss = float((logsumexp(logits[rows], axis=1) - logits[rows, target]).sum() / n_cls)
        grad = softmax(logits[rows], axis=1)
        grad[np.arange(len(rows)), target] -= 1
        d_cls[rows] = grad / n_cls

    # box regression
    n_pos = int(positive.sum())
    d_box = np.zeros_like(outputs.box_deltas)
    box_loss = 0.0
    if n_pos:
        loss, grad = _smooth_l1(outputs.box_deltas[positive] - targets.box_targets[positive], cfg.smooth_l1_beta)
        box_loss = float(loss.sum() / n_pos)
        d_box[positive] = grad / n_pos

    breakdown = LossBreakdown(objectness_loss=obj_loss, classification_loss=cls_loss,
                              box_regression_loss=box_loss,
                              mask_loss=0.0,
                              mask_loss_applied=source == 'real' or cfg.apply_mask_loss_on_synthetic,
                              per_anchor_mask=excluded_obj | excluded_head,
                              ignored_objectness=int(excluded_obj.sum()), ignored_head=int(excluded_head.sum()),
                              n_positive=n_pos, n_background=int(background.sum()))
    return breakdown, OutputGradients(objectness_logits=d_obj, class_logits=d_cls, box_deltas=d_box)


def parameter_gradients(features: np.ndarray, grads: OutputGradients) -> DetectorParams:
    return DetectorParams(w_objectness=features.T @ grads.objectness_logits,
                          w_class=features.T @ grads.class_logits,
                          w_box=features.T @ grads.box_deltas)


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    targets: AnchorTargets


def batch_loss(params: DetectorParams, examples: Sequence[Example], source: str,
               cfg: TrainingConfig) -> Tuple[float, DetectorParams, List[LossBreakdown]]:
    """Mean loss of a homogeneous batch and its gradient with respect to the parameters."""
    grad = params.zeros_like()
    total = 0.0
    breakdowns = []
    for example in examples:
        outputs = forward(params, example.features)
        breakdown, d_out = assemble_loss(outputs, example.targets, source, cfg)
        g = parameter_gradients(example.features, d_out)
        for name in DetectorParams.NAMES:
            getattr(grad, name)[...] += getattr(g, name) / len(examples)
        total += breakdown.total / len(examples)
        breakdowns.append(breakdown)
    return total, grad, breakdowns


@dataclass(eq=False)
class TrainState:
    params: DetectorParams
    category_ids: Tuple[int, ...]
    image_size: int
    anchor_stride: int
    anchor_scales: Tuple[float, ...]
    step: int = 0
    config_hash: Optional[str] = None
    sampler_state: Optional[dict] = None
    telemetry: List[dict] = field(default_factory=list, compare=False, repr=False)

    @property
    def grid(self) -> AnchorGrid:
        return build_anchors(self.image_size, self.anchor_stride, self.anchor_scales)

    def category_index(self) -> Dict[int, int]:
        return {cat_id: i + 1 for i, cat_id in enumerate(self.category_ids)}


def initial_state(category_ids: Sequence[int], cfg: TrainingConfig) -> TrainState:
    params = DetectorParams.initialize(feature_dim(len(cfg.anchor_scales)), len(category_ids) + 1,
                                       cfg.seed, cfg.init_scale)
    return TrainState(params=params, category_ids=tuple(category_ids), image_size=cfg.image_size,
                      anchor_stride=cfg.anchor_stride, anchor_scales=tuple(cfg.anchor_scales))


def prepare_examples(d: Dataset, grid: AnchorGrid, category_index: Dict[int, int],
                     cfg: TrainingConfig) -> Dict[int, Example]:
    """Features and anchor targets of every image of a dataset, keyed by image id."""
    per_image = d.annotations_by_image()
    examples = {}
    for record in d.images:
        if (record.width, record.height) != (grid.image_size, grid.image_size):
            raise ValueError(f'image {record.id} is {record.width}x{record.height}, '
                             f'the detector expects {grid.image_size}x{grid.image_size}')
        features = anchor_features(read_image(d, record), grid.anchors, grid.scale_index, len(grid.scales))
        targets = build_targets(grid, per_image[record.id], category_index, cfg.fg_iou, cfg.bg_iou)
        examples[record.id] = Example(features=features, targets=targets)
    return examples


def train(real: Optional[Dataset], synth: Optional[Dataset], cfg: TrainingConfig,
          config_hash: Optional[str] = None) -> TrainState:
    """
    Train the detector with SGD on the batch stream of a BatchSampler.

    Parameters
    ----------
    real : Dataset or None
        Real training images; may be None or empty only if cfg.sampler.p == 1.
    synth : Dataset or None
        Generated training images with filter flags; may be None if cfg.sampler.p == 0.
    cfg : TrainingConfig
    config_hash : str, optional
        Stored on the returned state.

    Returns
    -------
    TrainState
        Final parameters, the sampler snapshot and one telemetry record per step.

    Raises
    ------
    TrainingDivergedError
        If the loss of a step is not finite.
    """
    reference = real if real is not None else synth
    if reference is None:
        raise ValueError('training needs at least one dataset')
    if real is not None and synth is not None and \
            [c.id for c in real.categories] != [c.id for c in synth.categories]:
        raise ValueError('real and synthetic datasets must share their categories')

    state = initial_state([c.id for c in reference.categories], cfg)
    state.config_hash = config_hash
    grid = state.grid
    category_index = state.category_index()

    real_examples = prepare_examples(real, grid, category_index, cfg) if real is not None else {}
    synth_examples = prepare_examples(synth, grid, category_index, cfg) if synth is not None else {}
    sampler = BatchSampler(list(real_examples), list(synth_examples), cfg.sampler)
    pools = {'real': real_examples, 'synthetic': synth_examples}
    detector_logger.info(f'train on {len(real_examples)} real and {len(synth_examples)} synthetic images, '
                         f'p={cfg.sampler.p}, tau_i={cfg.tau_i}, background_ignore={cfg.background_ignore}, '
                         f'{cfg.iterations} iterations')

    params = state.params
    for step in range(cfg.iterations):
        batch = sampler.next_batch()
        loss, grad, breakdowns = batch_loss(params, [pools[batch.source][i] for i in batch.examples],
                                            batch.source, cfg)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        lr = cfg.learning_rate_at(step)
        for name in DetectorParams.NAMES:
            getattr(params, name)[...] -= lr * getattr(grad, name)
        state.telemetry.append({
            'step': step, 'source': batch.source, 'learning_rate': lr, 'total_loss': loss,
            'objectness_loss': float(np.mean([b.objectness_loss for b in breakdowns])),
            'classification_loss': float(np.mean([b.classification_loss for b in breakdowns])),
            'box_regression_loss': float(np.mean([b.box_regression_loss for b in breakdowns])),
            'mask_loss': float(np.mean([b.mask_loss for b in breakdowns])),
            'mask_loss_applied': all(b.mask_loss_applied for b in breakdowns),
            'ignored_anchor_count': int(sum(b.ignored_anchor_count for b in breakdowns)),
            'n_positive': int(sum(b.n_positive for b in breakdowns))})
        if step % 250 == 0:
            detector_logger.info(f'step {step}: {batch.source} batch, loss {loss:.4f}')

    state.step = cfg.iterations
    state.sampler_state = sampler.snapshot()
    if cfg.iterations:
        n_synth = sampler.counts['synthetic']
        detector_logger.info(f'finished training: {n_synth} synthetic and {sampler.counts["real"]} real batches, '
                             f'final loss {state.telemetry[-1]["total_loss"]:.4f}')
    return state


def predict(state: TrainState, image: np.ndarray, nms_iou: float = 0.5, score_floor: float = 0.05,
            max_detections: int = 100, image_id: int = 0) -> List[Detection]:
    """
    Detections of one image, sorted by descending score.

    The score of an anchor for category k is objectness * p(k). Candidates below
    score_floor are dropped, the rest is reduced by greedy NMS per category.
    """
    grid = state.grid
    features = anchor_features(image, grid.anchors, grid.scale_index, len(grid.scales))
    outputs = forward(state.params, features)
    scores = outputs.objectness[:, None] * outputs.class_probabilities[:, 1:]
    boxes = clip_boxes(decode_deltas(grid.anchors, outputs.box_deltas), image.shape[1], image.shape[0])
    valid = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)

    candidates = []
    for k, cat_id in enumerate(state.category_ids):
        rows = np.flatnonzero(valid & (scores[:, k] >= score_floor))
        if len(rows) == 0:
            continue
        for i in rows[greedy_nms(boxes[rows], scores[rows, k], nms_iou)]:
            candidates.append((float(scores[i, k]), cat_id, int(i)))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [Detection(image_id=image_id, category_id=cat_id, bbox=tuple(float(v) for v in boxes[i]),
                      score=min(max(score, 0.0), 1.0))
            for score, cat_id, i in candidates[:max_detections]]


def predict_dataset(state: TrainState, d: Dataset, nms_iou: float = 0.5, score_floor: float = 0.05,
                    max_detections: int = 100) -> List[Detection]:
    detections = []
    for record in d.images:
        detections.extend(predict(state, read_image(d, record), nms_iou, score_floor, max_detections,
                                  image_id=record.id))
    detector_logger.info(f'{len(detections)} detections on {len(d.images)} images')
    return detections


def save_state(state: TrainState, path: Union[str, Path]) -> None:
    """Checkpoint as json: named parameter arrays, anchor layout, config hash and sampler state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {'params': {k: v.tolist() for k, v in state.params.arrays().items()},
               'category_ids': list(state.category_ids),
               'image_size': state.image_size,
               'anchor_stride': state.anchor_stride,
               'anchor_scales': list(state.anchor_scales),
               'step': state.step,
               'config_hash': state.config_hash,
               'sampler_state': state.sampler_state}
    with open(path, 'w') as f:
        json.dump(payload, f)


def load_state(path: Union[str, Path]) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path) as f:
        payload = json.load(f)
    params = DetectorParams(**{k: np.asarray(v, dtype=float) for k, v in payload['params'].items()})
    return TrainState(params=params, category_ids=tuple(payload['category_ids']),
                      image_size=int(payload['image_size']), anchor_stride=int(payload['anchor_stride']),
                      anchor_scales=tuple(payload['anchor_scales']), step=int(payload['step']),
                      config_hash=payload.get('config_hash'), sampler_state=payload.get('sampler_state'))


def write_telemetry(state: TrainState, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(state.telemetry).to_json(path, orient='records', lines=True)
