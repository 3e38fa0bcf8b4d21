from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from synthdet.dataset.boxes import iou_matrix
from synthdet.dataset.dataset_io import InstanceAnnotation, read_image
from synthdet.training import toy_detector
from synthdet.training.batch_sampler import SamplerConfig
from synthdet.training.features import feature_dim
from synthdet.training.toy_detector import (AnchorTargets, DetectorParams, Example, MatchLabel, TrainingConfig,
                                            TrainingDivergedError, assemble_loss, batch_loss, build_anchors,
                                            build_targets, forward, initial_state, load_state, match_anchors,
                                            predict, save_state, train)

N_ANCHORS = 32
N_FEATURES = 6
N_CLASSES = 3


@pytest.fixture
def grid():
    return build_anchors(64, 16, (16, 32))


def _random_problem(seed=0, scale=1.0):
    """Random features, parameters and anchor targets with every label kind present."""
    rng = np.random.default_rng(seed)
    features = rng.normal(0, 1, (N_ANCHORS, N_FEATURES))
    params = DetectorParams.initialize(N_FEATURES, N_CLASSES, seed=seed + 1, scale=scale)
    labels = np.array([0, 1, 0, -2] + [-1] * (N_ANCHORS - 4))
    class_targets = np.where(labels >= 0, rng.integers(1, N_CLASSES, N_ANCHORS), 0)
    box_targets = np.where(labels[:, None] >= 0, rng.normal(0, 1, (N_ANCHORS, 4)), 0.0)
    return features, params, AnchorTargets(labels=labels, class_targets=class_targets, box_targets=box_targets)


def _train_config(**kwargs):
    defaults = dict(iterations=10, sampler=SamplerConfig(p=0.0, batch_size=4), lr_drop_steps=())
    defaults.update(kwargs)
    return TrainingConfig(**defaults)


def test_anchor_grid_layout(grid):
    assert len(grid) == N_ANCHORS
    np.testing.assert_allclose(grid.anchors[0], [0, 0, 16, 16])
    # the large anchor of the corner cell is clipped
    np.testing.assert_allclose(grid.anchors[1], [0, 0, 24, 24])
    np.testing.assert_allclose(grid.anchors[2], [16, 0, 16, 16])
    assert list(grid.scale_index[:4]) == [0, 1, 0, 1]
    assert np.all(grid.anchors[:, 0] >= 0) and np.all(grid.anchors[:, 0] + grid.anchors[:, 2] <= 64)


@pytest.mark.parametrize('size, stride, scales', [(64, 0, (16,)), (64, 128, (16,)), (64, 16, ()),
                                                  (64, 16, (16, -4))])
def test_anchor_grid_rejects_bad_layout(size, stride, scales):
    with pytest.raises(ValueError):
        build_anchors(size, stride, scales)


def test_match_positive_ignore_background(grid):
    labels = match_anchors(grid, [(0, 0, 16, 16)])
    assert labels[0] == 0
    # IoU 256 / 576 is between the thresholds
    assert labels[1] == int(MatchLabel.IOU_IGNORE)
    assert np.all(labels[2:][iou_matrix(grid.anchors[2:], np.array([[0, 0, 16, 16]]))[:, 0] < 0.4]
                  == int(MatchLabel.BACKGROUND))


def test_removed_annotation_region_is_ignored(grid):
    anns = [InstanceAnnotation(id=1, image_id=1, category_id=7, bbox=(0, 0, 16, 16)),
            InstanceAnnotation(id=2, image_id=1, category_id=7, bbox=(48, 48, 16, 16), filtered_out=True)]
    targets = build_targets(grid, anns, {7: 1})
    assert targets.labels[0] == 0 and targets.class_targets[0] == 1
    assert targets.labels[-2] == int(MatchLabel.IOU_IGNORE)
    assert (targets.labels >= 0).sum() == 1
    np.testing.assert_allclose(targets.box_targets[0], 0.0, atol=1e-12)


def test_zero_parameters_give_half_objectness():
    features, params, _ = _random_problem()
    outputs = forward(params.zeros_like(), features)
    np.testing.assert_allclose(outputs.objectness, 0.5)
    np.testing.assert_allclose(outputs.class_probabilities, 1 / N_CLASSES)


def test_forward_checks_feature_dimension():
    _, params, _ = _random_problem()
    with pytest.raises(ValueError):
        forward(params, np.zeros((N_ANCHORS, N_FEATURES + 1)))


@pytest.mark.parametrize('source, tau_i', [('real', 0.0), ('synthetic', 0.0)])
def test_gradient_matches_finite_differences(source, tau_i):
    features, params, targets = _random_problem(seed=3, scale=0.3)
    examples = [Example(features=features, targets=targets)]
    cfg = TrainingConfig(tau_i=tau_i)
    _, grad, _ = batch_loss(params, examples, source, cfg)

    eps = 1e-6
    for name in DetectorParams.NAMES:
        array = getattr(params, name)
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            original = array[idx]
            array[idx] = original + eps
            up, _, _ = batch_loss(params, examples, source, cfg)
            array[idx] = original - eps
            down, _, _ = batch_loss(params, examples, source, cfg)
            array[idx] = original
            numeric[idx] = (up - down) / (2 * eps)
        np.testing.assert_allclose(getattr(grad, name), numeric, atol=1e-6, rtol=1e-4)


@pytest.mark.parametrize('tau_i', [0.0, 0.3, 0.5])
def test_excluded_anchors_have_zero_gradient(tau_i):
    features, params, targets = _random_problem(seed=4, scale=1.0)
    outputs = forward(params, features)
    breakdown, grads = assemble_loss(outputs, targets, 'synthetic', TrainingConfig(tau_i=tau_i))

    background = targets.labels == int(MatchLabel.BACKGROUND)
    excluded_obj = background & (expit(outputs.objectness_logits) > tau_i)
    excluded_head = background & (1 - outputs.class_probabilities[:, 0] > tau_i)
    assert excluded_obj.any()
    assert breakdown.ignored_objectness == excluded_obj.sum()
    assert breakdown.ignored_head == excluded_head.sum()
    assert np.array_equal(breakdown.per_anchor_mask, excluded_obj | excluded_head)
    assert np.all(grads.objectness_logits[excluded_obj] == 0)
    assert np.all(grads.class_logits[excluded_head] == 0)
    assert np.all(grads.box_deltas[targets.labels < 0] == 0)
    # ignore anchors never contribute
    assert np.all(grads.objectness_logits[targets.labels == int(MatchLabel.IOU_IGNORE)] == 0)

    # check the loss itself at anchors that stay excluded under the perturbation
    eps = 1e-4
    cfg = TrainingConfig(tau_i=tau_i)
    checked = np.flatnonzero(excluded_obj & (expit(outputs.objectness_logits - eps) > tau_i))
    for i in checked[:5]:
        losses = []
        for sign in (1, -1):
            logits = outputs.objectness_logits.copy()
            logits[i] += sign * eps
            losses.append(assemble_loss(replace(outputs, objectness_logits=logits), targets, 'synthetic',
                                        cfg)[0].total)
        assert abs(losses[0] - losses[1]) / (2 * eps) < 1e-6
    assert breakdown.mask_loss == 0.0


def test_tau_zero_drops_every_background():
    features, params, targets = _random_problem(seed=5)
    breakdown, grads = assemble_loss(forward(params, features), targets, 'synthetic', TrainingConfig(tau_i=0.0))
    background = targets.labels == int(MatchLabel.BACKGROUND)
    assert breakdown.ignored_objectness == background.sum()
    assert np.all(grads.objectness_logits[background] == 0)


def test_real_images_keep_their_backgrounds():
    features, params, targets = _random_problem(seed=6)
    breakdown, grads = assemble_loss(forward(params, features), targets, 'real', TrainingConfig(tau_i=0.0))
    assert breakdown.ignored_anchor_count == 0
    assert np.all(grads.objectness_logits[targets.labels == int(MatchLabel.BACKGROUND)] != 0)


def test_background_ignore_switch():
    features, params, targets = _random_problem(seed=7)
    outputs = forward(params, features)
    on, _ = assemble_loss(outputs, targets, 'synthetic', TrainingConfig(background_ignore=True))
    off, _ = assemble_loss(outputs, targets, 'synthetic', TrainingConfig(background_ignore=False))
    real, _ = assemble_loss(outputs, targets, 'real', TrainingConfig())
    assert on.ignored_anchor_count > 0
    assert off.ignored_anchor_count == 0
    assert off.total == pytest.approx(real.total)


def test_mask_loss_is_gated_by_source():
    features, params, targets = _random_problem()
    outputs = forward(params, features)
    assert assemble_loss(outputs, targets, 'real', TrainingConfig())[0].mask_loss_applied
    assert not assemble_loss(outputs, targets, 'synthetic', TrainingConfig())[0].mask_loss_applied
    cfg = TrainingConfig(apply_mask_loss_on_synthetic=True)
    assert assemble_loss(outputs, targets, 'synthetic', cfg)[0].mask_loss_applied
    assert assemble_loss(outputs, targets, 'synthetic', cfg)[0].mask_loss == 0.0


def test_unknown_source():
    features, params, targets = _random_problem()
    with pytest.raises(ValueError):
        assemble_loss(forward(params, features), targets, 'web', TrainingConfig())


def test_image_without_positives_has_no_box_loss():
    features, params, targets = _random_problem()
    empty = AnchorTargets(labels=np.full(N_ANCHORS, -1), class_targets=np.zeros(N_ANCHORS, dtype=int),
                          box_targets=np.zeros((N_ANCHORS, 4)))
    breakdown, grads = assemble_loss(forward(params, features), empty, 'real', TrainingConfig())
    assert breakdown.box_regression_loss == 0.0 and breakdown.n_positive == 0
    assert np.all(grads.box_deltas == 0)


@pytest.mark.parametrize('kwargs', [{'tau_i': 1.2}, {'iterations': -1}, {'learning_rate': 0.0},
                                    {'fg_iou': 0.3, 'bg_iou': 0.4}])
def test_training_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainingConfig(**kwargs)


def test_learning_rate_schedule():
    cfg = TrainingConfig(learning_rate=0.5, lr_drop_steps=(10, 20), lr_drop_factor=0.1)
    assert cfg.learning_rate_at(9) == 0.5
    assert cfg.learning_rate_at(10) == pytest.approx(0.05)
    assert cfg.learning_rate_at(25) == pytest.approx(0.005)


def test_zero_iterations_returns_initialization(small_corpus):
    _, train_set, _ = small_corpus
    cfg = _train_config(iterations=0)
    state = train(train_set, None, cfg)
    assert state.step == 0 and state.telemetry == []
    assert state.params.equals(initial_state([c.id for c in train_set.categories], cfg).params)


def test_p_zero_ignores_the_synthetic_pool(small_corpus):
    _, train_set, _ = small_corpus
    synth = replace(train_set, source='synthetic')
    cfg = _train_config(iterations=8)
    with_pool = train(train_set, synth, cfg)
    without_pool = train(train_set, None, cfg)
    assert with_pool.params.equals(without_pool.params)
    assert {t['source'] for t in with_pool.telemetry} == {'real'}


def test_training_is_deterministic_and_records_telemetry(small_corpus):
    _, train_set, _ = small_corpus
    synth = replace(train_set, source='synthetic')
    cfg = _train_config(iterations=12, sampler=SamplerConfig(p=0.5, batch_size=3, seed=2))
    first, second = train(train_set, synth, cfg, config_hash='abc'), train(train_set, synth, cfg)
    assert first.params.equals(second.params)
    assert len(first.telemetry) == 12
    assert {'step', 'source', 'learning_rate', 'total_loss', 'objectness_loss', 'classification_loss',
            'box_regression_loss', 'mask_loss', 'mask_loss_applied', 'ignored_anchor_count',
            'n_positive'} <= set(first.telemetry[0])
    for record in first.telemetry:
        assert record['mask_loss_applied'] == (record['source'] == 'real')
    assert first.config_hash == 'abc' and first.step == 12


def test_training_reduces_the_loss(small_corpus):
    _, train_set, _ = small_corpus
    state = train(train_set, None, _train_config(iterations=80))
    losses = [t['total_loss'] for t in state.telemetry]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_divergence_is_reported(small_corpus, monkeypatch):
    _, train_set, _ = small_corpus

    def diverging(params, examples, source, cfg):
        return float('nan'), params.zeros_like(), []

    monkeypatch.setattr(toy_detector, 'batch_loss', diverging)
    with pytest.raises(TrainingDivergedError) as err:
        train(train_set, None, _train_config(iterations=3))
    assert err.value.step == 0


def test_image_size_mismatch(small_corpus):
    _, train_set, _ = small_corpus
    with pytest.raises(ValueError, match='expects 32x32'):
        train(train_set, None, _train_config(image_size=32))


def test_predictions_are_sorted_and_suppressed(small_corpus):
    _, train_set, _ = small_corpus
    state = initial_state([c.id for c in train_set.categories], TrainingConfig(init_scale=0.5, seed=1))
    image = read_image(train_set, train_set.images[0])
    dets = predict(state, image, nms_iou=0.5, score_floor=0.0, max_detections=10, image_id=4)
    assert 0 < len(dets) <= 10
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert all(0 <= s <= 1 for s in scores) and {d.image_id for d in dets} == {4}
    for cat_id in {d.category_id for d in dets}:
        boxes = np.array([d.bbox for d in dets if d.category_id == cat_id])
        ious = iou_matrix(boxes, boxes)
        assert np.all(ious[~np.eye(len(boxes), dtype=bool)] <= 0.5)


def test_state_checkpoint(small_corpus, tmp_path):
    _, train_set, _ = small_corpus
    state = train(train_set, None, _train_config(iterations=5), config_hash='f00')
    save_state(state, tmp_path / 'detector.json')
    loaded = load_state(tmp_path / 'detector.json')
    assert loaded.params.equals(state.params)
    assert loaded.category_ids == state.category_ids
    assert loaded.config_hash == 'f00' and loaded.step == 5
    assert loaded.sampler_state == state.sampler_state
    assert loaded.params.w_class.shape == (feature_dim(2), len(train_set.categories) + 1)
    with pytest.raises(FileNotFoundError):
        load_state(tmp_path / 'missing.json')
