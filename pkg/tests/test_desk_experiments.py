"""
Desk experiments on glyph corpora: instance filtering with a detector trained on a balanced corpus and
the direction level comparison of training variants on the long-tailed corpus.

These train the toy detector for the full schedule and take minutes; run them with
pytest --run-slow.
"""
import copy

import numpy as np
import pytest

from synthdet.dataset.dataset_io import assign_frequency_buckets, copy_buckets
from synthdet.dataset.toy_corpus import DEFAULT_TEST_COUNTS, DEFAULT_TRAIN_COUNTS, make_glyph_corpus
from synthdet.evaluation.evaluator import evaluate
from synthdet.filtering.detector_filter import DetectorFilterConfig, removal_rates, run_filter, train_filter_detector
from synthdet.generation.generation_client import MockGenConfig, MockGenerator, generate_synthetic_dataset
from synthdet.synthdet import run_pipeline
from synthdet.training.toy_detector import TrainingConfig, predict_dataset

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def long_tail_corpus(tmp_path_factory):
    directory = tmp_path_factory.mktemp('long_tail')
    names = list(DEFAULT_TRAIN_COUNTS)
    train = make_glyph_corpus(directory, DEFAULT_TRAIN_COUNTS, 200, name='train', seed=1234, category_names=names)
    test = make_glyph_corpus(directory, DEFAULT_TEST_COUNTS, 60, name='test', seed=1235, category_names=names)
    train = assign_frequency_buckets(train)
    return directory, train, copy_buckets(test, train)


@pytest.fixture(scope='module')
def balanced_corpus(tmp_path_factory):
    directory = tmp_path_factory.mktemp('balanced')
    counts = {name: 80 for name in DEFAULT_TRAIN_COUNTS}
    train = make_glyph_corpus(directory, counts, 200, name='train', seed=2234)
    test = make_glyph_corpus(directory, DEFAULT_TEST_COUNTS, 60, name='test', seed=2235, category_names=list(counts))
    train = assign_frequency_buckets(train)
    return train, copy_buckets(test, train)


def test_filter_detector_removes_corrupted_instances(balanced_corpus, tmp_path):
    train, test = balanced_corpus
    cfg = TrainingConfig(iterations=3000, lr_drop_steps=(2500,))
    detector = train_filter_detector(train, cfg)
    assert evaluate(predict_dataset(detector, test), test).ap50 >= 0.9

    backend = MockGenerator(MockGenConfig(corruption_rate=0.3))
    synth = generate_synthetic_dataset(train, copies=1, base_seed=0, backend=backend, output_dir=tmp_path)
    _, report = run_filter(synth, detector, DetectorFilterConfig(tau_s=0.2, tau_iou=0.3), score_floor=0.01)
    rates = removal_rates(report)
    assert rates['corrupted_removed'] >= 0.9
    assert rates['clean_removed'] <= 0.1


def _variant(conf, **stages):
    conf = copy.deepcopy(conf)
    conf['stages'].update(stages)
    return conf


def test_full_pipeline_beats_naive_mix_and_real_only(base_config, long_tail_corpus, tmp_path):
    directory, _, _ = long_tail_corpus
    conf = copy.deepcopy(base_config)
    conf['data']['train_path'] = str(directory / 'train.json')
    conf['data']['test_path'] = str(directory / 'test.json')
    conf['output']['output_directory'] = str(tmp_path)
    conf['output']['plot_results'] = False

    variants = {'real_only': _variant(conf, use_synthetic=False),
                'naive_mix': _variant(conf, use_sampling=False, use_image_filter=False, use_detector_filter=False,
                                      use_bg_ignore=False),
                'full': _variant(conf)}
    ap = {}
    buckets = {'rare': {}, 'common': {}, 'frequent': {}}
    for name, variant in variants.items():
        runs = []
        for seed in (0, 1, 2):
            run_conf = copy.deepcopy(variant)
            run_conf['seed'] = seed
            run_conf['info']['run_name'] = f'{name}_{seed}'
            runs.append(run_pipeline(run_conf).eval_result)
        ap[name] = float(np.median([r.ap for r in runs]))
        for bucket, values in buckets.items():
            values[name] = float(np.median([getattr(r, f'ap_{bucket}') for r in runs]))

    assert ap['full'] > ap['naive_mix']
    assert ap['full'] > ap['real_only']
    gains = {bucket: values['full'] - values['real_only'] for bucket, values in buckets.items()}
    assert gains['rare'] == max(gains.values())
