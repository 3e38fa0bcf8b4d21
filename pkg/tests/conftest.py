import copy
from pathlib import Path

import pytest
import yaml

from synthdet.dataset.dataset_io import Category, Dataset, ImageRecord, InstanceAnnotation
from synthdet.dataset.toy_corpus import make_glyph_corpus

ROOT = Path(__file__).parents[1]

SMALL_TRAIN_COUNTS = {'apple': 3, 'bottle': 6, 'cup': 10}
SMALL_TEST_COUNTS = {'apple': 4, 'bottle': 4, 'cup': 4}


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False, help='run the desk experiments')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='desk experiment, use --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def base_config():
    with open(Path(ROOT, 'synthdet.yml')) as f:
        return yaml.safe_load(f)


@pytest.fixture(scope='session')
def small_corpus(tmp_path_factory):
    """A tiny glyph corpus: 12 train and 8 test images with three categories."""
    directory = tmp_path_factory.mktemp('corpus')
    train = make_glyph_corpus(directory, SMALL_TRAIN_COUNTS, 12, name='train', seed=3)
    test = make_glyph_corpus(directory, SMALL_TEST_COUNTS, 8, name='test', seed=4,
                             category_names=list(SMALL_TRAIN_COUNTS))
    return directory, train, test


@pytest.fixture
def small_config(base_config, small_corpus, tmp_path):
    """Pipeline config on the tiny corpus with a short training schedule."""
    directory, _, _ = small_corpus
    conf = copy.deepcopy(base_config)
    conf['info']['run_name'] = 'small'
    conf['data']['train_path'] = str(Path(directory, 'train.json'))
    conf['data']['test_path'] = str(Path(directory, 'test.json'))
    conf['data']['toy_corpus']['build'] = False
    conf['training']['iterations'] = 20
    conf['training']['lr_drop_steps'] = []
    conf['training']['sampler']['batch_size'] = 4
    conf['output']['output_directory'] = str(tmp_path)
    conf['output']['plot_results'] = False
    return conf


@pytest.fixture
def tiny_dataset():
    """Two 64x64 images with three boxes of two categories, no pixels on disk."""
    images = (ImageRecord(id=1, width=64, height=64, file_path='a.png'),
              ImageRecord(id=2, width=64, height=64, file_path='b.png'))
    annotations = (InstanceAnnotation(id=1, image_id=1, category_id=1, bbox=(2.0, 2.0, 14.0, 14.0)),
                   InstanceAnnotation(id=2, image_id=1, category_id=2, bbox=(20.0, 20.0, 30.0, 30.0)),
                   InstanceAnnotation(id=3, image_id=2, category_id=2, bbox=(0.0, 0.0, 16.0, 16.0)))
    categories = (Category(id=1, name='apple'), Category(id=2, name='zebra'))
    return Dataset(images=images, annotations=annotations, categories=categories)
