import json

import numpy as np
import pytest

from synthdet.training.batch_sampler import BatchSampler, EpochCursor, SamplerConfig

REAL = list(range(1, 21))
SYNTH = list(range(101, 141))


def _draw(sampler, n):
    return [sampler.next_batch() for _ in range(n)]


def test_p_zero_only_real():
    sampler = BatchSampler(REAL, SYNTH, SamplerConfig(p=0.0, batch_size=4))
    assert {b.source for b in _draw(sampler, 500)} == {'real'}


def test_p_one_only_synthetic():
    sampler = BatchSampler(REAL, SYNTH, SamplerConfig(p=1.0, batch_size=4))
    assert {b.source for b in _draw(sampler, 500)} == {'synthetic'}
    assert sampler.counts == {'real': 0, 'synthetic': 500}


def test_synthetic_share_follows_p():
    sampler = BatchSampler(REAL, SYNTH, SamplerConfig(p=0.2, batch_size=2, seed=5))
    batches = _draw(sampler, 10000)
    share = np.mean([b.source == 'synthetic' for b in batches])
    assert 0.188 <= share <= 0.212


def test_batches_are_homogeneous():
    sampler = BatchSampler(REAL, SYNTH, SamplerConfig(p=0.5, batch_size=8))
    for batch in _draw(sampler, 200):
        pool = set(REAL) if batch.source == 'real' else set(SYNTH)
        assert len(batch.examples) == 8
        assert set(batch.examples) <= pool


def test_epoch_visits_every_image_once():
    cursor = EpochCursor(REAL, np.random.default_rng(0))
    first_epoch = cursor.take(5) + cursor.take(5) + cursor.take(5) + cursor.take(5)
    assert sorted(first_epoch) == REAL
    second_epoch = cursor.take(20)
    assert sorted(second_epoch) == REAL
    assert cursor.epoch == 1


def test_batch_larger_than_pool_wraps():
    cursor = EpochCursor([1, 2, 3], np.random.default_rng(0))
    taken = cursor.take(7)
    assert len(taken) == 7
    assert sorted(taken[:3]) == [1, 2, 3] and sorted(taken[3:6]) == [1, 2, 3]


def test_real_sequence_does_not_depend_on_p():
    mixed = BatchSampler(REAL, SYNTH, SamplerConfig(p=0.0, batch_size=4, seed=3))
    real_only = BatchSampler(REAL, [], SamplerConfig(p=0.0, batch_size=4, seed=3))
    assert _draw(mixed, 50) == _draw(real_only, 50)


def test_same_seed_same_sequence():
    cfg = SamplerConfig(p=0.3, batch_size=4, seed=9)
    assert _draw(BatchSampler(REAL, SYNTH, cfg), 100) == _draw(BatchSampler(REAL, SYNTH, cfg), 100)


def test_snapshot_restore_continues_sequence():
    cfg = SamplerConfig(p=0.3, batch_size=3, seed=1)
    sampler = BatchSampler(REAL, SYNTH, cfg)
    _draw(sampler, 17)
    # the state survives a json round through the train state file
    state = json.loads(json.dumps(sampler.snapshot()))
    expected = _draw(sampler, 30)

    resumed = BatchSampler(REAL, SYNTH, cfg)
    resumed.restore(state)
    assert _draw(resumed, 30) == expected
    assert resumed.counts == sampler.counts


@pytest.mark.parametrize('real, synth, p', [(REAL, [], 0.2), ([], SYNTH, 0.5), ([], SYNTH, 0.0)])
def test_empty_pool_rejected(real, synth, p):
    with pytest.raises(ValueError):
        BatchSampler(real, synth, SamplerConfig(p=p))


def test_empty_real_pool_allowed_with_p_one():
    sampler = BatchSampler([], SYNTH, SamplerConfig(p=1.0))
    assert sampler.next_batch().source == 'synthetic'


@pytest.mark.parametrize('kwargs', [{'p': -0.1}, {'p': 1.1}, {'batch_size': 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SamplerConfig(**kwargs)


def test_config_from_yaml_section():
    cfg = SamplerConfig.from_config({'p': 0.4, 'batch_size': 16}, seed=2)
    assert cfg == SamplerConfig(p=0.4, batch_size=16, seed=2)
