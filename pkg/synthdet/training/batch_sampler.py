"""
Batch sampling from a real and a synthetic image pool.

Every batch is homogeneous: it is synthetic with probability p and real otherwise. Each
pool is traversed by its own shuffled epoch cursor, so the order in which real images
are seen does not depend on p.
"""
from dataclasses import dataclass
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

sampler_logger = logging.getLogger('synthdet.batch_sampler')

SOURCE_STREAM = 0
CURSOR_STREAMS = {'real': 1, 'synthetic': 2}


@dataclass(frozen=True)
class SamplerConfig:
    p: float = 0.2
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError(f'sampling probability p must be in [0, 1], got {self.p}')
        if self.batch_size < 1:
            raise ValueError(f'batch_size must be positive, got {self.batch_size}')

    @classmethod
    def from_config(cls, conf: dict, seed: int = 0) -> 'SamplerConfig':
        return cls(p=float(conf.get('p', 0.2)), batch_size=int(conf.get('batch_size', 8)), seed=int(seed))


@dataclass(frozen=True)
class Batch:
    examples: Tuple[int, ...]
    source: str


class EpochCursor:
    """Draws pool elements without replacement and reshuffles when the pool is exhausted."""

    def __init__(self, pool: Sequence[int], rng: np.random.Generator):
        self.pool = list(pool)
        self.rng = rng
        self.order: List[int] = []
        self.position = 0
        self.epoch = -1

    def _reshuffle(self):
        self.order = [int(i) for i in self.rng.permutation(len(self.pool))]
        self.position = 0
        self.epoch += 1

    def take(self, n: int) -> List[int]:
        taken = []
        while len(taken) < n:
            if self.epoch < 0 or self.position == len(self.order):
                self._reshuffle()
            take = min(n - len(taken), len(self.order) - self.position)
            taken.extend(self.pool[i] for i in self.order[self.position:self.position + take])
            self.position += take
        return taken

    def snapshot(self) -> dict:
        return {'order': list(self.order), 'position': self.position, 'epoch': self.epoch,
                'rng': self.rng.bit_generator.state}

    def restore(self, state: dict) -> None:
        self.order = list(state['order'])
        self.position = int(state['position'])
        self.epoch = int(state['epoch'])
        self.rng.bit_generator.state = state['rng']


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


class BatchSampler:
    """
    Interleave homogeneous real and synthetic batches.

    The Bernoulli draw of the batch source and each pool cursor use independent random
    streams derived from the seed. With p=0 the sequence of real batches is therefore
    identical to the one of a sampler that has no synthetic pool at all.

    Parameters
    ----------
    real_pool : sequence of int
        Image ids of the real pool; may be empty only if p=1.
    synth_pool : sequence of int
        Image ids of the synthetic pool; may be empty only if p=0.
    cfg : SamplerConfig
    """

    def __init__(self, real_pool: Sequence[int], synth_pool: Sequence[int], cfg: SamplerConfig):
        if cfg.p > 0 and len(synth_pool) == 0:
            raise ValueError(f'p={cfg.p} requires a non-empty synthetic pool')
        if cfg.p < 1 and len(real_pool) == 0:
            raise ValueError(f'p={cfg.p} requires a non-empty real pool')
        self.cfg = cfg
        self.source_rng = _stream_rng(cfg.seed, SOURCE_STREAM)
        self.cursors: Dict[str, EpochCursor] = {
            source: EpochCursor(pool, _stream_rng(cfg.seed, CURSOR_STREAMS[source]))
            for source, pool in (('real', real_pool), ('synthetic', synth_pool))}
        self.counts = {'real': 0, 'synthetic': 0}

    def next_batch(self) -> Batch:
        source = 'synthetic' if self.source_rng.random() < self.cfg.p else 'real'
        self.counts[source] += 1
        return Batch(examples=tuple(self.cursors[source].take(self.cfg.batch_size)), source=source)

    def snapshot(self) -> dict:
        """JSON serializable state, enough to continue the exact batch sequence."""
        return {'source_rng': self.source_rng.bit_generator.state,
                'cursors': {name: cursor.snapshot() for name, cursor in self.cursors.items()},
                'counts': dict(self.counts)}

    def restore(self, state: dict) -> None:
        self.source_rng.bit_generator.state = state['source_rng']
        for name, cursor_state in state['cursors'].items():
            self.cursors[name].restore(cursor_state)
        self.counts = dict(state['counts'])