import threading

import numpy as np
import pytest
import requests

from synthdet.dataset.dataset_io import read_image
from synthdet.generation import generation_client as gc
from synthdet.generation.generation_client import (BoxRequest, GenerationError, GenerationRequest,
                                                   GenerationResult, InpaintingServiceClient, MockGenConfig,
                                                   MockGenerator, dataset_palette, derive_seed, encode_image,
                                                   generate_synthetic_dataset, inpaint, inpaint_many,
                                                   mock_inpaint)
from synthdet.generation.glyphs import default_palette, identify_glyph

NAMES = ['apple', 'bottle', 'cup']


def _request(seed=7, boxes=((4, 4, 20, 20), (36, 36, 24, 24)), names=('apple', 'cup')):
    image = np.full((64, 64, 3), 128, dtype=np.uint8)
    return GenerationRequest(image=image, seed=seed, image_prompt='a apple and a cup',
                             boxes=tuple(BoxRequest(box=b, category_name=n, box_prompt=n)
                                         for b, n in zip(boxes, names)))


class FakeResponse:
    def __init__(self, status_code, payload=None):
        self.status_code = status_code
        self._payload = payload

    def json(self):
        if self._payload is None:
            raise ValueError('no json')
        return self._payload


class FakeSession:
    """Replays a list of responses or exceptions for successive POSTs."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.calls = 0

    def post(self, url, json=None, timeout=None):
        self.calls += 1
        answer = self.answers.pop(0)
        if isinstance(answer, Exception):
            raise answer
        return answer


@pytest.fixture
def no_sleep(monkeypatch):
    delays = []
    monkeypatch.setattr(gc.time, 'sleep', delays.append)
    return delays


def test_mock_is_deterministic():
    cfg = MockGenConfig(corruption_rate=0.5, hallucination_rate=0.5)
    first, second = mock_inpaint(_request(), cfg), mock_inpaint(_request(), cfg)
    assert np.array_equal(first.image, second.image)
    assert first.per_box_metadata == second.per_box_metadata
    assert first.hallucinations == second.hallucinations
    assert first.image.shape == (64, 64, 3) and first.image.dtype == np.uint8


def test_mock_keeps_pixels_outside_boxes():
    result = mock_inpaint(_request(), MockGenConfig(corruption_rate=0.0, hallucination_rate=0.0))
    assert np.all(result.image[30:34, :] == 128)


def test_clean_boxes_show_their_category():
    palette = default_palette(NAMES)
    cfg = MockGenConfig(corruption_rate=0.0, hallucination_rate=0.0, glyph_palette=palette)
    req = _request()
    result = mock_inpaint(req, cfg)
    assert all(not m.corrupted for m in result.per_box_metadata)
    for b in req.boxes:
        assert identify_glyph(result.image, b.box, palette) == b.category_name


@pytest.mark.parametrize('kind', ['wrong_category', 'blank', 'misplaced'])
def test_corruption_is_visible(kind):
    palette = default_palette(NAMES)
    cfg = MockGenConfig(corruption_rate=1.0, hallucination_rate=0.0, corruption_kinds=(kind,),
                        glyph_palette=palette)
    req = _request()
    result = mock_inpaint(req, cfg)
    for b, meta in zip(req.boxes, result.per_box_metadata):
        assert meta.corrupted and meta.corruption_kind == kind
        seen = identify_glyph(result.image, b.box, palette)
        assert seen == meta.rendered_category
        assert seen != b.category_name


def test_corruption_rate_is_respected():
    cfg = MockGenConfig(corruption_rate=0.2, hallucination_rate=0.0)
    boxes = ((0, 0, 16, 16), (32, 0, 16, 16), (0, 32, 16, 16), (32, 32, 16, 16))
    names = ('apple', 'bottle', 'cup', 'apple')
    corrupted = [m.corrupted for seed in range(2500)
                 for m in mock_inpaint(_request(seed=seed, boxes=boxes, names=names), cfg).per_box_metadata]
    assert len(corrupted) == 10000
    assert 0.188 <= np.mean(corrupted) <= 0.212


def test_hallucination_adds_an_unannotated_glyph():
    palette = default_palette(NAMES)
    cfg = MockGenConfig(corruption_rate=0.0, hallucination_rate=1.0, glyph_palette=palette)
    result = mock_inpaint(_request(), cfg)
    assert len(result.hallucinations) == 1
    box, name = result.hallucinations[0]
    assert identify_glyph(result.image, box, palette) == name


def test_mock_rejects_tiny_box():
    with pytest.raises(GenerationError, match='too small'):
        mock_inpaint(_request(boxes=((4, 4, 3, 10),), names=('apple',)), MockGenConfig())


@pytest.mark.parametrize('kwargs', [{'corruption_rate': 1.5}, {'hallucination_rate': -0.1},
                                    {'corruption_kinds': ('melted',)}, {'corruption_kinds': ()}])
def test_mock_config_validation(kwargs):
    with pytest.raises(ValueError):
        MockGenConfig(**kwargs)


def test_request_without_boxes_returns_input():
    req = GenerationRequest(image=np.zeros((8, 8, 3), dtype=np.uint8), boxes=(), image_prompt='', seed=1)
    result = inpaint(req, MockGenerator(MockGenConfig()))
    assert np.array_equal(result.image, req.image)
    assert result.image is not req.image


def test_derive_seed_separates_copies():
    assert derive_seed(0, 3, 1) == derive_seed(0, 3, 1)
    seeds = {derive_seed(0, image_id, copy) for image_id in range(20) for copy in range(3)}
    assert len(seeds) == 60


def test_service_client_decodes_answer():
    req = _request()
    answer = np.full_like(req.image, 40)
    session = FakeSession([FakeResponse(200, {'image_b64': encode_image(answer), 'seed': req.seed})])
    result = InpaintingServiceClient('http://gen', session=session).inpaint(req)
    assert np.array_equal(result.image, answer)
    assert result.per_box_metadata is None


def test_service_client_retries_server_errors(no_sleep):
    req = _request()
    session = FakeSession([requests.ConnectionError('down'), FakeResponse(503),
                           FakeResponse(200, {'image_b64': encode_image(req.image)})])
    client = InpaintingServiceClient('http://gen', max_retries=3, backoff_seconds=0.5, session=session)
    client.inpaint(req)
    assert session.calls == 3
    assert no_sleep == [0.5, 1.0]


def test_service_client_gives_up(no_sleep):
    session = FakeSession([FakeResponse(502)] * 3)
    client = InpaintingServiceClient('http://gen', max_retries=2, session=session)
    with pytest.raises(GenerationError) as err:
        client.inpaint(_request())
    assert err.value.attempts == 3
    assert err.value.last_status == 502
    assert err.value.retryable


def test_service_client_does_not_retry_client_errors(no_sleep):
    session = FakeSession([FakeResponse(422)])
    with pytest.raises(GenerationError) as err:
        InpaintingServiceClient('http://gen', session=session).inpaint(_request())
    assert session.calls == 1
    assert err.value.last_status == 422
    assert not err.value.retryable


@pytest.mark.parametrize('answer', [FakeResponse(200), FakeResponse(200, {'seed': 1}),
                                    FakeResponse(200, {'image_b64': 'not an image'})])
def test_service_client_malformed_answer(answer):
    with pytest.raises(GenerationError, match='malformed'):
        InpaintingServiceClient('http://gen', session=FakeSession([answer])).inpaint(_request())


def test_service_client_rejects_resized_image():
    answer = encode_image(np.zeros((32, 32, 3), dtype=np.uint8))
    session = FakeSession([FakeResponse(200, {'image_b64': answer})])
    with pytest.raises(GenerationError, match='image size'):
        InpaintingServiceClient('http://gen', session=session).inpaint(_request())


def test_generate_synthetic_dataset(small_corpus, tmp_path):
    _, train, _ = small_corpus
    backend = MockGenerator(MockGenConfig(corruption_rate=0.5))
    synth = generate_synthetic_dataset(train, copies=2, base_seed=0, backend=backend, output_dir=tmp_path)
    assert synth.source == 'synthetic'
    assert len(synth.images) == 2 * len(train.images)
    assert len(synth.annotations) == 2 * len(train.annotations)

    real_boxes = {image_id: sorted(a.bbox for a in anns) for image_id, anns in train.annotations_by_image().items()}
    per_image = synth.annotations_by_image()
    for img in synth.images:
        assert img.source_image_id in real_boxes
        assert sorted(a.bbox for a in per_image[img.id]) == real_boxes[img.source_image_id]
        n_corrupt = sum(a.corruption is not None for a in per_image[img.id])
        assert img.corruption_density == pytest.approx(n_corrupt / max(len(per_image[img.id]), 1))

    assert read_image(synth, synth.images[0]).shape == (64, 64, 3)

    again = generate_synthetic_dataset(train, copies=2, base_seed=0, backend=backend, output_dir=tmp_path / 'b')
    assert [img.generation_seed for img in again.images] == [img.generation_seed for img in synth.images]


def test_generate_needs_a_copy(small_corpus, tmp_path):
    _, train, _ = small_corpus
    with pytest.raises(ValueError):
        generate_synthetic_dataset(train, copies=0, base_seed=0, backend=MockGenerator(MockGenConfig()),
                                   output_dir=tmp_path)


def test_mock_without_palette_draws_with_the_dataset_palette(small_corpus, tmp_path):
    _, train, _ = small_corpus
    backend = MockGenerator(MockGenConfig(corruption_rate=0.0, hallucination_rate=0.0))
    synth = generate_synthetic_dataset(train, copies=1, base_seed=3, backend=backend, output_dir=tmp_path)
    palette = dataset_palette(train)
    assert palette == default_palette(NAMES)
    names = synth.category_names()
    per_image = synth.annotations_by_image()
    for record in synth.images:
        image = read_image(synth, record)
        for ann in per_image[record.id]:
            assert identify_glyph(image, ann.bbox, palette) == names[ann.category_id]


def test_mock_config_palette_follows_category_order():
    cfg = MockGenConfig.from_config({'corruption_rate': 0.1}, category_names=['zebra', 'apple'])
    assert cfg.glyph_palette == default_palette(['zebra', 'apple'])
    assert MockGenConfig.from_config({}).glyph_palette is None


class BarrierBackend:
    """Lets requests pass only in groups of max_in_flight running at the same time."""

    max_in_flight = 3

    def __init__(self):
        self.barrier = threading.Barrier(self.max_in_flight, timeout=10)
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0

    def inpaint(self, req):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        self.barrier.wait()
        with self.lock:
            self.active -= 1
        return GenerationResult(image=np.full_like(req.image, req.seed), seed=req.seed)


def test_inpaint_many_bounds_requests_in_flight():
    backend = BarrierBackend()
    results = inpaint_many([_request(seed=s) for s in range(12)], backend, max_in_flight=3)
    assert [r.seed for r in results] == list(range(12))
    assert [int(r.image[0, 0, 0]) for r in results] == list(range(12))
    assert backend.peak == 3


def test_inpaint_many_serial():
    results = inpaint_many([_request(seed=s) for s in (5, 1)], MockGenerator(MockGenConfig()))
    assert [r.seed for r in results] == [5, 1]
    with pytest.raises(ValueError):
        inpaint_many([_request()], MockGenerator(MockGenConfig()), max_in_flight=0)


class EchoSession:
    """Answers every POST with the image it was sent."""

    def __init__(self):
        self.lock = threading.Lock()
        self.calls = 0

    def post(self, url, json=None, timeout=None):
        with self.lock:
            self.calls += 1
        return FakeResponse(200, {'image_b64': json['image_b64'], 'seed': json['seed']})


def test_generate_with_service_client_keeps_image_order(small_corpus, tmp_path):
    _, train, _ = small_corpus
    session = EchoSession()
    client = InpaintingServiceClient('http://gen', max_in_flight=3, session=session)
    synth = generate_synthetic_dataset(train, copies=1, base_seed=0, backend=client, output_dir=tmp_path)
    assert session.calls == sum(1 for anns in train.annotations_by_image().values() if anns)
    real = {img.id: img for img in train.images}
    for record in synth.images:
        assert record.generation_seed == derive_seed(0, record.source_image_id, 0)
        assert np.array_equal(read_image(synth, record), read_image(train, real[record.source_image_id]))
        assert record.corruption_density is None
