import pytest

from synthdet.dataset.dataset_io import InstanceAnnotation
from synthdet.generation.prompt_builder import box_prompt, build_prompts, image_prompt


def test_single_instance():
    assert image_prompt(['cat']) == 'a cat'


def test_several_instances_without_oxford_comma():
    assert image_prompt(['cat', 'dog', 'car']) == 'a cat, a dog and a car'
    assert image_prompt(['cat', 'dog']) == 'a cat and a dog'


def test_duplicates_are_kept():
    assert image_prompt(['cup', 'cup']) == 'a cup and a cup'


def test_article_is_configurable():
    assert image_prompt(['apple'], article='an') == 'an apple'


def test_box_prompt_normalises_lvis_names():
    assert box_prompt('Baseball_Bat') == 'baseball bat'


@pytest.mark.parametrize('bad', ['', '   '])
def test_box_prompt_rejects_empty(bad):
    with pytest.raises(ValueError):
        box_prompt(bad)


def test_image_prompt_rejects_empty():
    with pytest.raises(ValueError):
        image_prompt([])


def test_build_prompts_follow_annotation_order():
    anns = [InstanceAnnotation(id=5, image_id=1, category_id=2, bbox=(0, 0, 8, 8)),
            InstanceAnnotation(id=3, image_id=1, category_id=1, bbox=(10, 10, 8, 8))]
    prompts = build_prompts(anns, {1: 'cat', 2: 'dog'})
    assert prompts.image_prompt == 'a dog and a cat'
    assert prompts.box_prompts == ((5, 'dog'), (3, 'cat'))


def test_build_prompts_without_instances():
    prompts = build_prompts([], {1: 'cat'})
    assert prompts.image_prompt == ''
    assert prompts.box_prompts == ()
