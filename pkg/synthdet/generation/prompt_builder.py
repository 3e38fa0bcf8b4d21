"""
Box level and image level text prompts for the grounded inpainting generator.
"""
from dataclasses import dataclass
import logging
from typing import Dict, List, Sequence, Tuple

from ..dataset.dataset_io import InstanceAnnotation

prompt_logger = logging.getLogger('synthdet.prompt_builder')


@dataclass(frozen=True)
class PromptSet:
    image_prompt: str
    box_prompts: Tuple[Tuple[int, str], ...]


def box_prompt(category_name: str) -> str:
    """
    The box level prompt is the category name itself, lowercased and with the underscores
    of LVIS style names replaced by spaces.

    Raises
    ------
    ValueError
        If the name is empty.
    """
    if not category_name or not category_name.strip():
        raise ValueError('category name must not be empty')
    return category_name.strip().lower().replace('_', ' ')


def image_prompt(category_names: Sequence[str], article: str = 'a') -> str:
    """
    Concatenate one "a <name>" phrase per instance.

    One instance gives "a cat", several give "a cat, a dog and a car" (no Oxford comma).
    Duplicates are kept since the phrase is built per instance. The article is configurable
    but defaults to the literal "a" for every name.

    Raises
    ------
    ValueError
        If the list is empty.
    """
    if len(category_names) == 0:
        raise ValueError('image prompt needs at least one category name')
    phrases = [f'{article} {box_prompt(name)}' for name in category_names]
    if len(phrases) == 1:
        return phrases[0]
    return ', '.join(phrases[:-1]) + ' and ' + phrases[-1]


def build_prompts(annotations: List[InstanceAnnotation], category_names: Dict[int, str],
                  article: str = 'a') -> PromptSet:
    """Prompts for all annotations of one image, box prompts in annotation order."""
    names = [category_names[ann.category_id] for ann in annotations]
    return PromptSet(image_prompt=image_prompt(names, article=article) if names else '',
                     box_prompts=tuple((ann.id, box_prompt(name)) for ann, name in zip(annotations, names)))
