"""
Builder of the long-tailed glyph corpus used for the desk experiments.

Each real image is a gray textured background with a few glyphs placed on the anchor
lattice of the toy detector. The number of images a category appears in is designed by
the caller, which gives full control over the rare/common/frequent split.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset_io import Category, Dataset, ImageRecord, InstanceAnnotation, save_dataset, write_image
from ..generation.glyphs import background_texture, default_palette, render_glyph, to_uint8

corpus_logger = logging.getLogger('synthdet.toy_corpus')

DEFAULT_TRAIN_COUNTS = {'apple': 6, 'bottle': 9, 'cup': 40, 'dog': 70, 'kite': 120, 'zebra': 150}
DEFAULT_TEST_COUNTS = {'apple': 20, 'bottle': 20, 'cup': 20, 'dog': 20, 'kite': 20, 'zebra': 20}


def _overlaps(box: Tuple[float, float, float, float], others: List[Tuple[float, float, float, float]],
              margin: float) -> bool:
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        if x - margin < ox + ow and ox < x + w + margin and y - margin < oy + oh and oy < y + h + margin:
            return True
    return False


def place_box(rng: np.random.Generator, image_size: int, occupied: List[Tuple[float, float, float, float]],
              stride: int = 16, margin: float = 4.0, large_probability: float = 0.5,
              ) -> Optional[Tuple[float, float, float, float]]:
    """
    Find a free box on the anchor lattice.

    Small boxes (13-16 px) are centered on a lattice cell, large boxes (26-32 px) on an
    inner lattice cell so that they match the large anchors of the toy detector. Returns
    None if no candidate keeps the margin to the occupied boxes.

    Parameters
    ----------
    rng : np.random.Generator
        Source of all randomness.
    image_size : int
        Side of the square image in pixels.
    occupied : list of boxes
        Boxes already placed on the image.
    stride : int, optional
        Lattice stride; small glyphs have the size of one cell. The default is 16.
    margin : float, optional
        Minimal free space between two boxes in pixels. The default is 4.
    large_probability : float, optional
        Probability to try a large box first. The default is 0.5.
    """
    n_cells = image_size // stride
    small_centers = [stride * i + stride / 2 for i in range(n_cells)]
    large_centers = small_centers[1:-1]

    kinds = ['large', 'small'] if rng.random() < large_probability else ['small']
    for kind in kinds:
        centers = large_centers if kind == 'large' else small_centers
        if not centers:
            continue
        candidates = [(cx, cy) for cy in centers for cx in centers]
        for idx in rng.permutation(len(candidates)):
            cx, cy = candidates[idx]
            if kind == 'large':
                side = int(rng.integers(26, 2 * stride + 1))
                jitter = rng.integers(-2, 3, size=2)
            else:
                side = int(rng.integers(13, stride + 1))
                jitter = rng.integers(-1, 2, size=2)
            x = float(np.clip(round(cx - side / 2) + jitter[0], 0, image_size - side))
            y = float(np.clip(round(cy - side / 2) + jitter[1], 0, image_size - side))
            box = (x, y, float(side), float(side))
            if not _overlaps(box, occupied, margin):
                return box
    return None


def make_glyph_corpus(output_dir: Path,
                      category_image_counts: Dict[str, int],
                      n_images: int,
                      name: str = 'train',
                      image_size: int = 64,
                      max_glyphs_per_image: int = 3,
                      seed: int = 0,
                      category_names: Optional[Sequence[str]] = None,
                      ) -> Dataset:
    """
    Render a real glyph corpus with designed per-category image counts and save it.

    Parameters
    ----------
    output_dir : Path
        The json is written to output_dir/name.json, the images to output_dir/name/.
    category_image_counts : dict
        Number of distinct images each category should appear in.
    n_images : int
        Number of images of the corpus; images without an assigned category stay empty.
    name : str, optional
        Split name. The default is 'train'.
    image_size : int, optional
        Side of the square images. The default is 64.
    max_glyphs_per_image : int, optional
        Upper bound of glyphs on one image. The default is 3.
    seed : int, optional
        Seed of the corpus. The default is 0.
    category_names : sequence of str, optional
        Category order (defines ids and palette); defaults to the keys of category_image_counts.

    Returns
    -------
    Dataset
        The saved real dataset with image_root set to output_dir.
    """
    category_names = list(category_names or category_image_counts.keys())
    for cat_name, count in category_image_counts.items():
        if count > n_images:
            raise ValueError(f'category {cat_name} requests {count} images but the corpus has {n_images}')
    palette = default_palette(category_names)
    rng = np.random.default_rng(seed)

    # decide which image shows which category
    assigned: List[List[str]] = [[] for _ in range(n_images)]
    for cat_name in category_names:
        count = category_image_counts.get(cat_name, 0)
        order = np.argsort([len(a) + rng.random() for a in assigned], kind='stable')
        for idx in order[:count]:
            assigned[idx].append(cat_name)

    images, annotations = [], []
    dropped = 0
    cat_ids = {cat_name: i + 1 for i, cat_name in enumerate(category_names)}
    for image_id in range(1, n_images + 1):
        canvas = background_texture(rng, image_size, image_size)
        occupied = []
        for cat_name in list(assigned[image_id - 1])[:max_glyphs_per_image]:
            box = place_box(rng, image_size, occupied)
            if box is None:
                dropped += 1
                continue
            occupied.append(box)
            render_glyph(canvas, box, palette[cat_name], rng)
            annotations.append(InstanceAnnotation(id=len(annotations) + 1, image_id=image_id,
                                                  category_id=cat_ids[cat_name], bbox=box))
        dropped += max(len(assigned[image_id - 1]) - max_glyphs_per_image, 0)
        file_path = f'{name}/{image_id:06d}.png'
        write_image(to_uint8(canvas), Path(output_dir, file_path))
        images.append(ImageRecord(id=image_id, width=image_size, height=image_size,
                                  file_path=file_path, source='real'))
    if dropped:
        corpus_logger.warning(f'{dropped} glyphs of split {name} did not fit on their image')

    d = Dataset(images=tuple(images), annotations=tuple(annotations),
                categories=tuple(Category(id=cat_ids[n], name=n) for n in category_names),
                source='real', image_root=Path(output_dir))
    save_dataset(d, Path(output_dir, f'{name}.json'))
    corpus_logger.info(f'glyph corpus {name}: {n_images} images, {len(annotations)} instances')
    return d
