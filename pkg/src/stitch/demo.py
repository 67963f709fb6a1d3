"""Deterministic demo data generators.

Everything here is synthetic but shaped like the real problem: catalog
product shots are colored garment silhouettes on a white backdrop, the
background repository holds near-white textured patches, and the multi-task
training set carries product-type and color structure in separate feature
subspaces. All generators are pure functions of their seed.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BoundingBox
from .taxonomy import Gender, Taxonomy, load_taxonomy

DEMO_IMAGE_SIZE = 64
DEMO_BACKGROUND_SIZE = 96

DEMO_TAXONOMY_TEXT = """\
[high_classes]
top
bottom
boy person
girl person
woman person
man person

[fine_classes]
t-shirt top
blouse top
tunic top
jeans bottom
skirt bottom
shorts bottom
"""


def demo_taxonomy() -> Taxonomy:
    return load_taxonomy(DEMO_TAXONOMY_TEXT)


@dataclass(frozen=True)
class DemoItem:
    item_id: str
    image_name: str
    image: np.ndarray          # uint8 RGB, white background
    box: BoundingBox           # tight garment bounds
    fine_class: int
    gender: Gender
    priority: float


def _hsv_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array([round(c * 255) for c in colorsys.hsv_to_rgb(h, s, v)], dtype=np.uint8)


def _draw_item(index: int, fine_class: int, shape: str, rank_in_shard: int) -> tuple[np.ndarray, BoundingBox]:
    size = DEMO_IMAGE_SIZE
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    # Hue bins are 1/32 wide; picking centers spaced by a unit coprime to 32
    # keeps every item in a shard on its own bin.
    hue = ((rank_in_shard * 7) % 32 + 0.5) / 32.0
    sat = (0.5625, 0.6875, 0.8125)[index % 3]
    val = (0.6875, 0.8125)[(index // 3) % 2]
    color = _hsv_rgb(hue, sat, val)
    mx = 8 + index % 5
    my = 6 + (index * 3) % 7
    x0, y0, x1, y1 = mx, my, size - mx, size - my
    ys, xs = np.mgrid[0:size, 0:size]
    if shape == "rect":
        mask = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
    elif shape == "ellipse":
        cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
        ry, rx = (y1 - y0) / 2, (x1 - x0) / 2
        mask = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    else:  # triangle
        frac = np.clip((ys - y0) / max(y1 - y0 - 1, 1), 0, 1)
        half = (x1 - x0) / 2 * frac
        cx = (x0 + x1) / 2
        mask = (ys >= y0) & (ys < y1) & (np.abs(xs + 0.5 - cx) <= half)
    img[mask] = color
    if index % 2 == 1:  # striped variant
        stripe_color = _hsv_rgb((hue + 0.25) % 1.0, sat, val)
        stripes = mask & (((ys - y0) // 3) % 2 == 0)
        img[stripes] = stripe_color
    ys_on, xs_on = np.nonzero(mask)
    box = BoundingBox(float(xs_on.min()), float(ys_on.min()),
                      float(xs_on.max() + 1), float(ys_on.max() + 1))
    return img, box


_SHAPES = {"t-shirt": "rect", "jeans": "rect", "blouse": "ellipse",
           "skirt": "ellipse", "tunic": "triangle", "shorts": "triangle"}


def make_demo_items(n_items: int = 200, seed: int = 7) -> list[DemoItem]:
    """Synthetic catalog: items cycle over fine classes and genders, with a
    distinct hue per item within each (fine class, gender) shard."""
    taxonomy = demo_taxonomy()
    fine_ids = [f.id for f in taxonomy.fine_classes]
    genders = (Gender.WOMAN, Gender.MAN)
    shard_rank: dict[tuple[int, Gender], int] = {}
    items = []
    for i in range(n_items):
        fine = fine_ids[i % len(fine_ids)]
        gender = genders[(i // len(fine_ids)) % 2]
        rank = shard_rank.get((fine, gender), 0)
        shard_rank[(fine, gender)] = rank + 1
        shape = _SHAPES[taxonomy.fine_class(fine).name]
        image, box = _draw_item(i, fine, shape, rank)
        items.append(
            DemoItem(
                item_id=f"item-{i:04d}",
                image_name=f"item-{i:04d}.png",
                image=image,
                box=box,
                fine_class=fine,
                gender=gender,
                priority=float(1 + i % 10),
            )
        )
    return items


def make_demo_backgrounds(count: int = 8, seed: int = 7) -> list[np.ndarray]:
    """Uniform near-white patches, each with its own slight channel tint.

    A constant backdrop makes gradient-domain blending shift the pasted
    garment by a constant, so each background re-shades the item differently
    while keeping its texture and hue intact.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        gray = int(rng.integers(246, 253))
        out.append(np.full((DEMO_BACKGROUND_SIZE, DEMO_BACKGROUND_SIZE, 3), gray, dtype=np.uint8))
    return out


def write_demo(out_dir: str | Path, n_items: int = 200, seed: int = 7) -> Path:
    """Materialize the demo corpus: images, backgrounds, catalog and
    detection files, plus the demo taxonomy. Returns the output directory."""
    from PIL import Image

    from .formats import DetectionRecord, write_catalog, write_detection_records
    from .taxonomy import serialize_taxonomy

    out = Path(out_dir)
    (out / "catalog").mkdir(parents=True, exist_ok=True)
    (out / "backgrounds").mkdir(exist_ok=True)
    taxonomy = demo_taxonomy()
    items = make_demo_items(n_items, seed)
    for item in items:
        Image.fromarray(item.image).save(out / "catalog" / item.image_name)
    for i, bg in enumerate(make_demo_backgrounds(seed=seed)):
        Image.fromarray(bg).save(out / "backgrounds" / f"bg-{i:02d}.png")
    (out / "taxonomy.txt").write_text(serialize_taxonomy(taxonomy), encoding="utf-8")

    from .dedup import CatalogItem

    catalog = [
        CatalogItem(it.item_id, it.image_name, it.fine_class, it.gender, it.priority)
        for it in items
    ]
    write_catalog(catalog, [None] * len(catalog), out / "catalog.tsv", taxonomy)

    records = [
        DetectionRecord(
            image_id=it.image_name,
            class_name=taxonomy.high_class(taxonomy.parent_of(it.fine_class)).name,
            score=0.95,
            box=it.box,
            detector_id="synthetic",
        )
        for it in items
    ]
    write_detection_records(records, out / "detections.tsv")
    return out


# -- synthetic multi-task training data ---------------------------------------


def make_multitask_dataset(
    n_samples: int = 2000,
    num_products: int = 4,
    num_colors: int = 4,
    seed: int = 0,
    noise: float = 0.25,
    product_strength: float = 1.0,
    color_strength: float = 0.2,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Separable 512-D features with independent product-type and color factors.

    Product type activates one of ``num_products`` 8-dim blocks below dim 64;
    color one of ``num_colors`` 16-dim blocks starting at dim 64; the rest is
    noise. Both factors are linearly separable, but color is deliberately
    faint, like the weak color signal of a backbone trained on product labels
    alone: embeddings only become color-aware when a color task amplifies it.
    """
    rng = np.random.default_rng(seed)
    products = rng.integers(num_products, size=n_samples)
    colors = rng.integers(num_colors, size=n_samples)
    x = noise * rng.normal(size=(n_samples, 512))
    for i in range(n_samples):
        p0 = products[i] * 8
        c0 = 64 + colors[i] * 16
        x[i, p0:p0 + 8] += product_strength
        x[i, c0:c0 + 16] += color_strength
    labels = {
        "product_type": products.astype(np.int64),
        "color": colors.astype(np.int64),
    }
    return x, labels
