"""End-to-end query execution.

For each detected apparel box: crop the patch, extract its search embedding,
classify it into the detected class's fine-grained children, search the ANN
shard of each top-k fine class (restricted by the wearer's gender), and merge
everything into one distance-sorted result list.

All inputs (shards, models, taxonomy) are immutable at query time, so any
number of queries may run concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .features import baseline_featurize
from .geometry import Detection, DetectionSet, assign_gender, crop, fuse_ensemble
from .index import ShardKey, ShardManager
from .model import MultiTaskModel, extract_embedding, forward, softmax
from .taxonomy import Gender, Taxonomy


@dataclass(frozen=True)
class QueryConfig:
    k_classes: int = 3        # fine classes tried per detection
    k_results: int = 20       # hits pulled from each shard
    final_n: int = 10         # merged list length
    ef_search: int = 100

    def __post_init__(self) -> None:
        if min(self.k_classes, self.k_results, self.final_n, self.ef_search) < 1:
            raise ValueError("all query parameters must be >= 1")
        if self.final_n > self.k_classes * self.k_results:
            raise ValueError("final_n cannot exceed k_classes * k_results")


@dataclass(frozen=True)
class QueryResult:
    rank: int
    item_id: str
    fine_class: int
    distance: float
    source_shard: ShardKey


@dataclass(frozen=True)
class DetectorSource:
    """Where detections come from: a precomputed file or a registered plugin."""

    kind: str  # "precomputed" | "plugin"
    value: str

    def __post_init__(self) -> None:
        if self.kind not in ("precomputed", "plugin"):
            raise ValueError(f"unknown detector source kind {self.kind!r}")


_DETECTOR_PLUGINS: dict[str, Callable] = {}


def register_detector(name: str, fn: Callable) -> None:
    """Register a callable (image, image_id, taxonomy) -> list[DetectionSet]."""
    _DETECTOR_PLUGINS[name] = fn


def resolve_detections(
    source: DetectorSource,
    image: np.ndarray,
    image_id: str,
    taxonomy: Taxonomy,
) -> list[DetectionSet]:
    if source.kind == "plugin":
        fn = _DETECTOR_PLUGINS.get(source.value)
        if fn is None:
            raise ValueError(f"no detector plugin named {source.value!r}")
        return fn(image, image_id, taxonomy)
    from .formats import detections_for_image, read_detection_records

    records = read_detection_records(source.value)
    h, w = image.shape[:2]
    return detections_for_image(records, image_id, w, h, taxonomy)


def classify_topk(
    model: MultiTaskModel, patch: np.ndarray, fine_ids: list[int], k: int
) -> list[tuple[int, float]]:
    """Top-k fine classes for a patch, as (fine id, probability) descending.

    The model's product_type head must be aligned with ``fine_ids`` (the
    taxonomy children of the detected class, ascending by id). Probability
    ties break toward the lower class id. k is clamped to the class count.
    """
    return _topk_from_feature(model, baseline_featurize(patch), fine_ids, k)


def _topk_from_feature(
    model: MultiTaskModel, feature: np.ndarray, fine_ids: list[int], k: int
) -> list[tuple[int, float]]:
    _, logits = forward(model, feature)
    z = logits["product_type"]
    if len(z) != len(fine_ids):
        raise ValueError(
            f"product_type head has {len(z)} classes but the taxonomy expects {len(fine_ids)}"
        )
    if k > len(fine_ids):
        warnings.warn(f"k={k} exceeds {len(fine_ids)} fine classes; clamping", stacklevel=2)
        k = len(fine_ids)
    probs = softmax(z)
    ranked = sorted(zip(fine_ids, probs), key=lambda t: (-t[1], t[0]))
    return [(fid, float(p)) for fid, p in ranked[:k]]


def query(
    image: np.ndarray,
    box: Detection,
    manager: ShardManager,
    model: MultiTaskModel,
    cfg: QueryConfig,
    taxonomy: Taxonomy,
    gender: Gender = Gender.UNKNOWN,
) -> list[QueryResult]:
    """Retrieve catalog items for one apparel detection.

    The crop is embedded once; its top-k fine classes select which shards to
    search (both adult genders when the wearer's gender is unknown). Shard
    hits are merged, sorted by distance with item-id tie-breaks, and cut to
    final_n. Returns an empty list with a warning when no selected shard
    exists.
    """
    if taxonomy.is_person(box.class_id):
        raise ValueError("cannot run retrieval for a person detection")
    patch = crop(image, box.box)
    feature = baseline_featurize(patch)
    embedding = extract_embedding(model, feature).base
    fine_ids = taxonomy.fine_classes_of(box.class_id)
    top_classes = _topk_from_feature(model, feature, fine_ids, cfg.k_classes)
    genders = (gender,) if gender is not Gender.UNKNOWN else (Gender.MAN, Gender.WOMAN)
    merged: list[tuple[float, str, int, ShardKey]] = []
    searched = 0
    for fine_id, _ in top_classes:
        for g in genders:
            key = ShardKey(fine_id, g)
            if manager.get(key) is None:
                continue
            searched += 1
            for item_id, dist in manager.search(key, embedding, cfg.k_results, cfg.ef_search):
                merged.append((dist, item_id, fine_id, key))
    if searched == 0:
        warnings.warn(
            f"no shard available for any of the top-{cfg.k_classes} classes "
            f"{[c for c, _ in top_classes]}",
            stacklevel=2,
        )
        return []
    merged.sort(key=lambda t: (t[0], t[1]))
    return [
        QueryResult(rank=r, item_id=item, fine_class=fid, distance=float(d), source_shard=key)
        for r, (d, item, fid, key) in enumerate(merged[:cfg.final_n], start=1)
    ]


def process_image(
    image: np.ndarray,
    detector: DetectorSource | list[DetectionSet],
    manager: ShardManager,
    models: dict[int, MultiTaskModel],
    cfg: QueryConfig,
    taxonomy: Taxonomy,
    image_id: str = "",
    fuse_threshold: float = 0.5,
    min_score: float = 0.0,
) -> dict[Detection, list[QueryResult]]:
    """Run the full per-image flow: fuse detectors, assign genders, query.

    ``models`` maps each apparel high-level class id to its fine-grained
    classifier. Person detections steer gender assignment but produce no
    retrieval entries. ``min_score`` drops weaker detections before fusion
    (raise it for precision, lower it for recall). Returns an ordered map
    from each fused apparel detection to its results.
    """
    if isinstance(detector, DetectorSource):
        sets = resolve_detections(detector, image, image_id, taxonomy)
    else:
        sets = list(detector)
    if min_score > 0.0:
        sets = [
            DetectionSet(s.image_id, s.width, s.height,
                         tuple(d for d in s.detections if d.score >= min_score))
            for s in sets
        ]
    if not sets:
        return {}
    fused = fuse_ensemble(sets, fuse_threshold)
    persons = [d for d in fused.detections if taxonomy.is_person(d.class_id)]
    out: dict[Detection, list[QueryResult]] = {}
    for det in fused.detections:
        if taxonomy.is_person(det.class_id):
            continue
        model = models.get(det.class_id)
        if model is None:
            raise ValueError(
                f"no model for class {taxonomy.high_class(det.class_id).name!r}"
            )
        gender = assign_gender(det, persons, taxonomy)
        out[det] = query(image, det, manager, model, cfg, taxonomy, gender=gender)
    return out
