"""Bounding-box arithmetic, per-class NMS, and multi-detector fusion.

All operations are pure functions over immutable values and are safe to call
concurrently. Boxes live in a continuous image coordinate frame with the
origin at the top-left corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .taxonomy import Gender, Taxonomy

#: Minimum intersection-over-apparel-area for a person box to determine gender.
GENDER_OVERLAP_THRESHOLD = 0.5


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamped(self, width: float, height: float) -> "BoundingBox":
        """Clip to [0,width] x [0,height]; raises if nothing remains."""
        return BoundingBox(
            max(0.0, min(self.x_min, width)),
            max(0.0, min(self.y_min, height)),
            max(0.0, min(self.x_max, width)),
            max(0.0, min(self.y_max, height)),
        )


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    detector_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0,1], got {self.score}")


@dataclass(frozen=True)
class DetectionSet:
    """All detections one detector produced for one image.

    Boxes are clamped to the image rectangle on construction; a box entirely
    outside the image is rejected.
    """

    image_id: str
    width: int
    height: int
    detections: tuple[Detection, ...]

    def __post_init__(self) -> None:
        clamped = tuple(
            replace(d, box=d.box.clamped(self.width, self.height)) for d in self.detections
        )
        object.__setattr__(self, "detections", clamped)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; symmetric, in [0,1]."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _sort_key(d: Detection):
    # Deterministic order: score desc, then x_min, y_min, detector id.
    return (-d.score, d.box.x_min, d.box.y_min, d.detector_id)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Detections are visited by descending score; one is kept iff its IoU with
    every already-kept detection of the same class is strictly below the
    threshold. Output is sorted by descending score. Ties on score break by
    x_min, then y_min, then detector id, so results are deterministic.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0,1), got {iou_threshold}")
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in sorted(dets, key=_sort_key):
        rivals = by_class.setdefault(d.class_id, [])
        if all(iou(d.box, k.box) < iou_threshold for k in rivals):
            rivals.append(d)
            kept.append(d)
    return kept


def fuse_ensemble(sets: list[DetectionSet], iou_threshold: float = 0.5) -> DetectionSet:
    """Merge several detectors' outputs for one image via NMS.

    All sets must agree on image id and dimensions. Surviving detections keep
    their original detector ids.
    """
    if not sets:
        raise ValueError("fuse_ensemble needs at least one detection set")
    first = sets[0]
    for s in sets[1:]:
        if (s.image_id, s.width, s.height) != (first.image_id, first.width, first.height):
            raise ValueError(
                f"mismatched detection sets: {s.image_id}/{s.width}x{s.height} vs "
                f"{first.image_id}/{first.width}x{first.height}"
            )
    merged = [d for s in sets for d in s.detections]
    return DetectionSet(
        first.image_id, first.width, first.height, tuple(nms(merged, iou_threshold))
    )


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Extract the pixel rectangle under a box, rounded outward to whole pixels.

    The box is clamped to the image bounds first; a box entirely outside the
    image raises ValueError. Returns a copy.
    """
    if image.ndim not in (2, 3) or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("image must be a non-empty 2-D or 3-D raster")
    h, w = image.shape[:2]
    x0 = max(0, math.floor(box.x_min))
    y0 = max(0, math.floor(box.y_min))
    x1 = min(w, math.ceil(box.x_max))
    y1 = min(h, math.ceil(box.y_max))
    if x0 >= x1 or y0 >= y1:
        raise ValueError(f"box {box} lies entirely outside the {w}x{h} image")
    return image[y0:y1, x0:x1].copy()


def assign_gender(
    apparel: Detection, persons: list[Detection], taxonomy: Taxonomy
) -> Gender:
    """Gender of the person box that best covers an apparel detection.

    Overlap is measured as intersection over the apparel box's own area
    (garments are small relative to person boxes, so IoU would be tiny).
    Returns UNKNOWN when no person box covers at least half the garment.
    Ties break toward the higher-scoring, then lexicographically earlier
    detector.
    """
    best: tuple[float, float, str] | None = None
    best_gender = Gender.UNKNOWN
    for p in persons:
        if not taxonomy.is_person(p.class_id):
            raise ValueError(f"detection of class {p.class_id} is not a person class")
        ratio = intersection_area(apparel.box, p.box) / apparel.box.area
        key = (-ratio, -p.score, p.detector_id)
        if ratio >= GENDER_OVERLAP_THRESHOLD and (best is None or key < best):
            best = key
            best_gender = taxonomy.gender_of(p.class_id)
    return best_gender
