"""Line-based text formats shared by the CLI tools.

Every format is UTF-8, tab-separated, one record per line; ``#`` starts a
comment and blank lines are skipped. Class and gender fields use names, not
ids, so files stay readable and survive taxonomy reordering.

    detections:   image_id  class  score  x_min  y_min  x_max  y_max  detector_id
    ground truth: image_id  class  x_min  y_min  x_max  y_max
    catalog:      item_id  image_name  fine_class  gender  priority  [embedding_row]
    training:     feature_ref  task:label  [task:label ...]
    votes:        query_id  rater_id  choice
    results:      image_id  class  x_min  y_min  x_max  y_max  rank  item_id  distance  fine_class
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dedup import CatalogItem
from .evaluation import AbChoice, AbVote, GroundTruthBox, ScoredBox
from .geometry import BoundingBox, Detection, DetectionSet
from .pipeline import QueryResult
from .taxonomy import Gender, Taxonomy


class LineFormatError(ValueError):
    """A record line did not parse; message carries file and line number."""


def _rows(source: str | Path) -> list[tuple[int, list[str], str]]:
    path = Path(source)
    text = path.read_text(encoding="utf-8")
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        rows.append((lineno, line.split("\t"), str(path)))
    return rows


def _fail(path: str, lineno: int, message: str):
    raise LineFormatError(f"{path}:{lineno}: {message}")


def _parse_float(path: str, lineno: int, token: str, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        _fail(path, lineno, f"bad {what} {token!r}")


# -- detections -----------------------------------------------------------


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_name: str
    score: float
    box: BoundingBox
    detector_id: str


def read_detection_records(source: str | Path) -> list[DetectionRecord]:
    records = []
    for lineno, fields, path in _rows(source):
        if len(fields) != 8:
            _fail(path, lineno, f"expected 8 fields, got {len(fields)}")
        score = _parse_float(path, lineno, fields[2], "score")
        coords = [_parse_float(path, lineno, f, "coordinate") for f in fields[3:7]]
        try:
            box = BoundingBox(*coords)
            records.append(DetectionRecord(fields[0], fields[1], score, box, fields[7]))
        except ValueError as e:
            _fail(path, lineno, str(e))
    return records


def write_detection_records(records: list[DetectionRecord], path: str | Path) -> None:
    lines = [
        f"{r.image_id}\t{r.class_name}\t{r.score:.6g}\t{r.box.x_min:.6g}\t{r.box.y_min:.6g}"
        f"\t{r.box.x_max:.6g}\t{r.box.y_max:.6g}\t{r.detector_id}\n"
        for r in records
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def detections_for_image(
    records: list[DetectionRecord],
    image_id: str,
    width: int,
    height: int,
    taxonomy: Taxonomy,
) -> list[DetectionSet]:
    """One DetectionSet per detector id, suitable for ensemble fusion."""
    by_detector: dict[str, list[Detection]] = {}
    for r in records:
        if r.image_id != image_id:
            continue
        det = Detection(
            box=r.box,
            class_id=taxonomy.high_class(r.class_name).id,
            score=r.score,
            detector_id=r.detector_id,
        )
        by_detector.setdefault(r.detector_id, []).append(det)
    return [
        DetectionSet(image_id, width, height, tuple(by_detector[d]))
        for d in sorted(by_detector)
    ]


def to_scored_boxes(records: list[DetectionRecord], taxonomy: Taxonomy) -> list[ScoredBox]:
    return [
        ScoredBox(r.image_id, taxonomy.high_class(r.class_name).id, r.score, r.box)
        for r in records
    ]


# -- ground truth -----------------------------------------------------------


def read_ground_truth(source: str | Path, taxonomy: Taxonomy) -> list[GroundTruthBox]:
    boxes = []
    for lineno, fields, path in _rows(source):
        if len(fields) != 6:
            _fail(path, lineno, f"expected 6 fields, got {len(fields)}")
        coords = [_parse_float(path, lineno, f, "coordinate") for f in fields[2:6]]
        try:
            boxes.append(
                GroundTruthBox(fields[0], taxonomy.high_class(fields[1]).id,
                               BoundingBox(*coords))
            )
        except ValueError as e:
            _fail(path, lineno, str(e))
    return boxes


# -- catalog -----------------------------------------------------------------


def read_catalog(
    source: str | Path, taxonomy: Taxonomy
) -> tuple[list[CatalogItem], list[int | None]]:
    """Catalog items (without embeddings) plus each line's embedding row.

    A missing embedding_row field means "use the line's position".
    """
    items: list[CatalogItem] = []
    rows: list[int | None] = []
    seen: set[str] = set()
    for lineno, fields, path in _rows(source):
        if len(fields) not in (5, 6):
            _fail(path, lineno, f"expected 5 or 6 fields, got {len(fields)}")
        if fields[0] in seen:
            _fail(path, lineno, f"duplicate item id {fields[0]!r}")
        seen.add(fields[0])
        try:
            fine = taxonomy.fine_class(fields[2]).id
            gender = Gender.from_name(fields[3])
        except ValueError as e:
            _fail(path, lineno, str(e))
        priority = _parse_float(path, lineno, fields[4], "priority")
        row = None
        if len(fields) == 6 and fields[5]:
            try:
                row = int(fields[5])
            except ValueError:
                _fail(path, lineno, f"bad embedding row {fields[5]!r}")
        items.append(CatalogItem(fields[0], fields[1], fine, gender, priority))
        rows.append(row)
    return items, rows


def write_catalog(items: list[CatalogItem], rows: list[int | None], path: str | Path,
                  taxonomy: Taxonomy) -> None:
    lines = []
    for item, row in zip(items, rows):
        base = (
            f"{item.item_id}\t{item.image_name}\t{taxonomy.fine_class(item.fine_class).name}"
            f"\t{item.gender.value}\t{item.priority:.6g}"
        )
        lines.append(base + (f"\t{row}\n" if row is not None else "\n"))
    Path(path).write_text("".join(lines), encoding="utf-8")


def attach_embeddings(
    items: list[CatalogItem],
    rows: list[int | None],
    ids: list[str],
    matrix: np.ndarray,
) -> list[CatalogItem]:
    """Bind each catalog item to its embedding row, checking the id sidecar."""
    out = []
    for position, (item, row) in enumerate(zip(items, rows)):
        r = position if row is None else row
        if not 0 <= r < matrix.shape[0]:
            raise ValueError(f"item {item.item_id!r}: embedding row {r} out of range")
        if ids[r] != item.item_id:
            raise ValueError(
                f"embedding row {r} belongs to {ids[r]!r}, not {item.item_id!r}"
            )
        out.append(
            CatalogItem(item.item_id, item.image_name, item.fine_class,
                        item.gender, item.priority, embedding=matrix[r].astype(np.float64))
        )
    return out


# -- training lines ------------------------------------------------------------


def read_training_lines(source: str | Path) -> list[tuple[str, dict[str, int]]]:
    """Feature references plus task:label maps.

    The reference is either an integer row into a feature file or an image
    path; callers decide which. Labels are non-negative integers.
    """
    out = []
    for lineno, fields, path in _rows(source):
        if len(fields) < 2:
            _fail(path, lineno, "expected a feature ref and at least one task:label")
        labels: dict[str, int] = {}
        for token in fields[1:]:
            task, sep, value = token.partition(":")
            if not sep or not task:
                _fail(path, lineno, f"bad task:label token {token!r}")
            try:
                label = int(value)
            except ValueError:
                _fail(path, lineno, f"bad label in {token!r}")
            if label < 0:
                _fail(path, lineno, f"negative label in {token!r}")
            if task in labels:
                _fail(path, lineno, f"task {task!r} labeled twice")
            labels[task] = label
        out.append((fields[0], labels))
    return out


# -- retrieval evaluation inputs -------------------------------------------------


def read_query_features(source: str | Path) -> list[tuple[int, Gender, str]]:
    """Lines of ``feature_row  gender  attribute_value``."""
    out = []
    for lineno, fields, path in _rows(source):
        if len(fields) != 3:
            _fail(path, lineno, f"expected 3 fields, got {len(fields)}")
        try:
            row = int(fields[0])
        except ValueError:
            _fail(path, lineno, f"bad feature row {fields[0]!r}")
        try:
            gender = Gender.from_name(fields[1])
        except ValueError as e:
            _fail(path, lineno, str(e))
        out.append((row, gender, fields[2]))
    return out


def read_attributes(source: str | Path) -> dict[str, str]:
    """Lines of ``item_id  attribute_value``."""
    out: dict[str, str] = {}
    for lineno, fields, path in _rows(source):
        if len(fields) != 2:
            _fail(path, lineno, f"expected 2 fields, got {len(fields)}")
        if fields[0] in out:
            _fail(path, lineno, f"duplicate attribute for item {fields[0]!r}")
        out[fields[0]] = fields[1]
    return out


# -- votes ----------------------------------------------------------------------


def read_votes(source: str | Path) -> list[AbVote]:
    votes = []
    for lineno, fields, path in _rows(source):
        if len(fields) != 3:
            _fail(path, lineno, f"expected 3 fields, got {len(fields)}")
        try:
            choice = AbChoice(fields[2])
        except ValueError:
            _fail(path, lineno, f"bad choice {fields[2]!r} "
                                f"(want one of {[c.value for c in AbChoice]})")
        votes.append(AbVote(fields[0], fields[1], choice))
    return votes


# -- query results ----------------------------------------------------------------


def format_results(
    image_id: str,
    per_box: dict[Detection, list[QueryResult]],
    taxonomy: Taxonomy,
) -> str:
    lines = []
    for det, results in per_box.items():
        box = det.box
        prefix = (
            f"{image_id}\t{taxonomy.high_class(det.class_id).name}"
            f"\t{box.x_min:.6g}\t{box.y_min:.6g}\t{box.x_max:.6g}\t{box.y_max:.6g}"
        )
        for r in results:
            lines.append(
                f"{prefix}\t{r.rank}\t{r.item_id}\t{r.distance:.6f}"
                f"\t{taxonomy.fine_class(r.fine_class).name}\n"
            )
    return "".join(lines)
