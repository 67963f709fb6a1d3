"""Quantitative harnesses: detection mAP, classification accuracy tables,
retrieval attribute consistency, and A/B preference-vote aggregation."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .features import baseline_featurize, normalize
from .geometry import BoundingBox, iou
from .index import ShardManager
from .model import MultiTaskModel, extract_embedding, predict
from .taxonomy import Gender, Taxonomy


@dataclass(frozen=True)
class ScoredBox:
    """A detection as the evaluator sees it: image, class, confidence, box."""

    image_id: str
    class_id: int
    score: float
    box: BoundingBox


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: BoundingBox


@dataclass(frozen=True)
class ApResult:
    per_class: dict[int, float]
    mean: float
    ignored_classes: tuple[int, ...] = ()


def _match_detections(
    dets: list[ScoredBox], gts: list[GroundTruthBox], iou_thresh: float
) -> np.ndarray:
    """True/false-positive flags for score-ranked detections of one class.

    Each detection greedily claims the unmatched ground truth of its image
    with the highest IoU, provided that IoU reaches the threshold. Score ties
    keep input order (the sort is stable), so results are deterministic.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    gts_by_image: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        gts_by_image.setdefault(g.image_id, []).append(gi)
    matched = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, di in enumerate(order):
        det = dets[di]
        best_iou, best_gi = 0.0, -1
        for gi in gts_by_image.get(det.image_id, ()):
            if matched[gi]:
                continue
            overlap = iou(det.box, gts[gi].box)
            if overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0 and best_iou >= iou_thresh:
            matched[best_gi] = True
            tp[rank] = True
    return tp


def precision_recall_curve(
    dets: list[ScoredBox],
    gts: list[GroundTruthBox],
    class_id: int,
    iou_thresh: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each score-ranked detection of one class."""
    gts_c = [g for g in gts if g.class_id == class_id]
    if not gts_c:
        raise ValueError(f"no ground-truth boxes for class {class_id}")
    dets_c = [d for d in dets if d.class_id == class_id]
    tp = _match_detections(dets_c, gts_c, iou_thresh)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(dets_c) + 1)
    return cum_tp / len(gts_c), cum_tp / ranks


def average_precision(
    dets: list[ScoredBox],
    gts: list[GroundTruthBox],
    class_id: int,
    iou_thresh: float = 0.5,
) -> float:
    """Area under the precision envelope over recall (all-point interpolation).

    Precision is made monotone non-increasing from the right before
    integrating over the recall steps.
    """
    recall, precision = precision_recall_curve(dets, gts, class_id, iou_thresh)
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def mean_ap(
    dets: list[ScoredBox], gts: list[GroundTruthBox], iou_thresh: float = 0.5
) -> ApResult:
    """Per-class AP and their unweighted mean.

    Classes appearing only in detections carry no ground truth and are
    excluded from the mean; they come back in ``ignored_classes``.
    """
    if not gts:
        raise ValueError("ground truth is empty")
    gt_classes = sorted({g.class_id for g in gts})
    det_only = sorted({d.class_id for d in dets} - set(gt_classes))
    per_class = {
        c: average_precision(dets, gts, c, iou_thresh) for c in gt_classes
    }
    return ApResult(
        per_class=per_class,
        mean=float(np.mean(list(per_class.values()))),
        ignored_classes=tuple(det_only),
    )


def format_ap_table(result: ApResult, taxonomy: Taxonomy | None = None) -> str:
    """Aligned two-column table: one row per class, an Overall row last."""
    def name(c: int) -> str:
        return taxonomy.high_class(c).name if taxonomy is not None else str(c)

    rows = [(name(c), result.per_class[c]) for c in sorted(result.per_class)]
    rows.append(("Overall", result.mean))
    width = max(len(r[0]) for r in rows)
    lines = [f"{'Class':<{width}}  mAP", "-" * (width + 6)]
    lines += [f"{label:<{width}}  {value:.2f}" for label, value in rows]
    return "\n".join(lines) + "\n"


def classification_accuracy(
    models: dict[int, MultiTaskModel],
    samples: list[tuple[np.ndarray, int, int]],
    taxonomy: Taxonomy,
) -> dict[int, float]:
    """Top-1 product-type accuracy per high-level class.

    Samples are (patch, high class id, fine class id) triples; each patch is
    featurized and classified by its high-level class's model, whose
    product_type head is aligned with the taxonomy's child order.
    """
    hits: Counter[int] = Counter()
    totals: Counter[int] = Counter()
    fine_orders = {h: taxonomy.fine_classes_of(h) for h in {s[1] for s in samples}}
    for patch, high_id, fine_id in samples:
        feats = baseline_featurize(patch)
        local = int(predict(models[high_id], feats, "product_type"))
        predicted_fine = fine_orders[high_id][local] if local < len(fine_orders[high_id]) else -1
        totals[high_id] += 1
        hits[high_id] += int(predicted_fine == fine_id)
    return {h: hits[h] / totals[h] for h in sorted(totals)}


def format_accuracy_table(
    accuracies: dict[int, float], taxonomy: Taxonomy, column: str = "Accuracy"
) -> str:
    rows = [(taxonomy.high_class(h).name, acc) for h, acc in sorted(accuracies.items())]
    width = max(len(r[0]) for r in rows) if rows else 10
    lines = [f"{'Classifier':<{width}}  {column}", "-" * (width + len(column) + 2)]
    lines += [f"{label:<{width}}  {value:.2f}" for label, value in rows]
    return "\n".join(lines) + "\n"


def retrieval_attribute_consistency(
    manager: ShardManager,
    model: MultiTaskModel | None,
    queries: list[tuple[np.ndarray, Gender, object]],
    item_attrs: dict[str, object],
    n: int = 5,
    ef_search: int | None = None,
) -> float:
    """Mean fraction of each query's top-n neighbors sharing its attribute.

    Queries are (raw feature, gender, attribute value) triples; with no model
    the normalized raw feature is searched directly. Shards of the matching
    gender are searched (both adult genders when unknown) and merged by
    distance. Every retrieved item must carry an attribute label.
    """
    if not queries:
        raise ValueError("no queries given")
    fractions = []
    for feature, gender, attr in queries:
        emb = normalize(feature) if model is None else extract_embedding(model, feature).base
        genders = (gender,) if gender is not Gender.UNKNOWN else (Gender.MAN, Gender.WOMAN)
        merged: list[tuple[float, str]] = []
        for key in manager.shards:
            if key.gender in genders:
                merged.extend(
                    (d, item) for item, d in manager.search(key, emb, n, ef_search)
                )
        if not merged:
            raise ValueError("no shard produced results for a query")
        merged.sort()
        top = merged[:n]
        try:
            hits = sum(1 for _, item in top if item_attrs[item] == attr)
        except KeyError as e:
            raise ValueError(f"catalog item {e.args[0]!r} has no attribute label") from None
        fractions.append(hits / len(top))
    return float(np.mean(fractions))


# -- A/B preference votes ------------------------------------------------------


class AbChoice(enum.Enum):
    A_BETTER = "a_better"
    B_BETTER = "b_better"
    BOTH_BAD = "both_bad"
    BOTH_GOOD = "both_good"


@dataclass(frozen=True)
class AbVote:
    query_id: str
    rater_id: str
    choice: AbChoice


@dataclass(frozen=True)
class AbSummary:
    """Plurality outcome per query, reported over decided queries."""

    decided: dict[AbChoice, int]
    undecided: int
    percentages: dict[AbChoice, float] = field(default_factory=dict)

    @property
    def decided_total(self) -> int:
        return sum(self.decided.values())


def aggregate_ab(votes: list[AbVote], raters_per_query: int = 5) -> AbSummary:
    """Reduce per-rater votes to per-query plurality decisions.

    A query is decided by the choice with strictly the most votes; tied
    pluralities leave it undecided. Percentages cover decided queries only
    and sum to 100 (up to float rounding).
    """
    per_query: dict[str, Counter[AbChoice]] = {}
    seen: set[tuple[str, str]] = set()
    for v in votes:
        key = (v.query_id, v.rater_id)
        if key in seen:
            raise ValueError(f"duplicate vote from rater {v.rater_id!r} on query {v.query_id!r}")
        seen.add(key)
        counts = per_query.setdefault(v.query_id, Counter())
        counts[v.choice] += 1
        if sum(counts.values()) > raters_per_query:
            raise ValueError(f"query {v.query_id!r} has more than {raters_per_query} votes")
    decided: Counter[AbChoice] = Counter()
    undecided = 0
    for counts in per_query.values():
        ranked = counts.most_common()
        if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
            undecided += 1
        else:
            decided[ranked[0][0]] += 1
    total = sum(decided.values())
    percentages = {
        choice: 100.0 * decided.get(choice, 0) / total if total else 0.0
        for choice in AbChoice
    }
    return AbSummary(decided=dict(decided), undecided=undecided, percentages=percentages)


def format_ab_summary(summary: AbSummary) -> str:
    labels = {
        AbChoice.A_BETTER: "A better",
        AbChoice.B_BETTER: "B better",
        AbChoice.BOTH_BAD: "both bad",
        AbChoice.BOTH_GOOD: "both good",
    }
    lines = [f"decided queries: {summary.decided_total}  undecided: {summary.undecided}"]
    for choice in AbChoice:
        lines.append(
            f"{labels[choice]:<10} {summary.decided.get(choice, 0):>5}  "
            f"{summary.percentages[choice]:6.1f}%"
        )
    return "\n".join(lines) + "\n"
