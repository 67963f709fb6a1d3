"""Command-line interface.

One binary, subcommand per stage: ingest, train, augment, dedup, build-index,
query, eval-map, eval-retrieval, eval-ab, plus demo for generating the
bundled synthetic corpus. Exit codes: 0 success, 1 usage error, 2 data
error, 3 convergence or iteration-limit error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import dedup as dd
from . import demo as demo_mod
from . import evaluation as ev
from . import features as ft
from . import formats as fm
from . import index as ix
from . import model as md
from . import pipeline as pl
from . import report as rp
from . import taxonomy as tx


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _save_image(array: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(array).save(path)


def _taxonomy(args) -> tx.Taxonomy:
    if getattr(args, "taxonomy", None):
        return tx.load_taxonomy_file(args.taxonomy)
    return tx.default_taxonomy()


def _identity_for_class(taxonomy: tx.Taxonomy, class_id: int) -> md.MultiTaskModel:
    n = max(2, len(taxonomy.fine_classes_of(class_id)))
    return md.identity_model(md.variant_config("V1", num_product_types=n))


def _model_map(specs: list[str], taxonomy: tx.Taxonomy) -> dict[int, md.MultiTaskModel]:
    """Resolve --model flags into a per-high-class model table.

    Each flag is either "<high-class>=<checkpoint>" or a bare checkpoint path
    applied to every apparel class. Classes without an assignment fall back to
    the identity model sized for their fine-class count.
    """
    table = {
        c.id: _identity_for_class(taxonomy, c.id) for c in taxonomy.apparel_classes
    }
    for spec in specs or ():
        if "=" in spec:
            name, _, path = spec.partition("=")
            table[taxonomy.high_class(name).id] = md.load_model(path)
        else:
            loaded = md.load_model(spec)
            for c in taxonomy.apparel_classes:
                table[c.id] = loaded
    return table


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args) -> int:
    from .geometry import crop

    taxonomy = _taxonomy(args)
    items, _ = fm.read_catalog(args.catalog, taxonomy)
    records = fm.read_detection_records(args.detections) if args.detections else []
    model = md.load_model(args.model) if args.model else None
    images = Path(args.images)
    ids, rows = [], []
    for item in items:
        image = _load_image(images / item.image_name)
        patch = image
        candidates = [r for r in records if r.image_id == item.image_name]
        if candidates:
            parent = taxonomy.high_class(taxonomy.parent_of(item.fine_class)).name
            same_class = [r for r in candidates if r.class_name == parent]
            best = max(same_class or candidates, key=lambda r: r.score)
            patch = crop(image, best.box)
        feature = ft.baseline_featurize(patch)
        base = md.extract_embedding(model, feature).base if model else ft.normalize(feature)
        ids.append(item.item_id)
        rows.append(base.astype(np.float32))
    ft.save_embeddings(args.out, ids, np.stack(rows) if rows else np.zeros((0, ft.FEATURE_DIM)))
    print(f"ingested {len(ids)} items -> {args.out}")
    return 0


def cmd_train(args) -> int:
    lines = fm.read_training_lines(args.lines)
    matrix = None
    if args.features:
        _, matrix = ft.load_embeddings(args.features)
    lines_dir = Path(args.lines).parent
    samples = []
    for ref, labels in lines:
        try:
            row = int(ref)
        except ValueError:
            # not a row index: treat the ref as an image path and featurize
            path = Path(ref) if Path(ref).is_absolute() else lines_dir / ref
            feature = ft.baseline_featurize(_load_image(path))
            samples.append(md.TrainSample(feature, labels))
            continue
        if matrix is None:
            raise UsageError("row-indexed training lines need --features")
        if not 0 <= row < matrix.shape[0]:
            raise fm.LineFormatError(f"feature row {row} out of range")
        samples.append(md.TrainSample(matrix[row].astype(np.float64), labels))

    wanted = [s.name for s in md.variant_config(args.variant, 2)]
    specs = []
    for name in wanted:
        observed = [s.labels[name] for s in samples if name in s.labels]
        if not observed:
            raise fm.LineFormatError(f"variant {args.variant} needs {name!r} labels")
        specs.append(md.TaskSpec(name, max(observed) + 1, md.default_weight(name)))
    specs = tuple(specs)

    batches_per_epoch = math.ceil(len(samples) / args.batch_size)
    step = args.step_size or max(1, (args.epochs * batches_per_epoch) // (2 * args.num_cycles))
    schedule = md.CyclicLRSchedule(args.base_lr, args.max_lr, step, args.num_cycles)
    model = md.init_model(specs, seed=args.seed)
    trained, history = md.train(
        model, samples, schedule, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
    )
    md.save_model(trained, args.out)
    fig_dir = Path(args.figures) if args.figures else Path(args.out).parent
    fig_dir.mkdir(parents=True, exist_ok=True)
    rp.save_loss_curve(history, fig_dir / "loss_curve.png")
    rp.save_lr_curve(schedule, args.epochs * batches_per_epoch, fig_dir / "lr_schedule.png")
    for epoch, loss in enumerate(history, start=1):
        print(f"epoch {epoch:3d}  loss {loss:.6f}")
    print(f"saved checkpoint -> {args.out}")
    return 0


def cmd_augment(args) -> int:
    backgrounds = [_load_image(p) for p in sorted(Path(args.backgrounds).glob("*.png"))]
    if not backgrounds:
        raise ValueError(f"no PNG backgrounds in {args.backgrounds}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = sorted(Path(args.input).glob("*.png"))
    if not inputs:
        raise ValueError(f"no PNG inputs in {args.input}")
    for i, path in enumerate(inputs):
        image = _load_image(path)
        blended = aug.augment_catalog_image(
            image, backgrounds, threshold=args.threshold,
            dilate_radius=args.dilate, seed=args.seed + i,
        )
        _save_image(blended, out / path.name)
    print(f"augmented {len(inputs)} images -> {out}")
    return 0


def cmd_dedup(args) -> int:
    taxonomy = _taxonomy(args)
    items, rows = fm.read_catalog(args.catalog, taxonomy)
    ids, matrix = ft.load_embeddings(args.embeddings)
    with_emb = fm.attach_embeddings(items, rows, ids, matrix)
    min_priority = -math.inf if args.min_priority is None else args.min_priority
    survivors = dd.dedup_catalog(with_emb, tau=args.tau, min_priority=min_priority)
    original_row = {
        item.item_id: (pos if row is None else row)
        for pos, (item, row) in enumerate(zip(items, rows))
    }
    fm.write_catalog(
        survivors, [original_row[it.item_id] for it in survivors], args.out, taxonomy
    )
    print(f"dedup kept {len(survivors)} of {len(items)} items -> {args.out}")
    return 0


def cmd_build_index(args) -> int:
    taxonomy = _taxonomy(args)
    items, rows = fm.read_catalog(args.catalog, taxonomy)
    ids, matrix = ft.load_embeddings(args.embeddings)
    with_emb = fm.attach_embeddings(items, rows, ids, matrix)
    params = ix.HnswParams(
        m=args.m, ef_construction=args.ef_construction,
        ef_search=args.ef_search, seed=args.seed,
    )
    manager = ix.build_shards(
        with_emb, params, taxonomy, flat_threshold=args.flat_threshold
    )
    ix.save_shards(manager, args.out)
    print(f"built {len(manager)} shards over {manager.total_items()} items -> {args.out}")
    return 0


def cmd_query(args) -> int:
    if args.detector:
        source = pl.DetectorSource("plugin", args.detector)
    elif args.detections:
        source = pl.DetectorSource("precomputed", args.detections)
    else:
        raise UsageError("query needs --detections FILE or --detector NAME")
    taxonomy = _taxonomy(args)
    image = _load_image(args.image)
    image_id = args.image_id or Path(args.image).name
    manager = ix.load_shards(args.index)
    models = _model_map(args.model, taxonomy)
    cfg = pl.QueryConfig(
        k_classes=args.k_classes, k_results=args.k_results,
        final_n=args.final_n, ef_search=args.ef_search,
    )
    per_box = pl.process_image(
        image, source, manager, models, cfg, taxonomy,
        image_id=image_id, fuse_threshold=args.fuse_threshold,
        min_score=args.min_score,
    )
    text = fm.format_results(image_id, per_box, taxonomy)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval_map(args) -> int:
    taxonomy = _taxonomy(args)
    records = fm.read_detection_records(args.detections)
    dets = fm.to_scored_boxes(records, taxonomy)
    gts = fm.read_ground_truth(args.ground_truth, taxonomy)
    result = ev.mean_ap(dets, gts, iou_thresh=args.iou)
    table = ev.format_ap_table(result, taxonomy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "map_table.txt").write_text(table, encoding="utf-8")
    summary_lines = [
        f"{taxonomy.high_class(c).name}\t{ap:.6f}\n" for c, ap in sorted(result.per_class.items())
    ]
    summary_lines.append(f"Overall\t{result.mean:.6f}\n")
    (out / "map_summary.tsv").write_text("".join(summary_lines), encoding="utf-8")
    curves = {
        taxonomy.high_class(c).name: ev.precision_recall_curve(dets, gts, c, args.iou)
        for c in result.per_class
    }
    rp.save_pr_curves(curves, out / "pr_curves.png")
    rp.save_ap_bars(
        {taxonomy.high_class(c).name: ap for c, ap in result.per_class.items()},
        result.mean, out / "ap_bars.png",
    )
    sys.stdout.write(table)
    if result.ignored_classes:
        names = [taxonomy.high_class(c).name for c in result.ignored_classes]
        print(f"ignored classes without ground truth: {', '.join(names)}")
    return 0


def cmd_eval_retrieval(args) -> int:
    manager = ix.load_shards(args.index)
    _, matrix = ft.load_embeddings(args.features)
    queries = []
    for row, gender, attr in fm.read_query_features(args.queries):
        if not 0 <= row < matrix.shape[0]:
            raise fm.LineFormatError(f"query feature row {row} out of range")
        queries.append((matrix[row].astype(np.float64), gender, attr))
    attrs = fm.read_attributes(args.attributes)
    model = md.load_model(args.model) if args.model else None
    value = ev.retrieval_attribute_consistency(
        manager, model, queries, attrs, n=args.n, ef_search=args.ef_search
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "consistency.tsv").write_text(
        f"n\tqueries\tconsistency\n{args.n}\t{len(queries)}\t{value:.6f}\n", encoding="utf-8"
    )
    rp.save_consistency_bars({f"top-{args.n}": value}, out / "consistency.png")
    print(f"attribute consistency @ top-{args.n}: {value:.4f}")
    return 0


def cmd_eval_ab(args) -> int:
    votes = fm.read_votes(args.votes)
    summary = ev.aggregate_ab(votes, raters_per_query=args.raters)
    text = ev.format_ab_summary(summary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["choice\tdecided\tpercent\n"]
    for choice in ev.AbChoice:
        lines.append(
            f"{choice.value}\t{summary.decided.get(choice, 0)}"
            f"\t{summary.percentages[choice]:.2f}\n"
        )
    lines.append(f"undecided\t{summary.undecided}\t\n")
    (out / "ab_summary.tsv").write_text("".join(lines), encoding="utf-8")
    rp.save_ab_bars(summary, out / "ab_votes.png")
    sys.stdout.write(text)
    return 0


def cmd_demo(args) -> int:
    out = demo_mod.write_demo(args.out, n_items=args.items, seed=args.seed)
    if args.queries:
        _write_demo_queries(out, args.items, args.seed)
    print(f"demo corpus -> {out}")
    return 0


def _write_demo_queries(out: Path, n_items: int, seed: int) -> None:
    """Augmented copies of each catalog image plus matching detections."""
    taxonomy = demo_mod.demo_taxonomy()
    items = demo_mod.make_demo_items(n_items, seed)
    backgrounds = demo_mod.make_demo_backgrounds(seed=seed)
    qdir = out / "queries"
    qdir.mkdir(exist_ok=True)
    records = []
    for i, item in enumerate(items):
        blended = aug.augment_catalog_image(item.image, backgrounds, seed=seed * 1000 + i)
        name = f"query-{i:04d}.png"
        _save_image(blended, qdir / name)
        m = aug.BLEND_MARGIN
        from .geometry import BoundingBox

        shifted = BoundingBox(
            item.box.x_min + m, item.box.y_min + m, item.box.x_max + m, item.box.y_max + m
        )
        parent = taxonomy.high_class(taxonomy.parent_of(item.fine_class)).name
        records.append(fm.DetectionRecord(name, parent, 0.95, shifted, "synthetic"))
        h, w = blended.shape[:2]
        person_box = BoundingBox(0.0, 0.0, float(w), float(h))
        records.append(
            fm.DetectionRecord(name, item.gender.value, 0.9, person_box, "synthetic")
        )
    fm.write_detection_records(records, out / "query_detections.tsv")


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="stitch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="catalog lines + images -> embeddings file")
    p.add_argument("--catalog", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--model")
    p.add_argument("--detections")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="training lines -> model checkpoint")
    p.add_argument("--lines", required=True)
    p.add_argument("--features",
                   help="feature file for row-indexed refs; path refs featurize images")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="V2", choices=["V1", "V2", "V3"])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-lr", type=float, default=0.001)
    p.add_argument("--max-lr", type=float, default=0.01)
    p.add_argument("--step-size", type=int)
    p.add_argument("--num-cycles", type=int, default=2)
    p.add_argument("--figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("augment", help="blend catalog images onto backgrounds")
    p.add_argument("--input", required=True)
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int, default=aug.WHITE_THRESHOLD_DEFAULT)
    p.add_argument("--dilate", type=int, default=aug.DILATE_RADIUS_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("dedup", help="catalog lines -> near-duplicate-free lines")
    p.add_argument("--catalog", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--tau", type=float, default=dd.DUP_DISTANCE_DEFAULT)
    p.add_argument("--min-priority", type=float)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("build-index", help="deduped catalog -> shard directory")
    p.add_argument("--catalog", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--ef-construction", type=int, default=200)
    p.add_argument("--ef-search", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flat-threshold", type=int, default=ix.FLAT_SHARD_THRESHOLD)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="image + detections -> ranked catalog items")
    p.add_argument("--image", required=True)
    p.add_argument("--image-id")
    p.add_argument("--index", required=True)
    p.add_argument("--detections")
    p.add_argument("--detector")
    p.add_argument("--taxonomy")
    p.add_argument("--model", action="append")
    p.add_argument("--k-classes", type=int, default=3)
    p.add_argument("--k-results", type=int, default=20)
    p.add_argument("--final-n", type=int, default=10)
    p.add_argument("--ef-search", type=int, default=100)
    p.add_argument("--fuse-threshold", type=float, default=0.5)
    p.add_argument("--min-score", type=float, default=0.0,
                   help="drop detections below this confidence before fusion")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval-map", help="detections vs ground truth -> mAP table")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("eval-retrieval", help="attribute consistency of top-n retrieval")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--attributes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--ef-search", type=int)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-ab", help="A/B preference votes -> plurality summary")
    p.add_argument("--votes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--raters", type=int, default=5)
    p.set_defaults(func=cmd_eval_ab)

    p = sub.add_parser("demo", help="generate the synthetic demo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--queries", action="store_true",
                   help="also write augmented query images and their detections")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (aug.SolverConvergenceError, md.TrainingDivergedError) as e:
        print(f"convergence error: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
