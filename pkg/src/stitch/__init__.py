"""Street-to-shop apparel search engine.

Detection post-processing, multi-task embedding extraction, catalog
augmentation and deduplication, class-and-gender-sharded approximate
nearest-neighbor indices, and an end-to-end retrieval pipeline with a CLI.
"""

from .taxonomy import (
    FineGrainedClass,
    Gender,
    HighLevelClass,
    Taxonomy,
    TaxonomyError,
    default_taxonomy,
    load_taxonomy,
    load_taxonomy_file,
    serialize_taxonomy,
)
from .geometry import (
    BoundingBox,
    Detection,
    DetectionSet,
    assign_gender,
    crop,
    fuse_ensemble,
    iou,
    nms,
)
from .features import (
    DistanceMetric,
    Embedding,
    baseline_featurize,
    cosine_distance,
    load_embeddings,
    normalize,
    save_embeddings,
)
from .model import (
    CyclicLRSchedule,
    MultiTaskModel,
    TaskSpec,
    TrainSample,
    extract_embedding,
    forward,
    identity_model,
    init_model,
    load_model,
    lr_at,
    multitask_loss,
    save_model,
    train,
    variant_config,
)
from .augment import (
    BlendRequest,
    augment_catalog_image,
    dilate,
    poisson_blend,
    sample_background,
    white_threshold_mask,
)
from .index import (
    FlatIndex,
    HnswIndex,
    HnswParams,
    ShardKey,
    ShardManager,
    build_shards,
    load_index,
    load_shards,
    save_index,
    save_shards,
)
from .dedup import (
    CatalogItem,
    DuplicationGraph,
    UnionFind,
    build_dup_graph,
    connected_components,
    dedup_catalog,
    prefilter,
    retain_top,
)
from .pipeline import (
    DetectorSource,
    QueryConfig,
    QueryResult,
    classify_topk,
    process_image,
    query,
    register_detector,
)
from .evaluation import (
    AbChoice,
    AbSummary,
    AbVote,
    ApResult,
    GroundTruthBox,
    ScoredBox,
    aggregate_ab,
    average_precision,
    classification_accuracy,
    mean_ap,
    retrieval_attribute_consistency,
)

__version__ = "0.1.0"
