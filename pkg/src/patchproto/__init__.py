"""Few-shot classification of visual anomaly types from patch-embedding
grids, scored against a memory bank of normal patches."""

from .bank import (
    MemoryBank,
    build_bank,
    coreset_covering_radius,
    coreset_size,
    coreset_subsample,
    greedy_coreset_indices,
    load_bank,
    nn_distance,
    nn_distances,
    save_bank,
)
from .errors import (
    DimensionMismatchError,
    FormatError,
    ManifestError,
    ParameterError,
    PatchProtoError,
)
from .estimators import MeanPrototypeClassifier, PatchProtoClassifier, PatchScorer
from .evaluation import (
    Episode,
    EpisodeResult,
    EvalReport,
    PipelineConfig,
    evaluate,
    gamma_sweep,
    prepare_bank,
    run_episode,
    sample_episodes,
)
from .grids import (
    EmbeddingGrid,
    read_embedding_dims,
    read_embedding_file,
    write_embedding_file,
)
from .manifest import (
    DatasetManifest,
    FeatureProvider,
    FileProvider,
    InMemoryProvider,
    SampleRecord,
    audit_grid_dims,
    load_manifest,
    save_manifest,
    validate_manifest,
)
from .prototypes import (
    ClassificationResult,
    ClassPrototype,
    baseline_proto_classify,
    build_prototypes,
    class_distance,
    classify,
    mean_pool,
)
from .scoring import ScoreMap, read_score_map, score_grid, softmax_normalize, write_score_map
from .selection import ScoredSelection, SelectionEntry, select_anomaly_embeddings
from .synthetic import make_synthetic_dataset, write_to_dir

__version__ = "0.1.0"

__all__ = [
    "ClassificationResult",
    "ClassPrototype",
    "DatasetManifest",
    "DimensionMismatchError",
    "EmbeddingGrid",
    "Episode",
    "EpisodeResult",
    "EvalReport",
    "FeatureProvider",
    "FileProvider",
    "FormatError",
    "InMemoryProvider",
    "ManifestError",
    "MeanPrototypeClassifier",
    "MemoryBank",
    "ParameterError",
    "PatchProtoClassifier",
    "PatchProtoError",
    "PatchScorer",
    "PipelineConfig",
    "SampleRecord",
    "ScoredSelection",
    "ScoreMap",
    "SelectionEntry",
    "audit_grid_dims",
    "baseline_proto_classify",
    "build_bank",
    "build_prototypes",
    "class_distance",
    "classify",
    "coreset_covering_radius",
    "coreset_size",
    "coreset_subsample",
    "evaluate",
    "gamma_sweep",
    "greedy_coreset_indices",
    "load_bank",
    "load_manifest",
    "make_synthetic_dataset",
    "mean_pool",
    "nn_distance",
    "nn_distances",
    "prepare_bank",
    "read_embedding_dims",
    "read_embedding_file",
    "read_score_map",
    "run_episode",
    "sample_episodes",
    "save_bank",
    "save_manifest",
    "score_grid",
    "select_anomaly_embeddings",
    "softmax_normalize",
    "validate_manifest",
    "write_embedding_file",
    "write_score_map",
    "write_to_dir",
]
