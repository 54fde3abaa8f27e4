"""Streaming vector-quantization retrieval engine.

Items are attached to learnable cluster indexes in real time as events
stream in: the codebook learns by popularity-debiased EMA, the
assignment store updates immediately with no rebuild phase, and serving
ranks clusters then merges their pre-sorted posting lists with a
chunked k-way merge sort.
"""

from .codebook import Codebook, QuantizationResult
from .config import RunConfig
from .engine import AssignmentEngine
from .errors import (
    DimensionMismatchError,
    EmptyClusterError,
    EmptyCodebookError,
    SnapshotFormatError,
    SnapshotHeaderError,
    SnapshotTruncatedError,
    SnapshotVersionError,
    StreamVQError,
    UnknownUserError,
)
from .events import CANDIDATE, IMPRESSION, Event, read_events, write_events
from .pipeline import RunResult, build_components, evaluate_recall, run_stream, user_lookup
from .serving import (
    Query,
    RetrievalResult,
    answer_query,
    merge_sort_retrieve,
    score_clusters,
    serve_query,
)
from .server import QueryServer, serve_stdin
from .simulator import (
    CorpusConfig,
    DriftSpec,
    SyntheticCorpus,
    brute_force_topk,
    cluster_size_histogram,
    generate_corpus,
    generate_events,
    load_corpus,
    max_share,
    normalized_entropy,
    recall_at,
    recovery_lag,
    save_corpus,
)
from .snapshot import (
    PostingListSnapshot,
    load_snapshot,
    read_snapshot_file,
    save_snapshot,
    validate_snapshot,
    write_snapshot_file,
)
from .trainer import GradientBundle, TowerModel, Trainer, inbatch_softmax

__version__ = "0.1.0"

__all__ = [
    "AssignmentEngine",
    "CANDIDATE",
    "Codebook",
    "CorpusConfig",
    "DimensionMismatchError",
    "DriftSpec",
    "EmptyClusterError",
    "EmptyCodebookError",
    "Event",
    "GradientBundle",
    "IMPRESSION",
    "PostingListSnapshot",
    "Query",
    "QueryServer",
    "QuantizationResult",
    "RetrievalResult",
    "RunConfig",
    "RunResult",
    "SnapshotFormatError",
    "SnapshotHeaderError",
    "SnapshotTruncatedError",
    "SnapshotVersionError",
    "StreamVQError",
    "SyntheticCorpus",
    "TowerModel",
    "Trainer",
    "UnknownUserError",
    "answer_query",
    "brute_force_topk",
    "build_components",
    "cluster_size_histogram",
    "evaluate_recall",
    "generate_corpus",
    "generate_events",
    "inbatch_softmax",
    "load_corpus",
    "load_snapshot",
    "max_share",
    "merge_sort_retrieve",
    "normalized_entropy",
    "read_events",
    "read_snapshot_file",
    "recall_at",
    "recovery_lag",
    "run_stream",
    "save_corpus",
    "save_snapshot",
    "score_clusters",
    "serve_query",
    "serve_stdin",
    "user_lookup",
    "validate_snapshot",
    "write_events",
    "write_snapshot_file",
]
