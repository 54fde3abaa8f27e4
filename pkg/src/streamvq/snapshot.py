"""Immutable posting-list snapshots and their binary file format.

A snapshot is the serving artifact: every assigned item in one flat
array, cluster-major, with K segment boundaries. Within a segment items
are sorted by popularity bias descending (ties by item id ascending),
which is exactly the intra-cluster rank order the merge-sort server
consumes. The codebook state rides along so a snapshot file is
self-contained for serving, and item embeddings are included so the
optional unquantized rescoring pass can run from files alone.

File layout (all integers and floats little-endian, fixed width):

    magic           8 bytes  b"SVQSNAP1"
    format_version  u32      currently 1
    snapshot_id     u64      monotone per-run snapshot counter
    K               u32
    dim             u32
    item_count      u64
    n_tasks         u32
    alpha, beta, s  f64 x 3
    eta             f64 x n_tasks
    counters        f64 x K
    weights         f64 x K*dim
    segs            i64 x K          cumulative segment end offsets
    item_ids        i64 x item_count
    biases          f64 x item_count
    embeddings      f64 x item_count*dim
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codebook import EMPTY_COUNTER
from .errors import (
    SnapshotFormatError,
    SnapshotHeaderError,
    SnapshotTruncatedError,
    SnapshotVersionError,
)

MAGIC = b"SVQSNAP1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQIIQI")


@dataclass(frozen=True)
class PostingListSnapshot:
    """Compact item-to-cluster index plus the codebook that produced it."""

    version: int
    num_clusters: int
    dim: int
    item_ids: np.ndarray  # (M,) int64, cluster-major, bias-descending per segment
    segs: np.ndarray  # (K,) int64 cumulative end offsets; segs[-1] == M
    biases: np.ndarray  # (M,) float64 aligned with item_ids
    embeddings: np.ndarray  # (M, dim) float64 aligned with item_ids
    alpha: float
    beta: float
    s: float
    eta: np.ndarray = field(default_factory=lambda: np.empty(0))
    counters: np.ndarray = field(default_factory=lambda: np.empty(0))
    weights: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    @property
    def num_items(self) -> int:
        return int(self.item_ids.shape[0])

    def segment(self, k: int) -> slice:
        """Slice of the flat arrays holding cluster k's items."""
        start = int(self.segs[k - 1]) if k > 0 else 0
        return slice(start, int(self.segs[k]))

    def items_in(self, k: int) -> np.ndarray:
        return self.item_ids[self.segment(k)]

    def segment_sizes(self) -> np.ndarray:
        return np.diff(self.segs, prepend=0)

    def item_clusters(self) -> np.ndarray:
        """Cluster id for every flat-array position."""
        return np.repeat(
            np.arange(self.num_clusters, dtype=np.int64), self.segment_sizes()
        )

    def cluster_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """(e, mask): embeddings of initialized clusters, zero rows elsewhere."""
        mask = self.counters > EMPTY_COUNTER
        e = np.zeros((self.num_clusters, self.dim), dtype=np.float64)
        if mask.any():
            e[mask] = self.weights[mask] / self.counters[mask, None]
        return e, mask


def save_snapshot(snap: PostingListSnapshot) -> bytes:
    """Serialize to the versioned little-endian layout (no validation)."""
    eta = np.ascontiguousarray(snap.eta, dtype="<f8")
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        snap.version,
        snap.num_clusters,
        snap.dim,
        snap.num_items,
        eta.shape[0],
    )
    parts = [
        header,
        struct.pack("<ddd", snap.alpha, snap.beta, snap.s),
        eta.tobytes(),
        np.ascontiguousarray(snap.counters, dtype="<f8").tobytes(),
        np.ascontiguousarray(snap.weights, dtype="<f8").tobytes(),
        np.ascontiguousarray(snap.segs, dtype="<i8").tobytes(),
        np.ascontiguousarray(snap.item_ids, dtype="<i8").tobytes(),
        np.ascontiguousarray(snap.biases, dtype="<f8").tobytes(),
        np.ascontiguousarray(snap.embeddings, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def load_snapshot(data: bytes) -> PostingListSnapshot:
    """Parse snapshot bytes, raising a distinct error per failure mode."""
    if len(data) < _HEADER.size:
        raise SnapshotHeaderError(
            f"snapshot shorter than its {_HEADER.size}-byte header"
        )
    magic, fmt, snap_id, K, dim, M, n_tasks = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotHeaderError(f"bad magic {magic!r}")
    if fmt != FORMAT_VERSION:
        raise SnapshotVersionError(f"unsupported format revision {fmt}")
    expected = (
        _HEADER.size
        + 3 * 8
        + 8 * n_tasks
        + 8 * K
        + 8 * K * dim
        + 8 * K
        + 8 * M
        + 8 * M
        + 8 * M * dim
    )
    if len(data) < expected:
        raise SnapshotTruncatedError(
            f"payload is {len(data)} bytes, header promises {expected}"
        )
    if len(data) > expected:
        raise SnapshotFormatError(
            f"{len(data) - expected} trailing bytes after the payload"
        )
    off = _HEADER.size
    alpha, beta, s = struct.unpack_from("<ddd", data, off)
    off += 24

    def take(dtype, count, shape=None):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += arr.itemsize * count
        return arr.reshape(shape) if shape else arr

    eta = take("<f8", n_tasks)
    counters = take("<f8", K)
    weights = take("<f8", K * dim, (K, dim))
    segs = take("<i8", K)
    item_ids = take("<i8", M)
    biases = take("<f8", M)
    embeddings = take("<f8", M * dim, (M, dim))
    return PostingListSnapshot(
        version=snap_id,
        num_clusters=K,
        dim=dim,
        item_ids=item_ids,
        segs=segs,
        biases=biases,
        embeddings=embeddings,
        alpha=alpha,
        beta=beta,
        s=s,
        eta=eta,
        counters=counters,
        weights=weights,
    )


def write_snapshot_file(snap: PostingListSnapshot, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_snapshot(snap))


def read_snapshot_file(path) -> PostingListSnapshot:
    with open(path, "rb") as fh:
        return load_snapshot(fh.read())


def validate_snapshot(snap: PostingListSnapshot) -> list[str]:
    """Check the structural invariants; returns a list of violations.

    Checks exclusivity (no item id twice), segment monotonicity with the
    final boundary equal to the item count, and bias descending within
    every segment.
    """
    problems = []
    if snap.segs.shape[0] != snap.num_clusters:
        problems.append(
            f"expected {snap.num_clusters} segment boundaries, got {snap.segs.shape[0]}"
        )
    if snap.segs.size and (np.diff(snap.segs) < 0).any():
        problems.append("segment boundaries decrease")
    if snap.segs.size and int(snap.segs[-1]) != snap.num_items:
        problems.append(
            f"last boundary {int(snap.segs[-1])} != item count {snap.num_items}"
        )
    unique = np.unique(snap.item_ids)
    if unique.shape[0] != snap.num_items:
        problems.append(
            f"{snap.num_items - unique.shape[0]} duplicate item id(s): "
            "items must belong to exactly one cluster"
        )
    prev = 0
    for k in range(snap.num_clusters):
        end = int(snap.segs[k])
        seg = snap.biases[prev:end]
        if seg.size > 1 and (np.diff(seg) > 0).any():
            problems.append(f"segment {k} is not sorted by bias descending")
        prev = end
    return problems
