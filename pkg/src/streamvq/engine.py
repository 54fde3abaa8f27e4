"""Real-time item-to-cluster assignment store.

The engine is the write-through key-value side of the index: it records
each item's latest embedding, popularity bias, cluster assignment, and
last-seen timestamp, and it is the single component that derives the
occurrence interval delta feeding the codebook's EMA.

Impression events update everything and fold the item into its cluster;
candidate events only re-run nearest-cluster search on the stored
embedding and overwrite the assignment, touching no learnable state.
Assignments are visible to readers the moment the call returns; there
is no rebuild step anywhere. dump_snapshot materializes an immutable
posting-list view at any time without blocking the write path.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .codebook import Codebook, QuantizationResult
from .errors import DimensionMismatchError
from .events import CANDIDATE, IMPRESSION, Event
from .snapshot import PostingListSnapshot


class AssignmentEngine:
    """Streaming item store with immediate cluster assignment.

    Args:
        codebook: the cluster set this engine writes through to.
        tasks: task names, in codebook eta order, for mapping event
            reward dicts to reward vectors. None disables multi-task
            reward weighting.
        first_delta: occurrence interval charged to an item's first
            impression (there is no previous sighting to difference
            against).
        ema_enabled: when False the codebook is frozen after seeding:
            empty slots still adopt their first item (otherwise the
            index degenerates to a single slot), but initialized slots
            never move. Used as the frozen-codebook control.
    """

    def __init__(
        self,
        codebook: Codebook,
        *,
        tasks: Sequence[str] | None = None,
        first_delta: float = 1000.0,
        ema_enabled: bool = True,
    ):
        if first_delta <= 0:
            raise ValueError("first_delta must be positive")
        self.codebook = codebook
        self.tasks = list(tasks) if tasks is not None else None
        self.first_delta = float(first_delta)
        self.ema_enabled = bool(ema_enabled)
        dim = codebook.dim
        cap = 1024
        self._ids = np.empty(cap, dtype=np.int64)
        self._emb = np.empty((cap, dim), dtype=np.float64)
        self._bias = np.empty(cap, dtype=np.float64)
        self._cluster = np.full(cap, -1, dtype=np.int64)
        self._last_seen = np.zeros(cap, dtype=np.int64)
        self._row: dict[int, int] = {}
        self._n = 0
        self._next_snapshot = 0
        self.impressions_by_cluster = np.zeros(codebook.K, dtype=np.int64)
        self.skipped_candidates = 0

    def __len__(self) -> int:
        return self._n

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._row

    # -- lookups ---------------------------------------------------------

    def delta(self, item_id: int, timestamp: int) -> float:
        """Occurrence interval in event counts, floored at 1.

        Unknown items get the first-occurrence cap.
        """
        row = self._row.get(item_id)
        if row is None:
            return self.first_delta
        return float(max(int(timestamp) - int(self._last_seen[row]), 1))

    def cluster_of(self, item_id: int) -> int:
        return int(self._cluster[self._row[item_id]])

    def embedding_of(self, item_id: int) -> np.ndarray:
        return self._emb[self._row[item_id]].copy()

    def bias_of(self, item_id: int) -> float:
        return float(self._bias[self._row[item_id]])

    def last_seen_of(self, item_id: int) -> int:
        return int(self._last_seen[self._row[item_id]])

    def item_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Copies of (ids, embeddings, biases, clusters) for all items."""
        n = self._n
        return (
            self._ids[:n].copy(),
            self._emb[:n].copy(),
            self._bias[:n].copy(),
            self._cluster[:n].copy(),
        )

    # -- stream processing -------------------------------------------------

    def process_impression(
        self,
        event: Event,
        v_emb: np.ndarray,
        v_bias: float,
        quantization: QuantizationResult,
        advance: bool = True,
    ) -> None:
        """Record one impression and fold it into the codebook.

        Stores the item's fresh embedding, bias, cluster and last-seen
        timestamp, then applies the EMA update with the occurrence
        interval derived from the previous sighting. The assignment is
        readable immediately after return. advance marks the start of a
        new EMA decay step; a batched caller sets it on the first event
        of each batch.
        """
        if event.stream != IMPRESSION:
            raise ValueError(f"expected an impression event, got {event.stream!r}")
        v_emb = np.asarray(v_emb, dtype=np.float64)
        if v_emb.shape != (self.codebook.dim,):
            raise DimensionMismatchError(
                f"expected vector of length {self.codebook.dim}, got {v_emb.shape}"
            )
        k = quantization.cluster_id
        row = self._row.get(event.item_id)
        if row is None:
            row = self._new_row(event.item_id)
            delta = self.first_delta
        else:
            delta = float(max(event.timestamp - int(self._last_seen[row]), 1))
        self._emb[row] = v_emb
        self._bias[row] = v_bias
        self._cluster[row] = k
        self._last_seen[row] = event.timestamp
        self.impressions_by_cluster[k] += 1
        if self.ema_enabled:
            self.codebook.ema_update(
                k, v_emb, delta, self._reward_vector(event), advance=advance
            )
        elif not self.codebook.is_initialized(k):
            # frozen codebook: empty slots still adopt their first item,
            # and without step advances the seeded mass never decays
            self.codebook.ema_update(
                k, v_emb, delta, self._reward_vector(event), advance=False
            )

    def process_candidate(self, event: Event) -> None:
        """Refresh one item's assignment from the candidate stream.

        Forward-only: re-runs nearest-cluster search on the stored
        embedding and overwrites cluster_id. No losses, no gradients,
        no EMA, no last_seen refresh (delta models impression
        frequency). Items never impressed have no stored embedding and
        are skipped, counted in skipped_candidates.
        """
        if event.stream != CANDIDATE:
            raise ValueError(f"expected a candidate event, got {event.stream!r}")
        row = self._row.get(event.item_id)
        if row is None:
            self.skipped_candidates += 1
            return
        q = self.codebook.quantize(self._emb[row])
        self._cluster[row] = q.cluster_id

    # -- snapshots -----------------------------------------------------------

    def dump_snapshot(self) -> PostingListSnapshot:
        """Materialize an immutable posting-list view of the index.

        Items are grouped cluster-major; within a cluster they are
        sorted by bias descending, ties by item id ascending. Works on
        copies, so stream processing continues unblocked and the
        returned snapshot never changes.
        """
        n = self._n
        ids = self._ids[:n]
        cl = self._cluster[:n]
        bias = self._bias[:n]
        emb = self._emb[:n]
        order = np.lexsort((ids, -bias, cl))
        cl_sorted = cl[order]
        segs = np.searchsorted(cl_sorted, np.arange(self.codebook.K), side="right")
        counters, weights = self.codebook.state_arrays()
        version = self._next_snapshot
        self._next_snapshot += 1
        eta = self.codebook.eta
        return PostingListSnapshot(
            version=version,
            num_clusters=self.codebook.K,
            dim=self.codebook.dim,
            item_ids=ids[order].copy(),
            segs=segs.astype(np.int64),
            biases=bias[order].copy(),
            embeddings=emb[order].copy(),
            alpha=self.codebook.alpha,
            beta=self.codebook.beta,
            s=self.codebook.s,
            eta=eta.copy() if eta is not None else np.empty(0),
            counters=counters,
            weights=weights,
        )

    # -- internals ---------------------------------------------------------

    def _reward_vector(self, event: Event) -> np.ndarray | None:
        if self.tasks is None:
            return None
        return np.array(
            [event.rewards.get(t, 0.0) for t in self.tasks], dtype=np.float64
        )

    def _new_row(self, item_id: int) -> int:
        if self._n == self._ids.shape[0]:
            self._grow()
        row = self._n
        self._n += 1
        self._ids[row] = item_id
        self._row[item_id] = row
        return row

    def _grow(self) -> None:
        cap = self._ids.shape[0] * 2
        for name in ("_ids", "_emb", "_bias", "_cluster", "_last_seen"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)
