"""Query-time retrieval: cluster ranking plus chunked k-way merge sort.

Serving is read-only over an immutable snapshot. A query first ranks
clusters by u . e[k]; the top probe_count clusters' posting lists (each
already sorted by popularity bias descending) are then merged with a
max-heap keyed by the full item score u . e[k] + bias. Each heap pop
appends the popped list's whole current chunk (up to chunk_size items)
and advances that list, which trades a bounded amount of ordering
precision for far fewer heap operations. With chunk_size 1 the output
is exactly the global sort of all probed items under the
(score descending, id ascending) tie-break.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .codebook import EMPTY_COUNTER
from .errors import EmptyCodebookError, UnknownUserError
from .snapshot import PostingListSnapshot


@dataclass
class Query:
    """One retrieval request.

    Either a raw user vector u or a user_id resolvable through the
    serving-side lookup must be present. probe_count clusters are
    expanded; the result is truncated to target_size. rescore enables
    the optional second pass that re-ranks the retrieved set with the
    unquantized item embeddings (the two-tower scorer).
    """

    u: np.ndarray | None = None
    user_id: int | None = None
    task: str | None = None
    probe_count: int = 64
    target_size: int = 100
    chunk_size: int = 8
    rescore: bool = False

    def __post_init__(self):
        if self.u is None and self.user_id is None:
            raise ValueError("query needs a raw vector or a user id")
        if self.u is not None:
            self.u = np.asarray(self.u, dtype=np.float64)
        if self.probe_count < 1 or self.target_size < 1 or self.chunk_size < 1:
            raise ValueError("probe_count, target_size and chunk_size must be >= 1")


@dataclass
class RetrievalResult:
    """Ranked candidates plus serving metadata."""

    items: list[tuple[int, float]]
    snapshot_version: int
    clusters_probed: int
    heap_pops: int
    trace: list[tuple[int, list[int]]] | None = field(default=None, repr=False)
    positions: list[int] | None = field(default=None, repr=False)


def score_clusters(
    u: np.ndarray,
    snapshot: PostingListSnapshot,
    codebook=None,
) -> list[tuple[int, float]]:
    """Rank servable clusters by u . e[k], descending.

    Clusters with no appearance mass or no assigned items cannot serve
    and are excluded. Ties keep ascending cluster index. The cluster
    embeddings come from the snapshot unless a live codebook is passed.
    """
    u = np.asarray(u, dtype=np.float64)
    if codebook is not None:
        if codebook.K != snapshot.num_clusters or codebook.dim != snapshot.dim:
            raise ValueError("codebook and snapshot shapes are incompatible")
        e, mask = codebook.embeddings()
    else:
        e, mask = snapshot.cluster_embeddings()
    if u.shape != (snapshot.dim,):
        raise ValueError(f"expected query vector of length {snapshot.dim}")
    nonempty = snapshot.segment_sizes() > 0
    eligible = np.flatnonzero(mask & nonempty)
    if eligible.size == 0:
        raise EmptyCodebookError("no initialized, nonempty cluster to serve from")
    scores = e[eligible] @ u
    order = np.lexsort((eligible, -scores))
    return [(int(eligible[i]), float(scores[i])) for i in order]


def merge_sort_retrieve(
    query: Query,
    ranked_clusters: list[tuple[int, float]],
    snapshot: PostingListSnapshot,
    *,
    return_trace: bool = False,
) -> RetrievalResult:
    """Chunked k-way merge over pre-sorted posting lists.

    The heap holds one entry per live list, keyed by the score of that
    list's current head element (cluster score plus the element's own
    bias), ties by item id ascending. Each pop appends the popped
    list's current chunk in stored order, advances its cursor by
    chunk_size, and pushes the new head if the list is not exhausted.
    Stops once target_size items are collected or every list runs out.
    """
    S = query.target_size
    l = query.chunk_size
    ids = snapshot.item_ids
    biases = snapshot.biases
    heap: list[tuple[float, int, int]] = []  # (-score, head item id, list index)
    cursors: list[int] = []
    ends: list[int] = []
    cscore: list[float] = []
    for li, (k, cs) in enumerate(ranked_clusters):
        seg = snapshot.segment(k)
        if seg.start == seg.stop:
            continue
        idx = len(cursors)
        cursors.append(seg.start)
        ends.append(seg.stop)
        cscore.append(cs)
        heap.append((-(cs + biases[seg.start]), int(ids[seg.start]), idx))
    heapq.heapify(heap)
    result: list[tuple[int, float]] = []
    positions: list[int] = []
    trace: list[tuple[int, list[int]]] | None = [] if return_trace else None
    pops = 0
    while heap and len(result) < S:
        _, head_id, li = heapq.heappop(heap)
        pops += 1
        start = cursors[li]
        stop = min(start + l, ends[li])
        chunk_ids = []
        for pos in range(start, stop):
            result.append((int(ids[pos]), cscore[li] + float(biases[pos])))
            positions.append(pos)
            if return_trace:
                chunk_ids.append(int(ids[pos]))
        if return_trace:
            trace.append((head_id, chunk_ids))
        cursors[li] = stop
        if stop < ends[li]:
            heapq.heappush(
                heap, (-(cscore[li] + biases[stop]), int(ids[stop]), li)
            )
    return RetrievalResult(
        items=result[:S],
        snapshot_version=snapshot.version,
        clusters_probed=len(cursors),
        heap_pops=pops,
        trace=trace,
        positions=positions[:S],
    )


def serve_query(
    query: Query,
    snapshot: PostingListSnapshot | None,
    user_vectors=None,
    codebook=None,
) -> RetrievalResult:
    """End-to-end retrieval for one query against one snapshot.

    Resolves the user vector, ranks clusters, expands the top
    probe_count of them through the chunked merge, and optionally
    rescored the retrieved set with unquantized embeddings.
    Deterministic given (snapshot, query).
    """
    if snapshot is None:
        raise EmptyCodebookError("no snapshot has been published yet")
    u = query.u
    if u is None:
        if user_vectors is None:
            raise UnknownUserError(query.user_id)
        u = user_vectors(query.user_id, query.task)
    u = np.asarray(u, dtype=np.float64)
    ranked = score_clusters(u, snapshot, codebook)[: query.probe_count]
    result = merge_sort_retrieve(query, ranked, snapshot)
    if query.rescore:
        pos = np.array(result.positions, dtype=np.intp)
        scores = snapshot.embeddings[pos] @ u + snapshot.biases[pos]
        ids = snapshot.item_ids[pos]
        order = np.lexsort((ids, -scores))
        result.items = [(int(ids[i]), float(scores[i])) for i in order]
    return result


def answer_query(
    request: dict,
    snapshot: PostingListSnapshot | None,
    user_vectors=None,
    defaults: dict | None = None,
) -> dict:
    """Wire-format request handler shared by the socket and stdin servers.

    Request: {"user": id or "u": [floats], "task": str, "probe": int,
    "S": int, "l": int}. Response: {"items": [[id, score], ...],
    "snapshot": version} or {"error": reason}.
    """
    defaults = defaults or {}
    try:
        query = Query(
            u=np.asarray(request["u"], dtype=np.float64) if "u" in request else None,
            user_id=request.get("user"),
            task=request.get("task"),
            probe_count=int(request.get("probe", defaults.get("probe", 64))),
            target_size=int(request.get("S", defaults.get("S", 100))),
            chunk_size=int(request.get("l", defaults.get("l", 8))),
            rescore=bool(request.get("rescore", defaults.get("rescore", False))),
        )
        result = serve_query(query, snapshot, user_vectors)
    except EmptyCodebookError:
        return {"error": "no snapshot"}
    except UnknownUserError:
        return {"error": f"unknown user {request.get('user')!r}"}
    except (KeyError, TypeError, ValueError) as exc:
        return {"error": f"bad request: {exc}"}
    return {
        "items": [[i, s] for i, s in result.items],
        "snapshot": result.snapshot_version,
    }
