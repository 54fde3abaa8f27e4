"""Synthetic streaming workloads and ground-truth oracles.

The corpus is a mixture of latent groups: G unit-norm group means, items
scattered around their group's mean, users holding interest mixtures
over groups. Item popularity follows a Zipf law over item id ranks, so
impressions are heavily skewed while the candidate stream samples items
uniformly. Rewards come from a geometric affinity rule: users keep a
frozen taste vector (their mixture over the initial group means) and an
item's reward probability rises with the cosine between that taste and
the item's current true vector.

Concept drift moves a chosen fraction of group means by a fixed-norm
random displacement at a scheduled event count. Items ride with their
group (their true vectors jump), user tastes stay where they were, so
the reward structure changes abruptly and the learned index has to
repair itself.

Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .events import CANDIDATE, IMPRESSION, Event

# Seed-stream domains, so corpus and event randomness never collide.
_CORPUS_DOMAIN = 5
_EVENT_DOMAIN = 11


@dataclass(frozen=True)
class DriftSpec:
    """Scheduled displacement of a fraction of group means."""

    at_event: int
    group_fraction: float = 0.5
    magnitude: float = 2.0

    def __post_init__(self):
        if self.at_event < 0 or not 0.0 < self.group_fraction <= 1.0:
            raise ValueError("bad drift schedule")


@dataclass
class CorpusConfig:
    n_items: int = 100_000
    n_users: int = 1_000
    n_groups: int = 50
    dim: int = 16
    zipf_exponent: float = 1.0
    group_noise: float = 0.15
    mix_spread: float = 0.3  # interest mass spread uniformly off the primary group
    group_skew: float = 1.0  # Zipf exponent over group assignment: trending groups
    drift: DriftSpec | None = None

    def __post_init__(self):
        if self.n_groups < 1 or self.n_items < self.n_groups:
            raise ValueError("need at least one group and items >= groups")
        if self.n_users < 1 or self.dim < 1:
            raise ValueError("need at least one user and one dimension")
        if self.zipf_exponent < 0 or self.group_skew < 0:
            raise ValueError("Zipf exponents must be non-negative")
        if not 0.0 <= self.mix_spread <= 1.0:
            raise ValueError("mix_spread must lie in [0, 1]")


@dataclass
class SyntheticCorpus:
    """Ground-truth item and user model behind the event streams."""

    config: CorpusConfig
    group_means: np.ndarray  # (G, dim) initial, unit norm
    drifted_means: np.ndarray | None  # (G, dim) after the scheduled jump
    item_groups: np.ndarray  # (N,)
    item_offsets: np.ndarray  # (N, dim) within-group noise
    popularity: np.ndarray  # (N,) impression sampling probabilities
    user_mixtures: np.ndarray  # (U, G)
    user_tastes: np.ndarray  # (U, dim) frozen, unit norm

    def means_at(self, timestamp: int) -> np.ndarray:
        drift = self.config.drift
        if drift is not None and timestamp > drift.at_event:
            return self.drifted_means
        return self.group_means

    def item_vectors_at(self, timestamp: int) -> np.ndarray:
        """True item vectors under the drift schedule, unit norm."""
        x = self.means_at(timestamp)[self.item_groups] + self.item_offsets
        return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_corpus(config: CorpusConfig, seed: int) -> SyntheticCorpus:
    """Deterministic corpus for (config, seed)."""
    rng = np.random.default_rng((seed, _CORPUS_DOMAIN))
    G, N, U, dim = config.n_groups, config.n_items, config.n_users, config.dim
    means = rng.normal(size=(G, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    item_groups = rng.integers(0, G, size=N)
    item_offsets = rng.normal(scale=config.group_noise, size=(N, dim))
    if config.group_noise == 0.0:
        item_offsets = np.zeros((N, dim))
    ranks = np.arange(1, N + 1, dtype=np.float64)
    weights = ranks ** (-config.zipf_exponent)
    popularity = weights / weights.sum()
    primary = rng.integers(0, G, size=U)
    mixtures = np.full((U, G), config.mix_spread / G)
    mixtures[np.arange(U), primary] += 1.0 - config.mix_spread
    tastes = mixtures @ means
    tastes /= np.linalg.norm(tastes, axis=1, keepdims=True)
    drifted = None
    if config.drift is not None:
        drifted = means.copy()
        n_move = max(1, math.ceil(config.drift.group_fraction * G))
        moved = rng.choice(G, size=n_move, replace=False)
        direction = rng.normal(size=(n_move, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        drifted[moved] = drifted[moved] + config.drift.magnitude * direction
    return SyntheticCorpus(
        config=config,
        group_means=means,
        drifted_means=drifted,
        item_groups=item_groups,
        item_offsets=item_offsets,
        popularity=popularity,
        user_mixtures=mixtures,
        user_tastes=tastes,
    )


def affinity(corpus: SyntheticCorpus, user_ids, item_ids, timestamp: int) -> np.ndarray:
    """Reward probability for user-item pairs at a point in time."""
    x = corpus.item_vectors_at(timestamp)
    cos = (corpus.user_tastes[user_ids] * x[item_ids]).sum(axis=1)
    return _sigmoid(6.0 * (cos - 0.35))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def generate_events(
    corpus: SyntheticCorpus,
    n_impressions: int,
    candidate_ratio: float = 0.0,
    seed: int = 0,
    tasks: Sequence[str] = ("finish",),
    chunk: int = 65_536,
) -> Iterator[Event]:
    """Yield the interleaved impression and candidate streams.

    Impressions sample items by popularity and users uniformly; rewards
    follow the affinity rule (finish is Bernoulli, stay-like tasks get
    log(1 + play seconds)). Candidate events sample items uniformly and
    carry no rewards; candidate_ratio of them are interleaved per
    impression with a deterministic accumulator. Timestamps count every
    emitted event, starting at 1.
    """
    if candidate_ratio < 0:
        raise ValueError("candidate_ratio must be non-negative")
    rng = np.random.default_rng((seed, _EVENT_DOMAIN))
    ts = 0
    acc = 0.0
    emitted = 0
    tasks = list(tasks)
    want_stay = [t for t in tasks if t != "finish"]
    while emitted < n_impressions:
        m = min(chunk, n_impressions - emitted)
        items = rng.choice(corpus.config.n_items, size=m, p=corpus.popularity)
        users = rng.integers(0, corpus.config.n_users, size=m)
        n_cand = int(math.floor(acc + candidate_ratio * m) - math.floor(acc))
        cand_items = rng.integers(0, corpus.config.n_items, size=n_cand)
        # Event timestamps depend on the interleave, so compute affinity
        # per event after placing it on the global clock.
        drift_at = corpus.config.drift.at_event if corpus.config.drift else None
        base_ts = ts
        stamps = np.empty(m, dtype=np.int64)
        cursor = base_ts
        local_acc = acc
        cand_slots = []
        for i in range(m):
            cursor += 1
            stamps[i] = cursor
            local_acc += candidate_ratio
            while local_acc >= 1.0:
                local_acc -= 1.0
                cursor += 1
                cand_slots.append((i, cursor))
        if drift_at is None:
            probs = affinity(corpus, users, items, 0)
        else:
            probs = np.empty(m)
            pre = stamps <= drift_at
            if pre.any():
                probs[pre] = affinity(corpus, users[pre], items[pre], 0)
            if (~pre).any():
                probs[~pre] = affinity(
                    corpus, users[~pre], items[~pre], int(drift_at) + 1
                )
        finish = (rng.random(m) < probs).astype(np.float64)
        stay = None
        if want_stay:
            play = rng.exponential(1.0 + 30.0 * probs)
            stay = np.log1p(play)
        ci = 0
        for i in range(m):
            rewards = {}
            if "finish" in tasks:
                rewards["finish"] = float(finish[i])
            if stay is not None:
                for t in want_stay:
                    rewards[t] = float(stay[i])
            yield Event(
                user_id=int(users[i]),
                item_id=int(items[i]),
                timestamp=int(stamps[i]),
                stream=IMPRESSION,
                rewards=rewards,
            )
            while ci < len(cand_slots) and cand_slots[ci][0] == i:
                yield Event(
                    user_id=0,  # candidate passes have no acting user
                    item_id=int(cand_items[ci]),
                    timestamp=int(cand_slots[ci][1]),
                    stream=CANDIDATE,
                )
                ci += 1
        ts = cursor
        acc = local_acc
        emitted += m


def brute_force_topk(
    u: np.ndarray,
    item_ids: np.ndarray,
    embeddings: np.ndarray,
    biases: np.ndarray,
    n: int,
    *,
    clusters: np.ndarray | None = None,
    cluster_embeddings: np.ndarray | None = None,
) -> list[tuple[int, float]]:
    """Exhaustive top-n by u.v + bias, the oracle for every serving test.

    Pass clusters and cluster_embeddings to score the quantized variant
    u.e[cluster] + bias instead. Ordering is (score descending, id
    ascending), exact over the full corpus.
    """
    u = np.asarray(u, dtype=np.float64)
    if clusters is not None:
        if cluster_embeddings is None:
            raise ValueError("quantized scoring needs cluster embeddings")
        scores = cluster_embeddings[clusters] @ u + biases
    else:
        scores = embeddings @ u + biases
    order = np.lexsort((item_ids, -scores))[:n]
    return [(int(item_ids[i]), float(scores[i])) for i in order]


def save_corpus(corpus: SyntheticCorpus, path) -> None:
    """Write a corpus to one .npz file (byte-deterministic)."""
    cfg = corpus.config
    drift = cfg.drift
    scalars = np.array(
        [
            cfg.n_items,
            cfg.n_users,
            cfg.n_groups,
            cfg.dim,
            cfg.zipf_exponent,
            cfg.group_noise,
            cfg.mix_spread,
            -1.0 if drift is None else drift.at_event,
            0.0 if drift is None else drift.group_fraction,
            0.0 if drift is None else drift.magnitude,
        ],
        dtype=np.float64,
    )
    arrays = {
        "scalars": scalars,
        "group_means": corpus.group_means,
        "item_groups": corpus.item_groups,
        "item_offsets": corpus.item_offsets,
        "popularity": corpus.popularity,
        "user_mixtures": corpus.user_mixtures,
        "user_tastes": corpus.user_tastes,
    }
    if corpus.drifted_means is not None:
        arrays["drifted_means"] = corpus.drifted_means
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_corpus(path) -> SyntheticCorpus:
    data = np.load(path)
    sc = data["scalars"]
    drift = None
    if sc[7] >= 0:
        drift = DriftSpec(
            at_event=int(sc[7]), group_fraction=float(sc[8]), magnitude=float(sc[9])
        )
    cfg = CorpusConfig(
        n_items=int(sc[0]),
        n_users=int(sc[1]),
        n_groups=int(sc[2]),
        dim=int(sc[3]),
        zipf_exponent=float(sc[4]),
        group_noise=float(sc[5]),
        mix_spread=float(sc[6]),
        drift=drift,
    )
    return SyntheticCorpus(
        config=cfg,
        group_means=data["group_means"],
        drifted_means=data["drifted_means"] if "drifted_means" in data else None,
        item_groups=data["item_groups"],
        item_offsets=data["item_offsets"],
        popularity=data["popularity"],
        user_mixtures=data["user_mixtures"],
        user_tastes=data["user_tastes"],
    )


# -- metrics ----------------------------------------------------------------


def normalized_entropy(counts) -> float:
    """Entropy of the count distribution over all slots, scaled to [0, 1].

    1 means perfectly uniform over the K slots, 0 means a single slot
    holds everything. Empty slots contribute zero mass.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    k = counts.shape[0]
    if total <= 0 or k <= 1:
        return 1.0 if k <= 1 and total > 0 else 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum() / np.log(k))


def max_share(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    return float(counts.max() / total) if total > 0 else 0.0


def cluster_size_histogram(
    sizes, bucket_edges: Sequence[float] = (0, 1, 2, 5, 10, 25, 50, 100, 250, 1000)
) -> list[tuple[str, int]]:
    """Aggregate clusters by their item counts into labelled buckets."""
    sizes = np.asarray(sizes)
    edges = list(bucket_edges) + [math.inf]
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        label = f"[{lo:g}, {hi:g})" if hi != math.inf else f">= {lo:g}"
        out.append((label, int(((sizes >= lo) & (sizes < hi)).sum())))
    return out


def recall_at(served_ids: Sequence[int], exact_ids: Sequence[int]) -> float:
    """Fraction of the exact top-N present in the served list."""
    exact = set(exact_ids)
    if not exact:
        return 1.0
    return len(exact.intersection(served_ids)) / len(exact)


def recovery_lag(
    curve: Sequence[tuple[int, float]],
    drift_at: int,
    *,
    fraction: float = 0.95,
    baseline_points: int = 3,
) -> int | None:
    """Events from the drift until recall returns to 95% of pre-drift.

    The pre-drift level is the mean of the last baseline_points
    measurements at or before the drift. Returns None if the curve
    never recovers.
    """
    pre = [r for t, r in curve if t <= drift_at]
    if not pre:
        raise ValueError("no pre-drift measurements in the curve")
    level = float(np.mean(pre[-baseline_points:]))
    for t, r in curve:
        if t > drift_at and r >= fraction * level:
            return t - drift_at
    return None
