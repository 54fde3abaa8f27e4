"""Learnable cluster set for streaming vector quantization.

A codebook keeps K cluster slots. Slot k holds a preliminary embedding
w[k] and an appearance counter c[k]; the usable cluster embedding is
e[k] = w[k] / c[k]. Slots learn purely by exponential moving average in
the standard vector-quantizer style: every update step decays all slots
by alpha, and the slot that received the item additionally absorbs
(1 - alpha) times the item's contribution, weighted by delta**beta
(delta is the item's occurrence interval, so rare items pull harder
than popular ones) and, in multi-task mode, by prod((1 + h_p)**eta_p)
over task rewards.

Because w and c decay together, decay never moves e[k]: geometry only
changes on hits. What decay does change is the counters' meaning: c[k]
becomes a moving rate of the cluster's appearance mass, which is what
the search-time disturbance needs. Nearest-cluster search discounts
squared distances by r = min(c[k] / (sum(c) / K) * s, 1), so a slot
whose recent appearance mass sits far below average looks artificially
close and captures items until it recovers.

The decay is materialized lazily: each slot carries the step stamp of
its stored values, and an unhit slot's counter is scaled by
alpha**(now - stamp) whenever it is read. A slot whose counter decays
below the empty threshold is treated exactly like a never-used slot:
its search score is 0, so it captures the next item routed at it and
adopts that item's embedding. That recycling, together with lazy
seeding from a fresh codebook, is the only initialization there is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyClusterError, EmptyCodebookError

# Materialized counters below this mean "slot is empty": never seeded,
# or starved so long that its appearance mass is gone.
EMPTY_COUNTER = 1e-12


@dataclass(frozen=True)
class QuantizationResult:
    """Nearest-cluster search outcome for one item embedding.

    discounted_distance is the quantity actually minimized
    (squared distance times the disturbance factor r <= 1);
    raw_distance is the undiscounted squared distance. For an empty
    slot both are 0: the slot adopts the item.
    """

    cluster_id: int
    discounted_distance: float
    raw_distance: float


class Codebook:
    """K learnable cluster slots with popularity-debiased EMA updates.

    Single writer: exactly one thread may call ema_update. Readers may
    call quantize / cluster_embedding concurrently; every read starts
    from a one-shot copy of the slot table and every write replaces a
    slot's whole (c, w, stamp) row with a single array assignment, so
    readers see a per-slot consistent state (cross-slot consistency is
    not promised).

    Args:
        K: number of cluster slots (immutable).
        dim: embedding dimensionality (immutable).
        alpha: EMA decay in (0, 1), applied per update step.
        beta: popularity exponent applied to the occurrence interval.
        s: disturbance threshold; slots below 1/s of the average
            appearance mass get boosted in nearest-cluster search.
        eta: per-task reward exponents (array-like), or None for the
            single-task codebook.
        disturbance: apply the counter discount during quantization.
            Empty-slot capture stays active either way; it is how slots
            get seeded, not part of the balancing discount.
    """

    def __init__(
        self,
        K: int,
        dim: int,
        *,
        alpha: float = 0.99,
        beta: float = 0.5,
        s: float = 5.0,
        eta=None,
        disturbance: bool = True,
    ):
        if K < 1:
            raise ValueError(f"K must be positive, got {K}")
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        if beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {beta}")
        if s <= 0.0:
            raise ValueError(f"s must be positive, got {s}")
        self.K = K
        self.dim = dim
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.s = float(s)
        if eta is None:
            self.eta = None
        else:
            self.eta = np.asarray(eta, dtype=np.float64).copy()
            if self.eta.ndim != 1 or (self.eta < 0).any():
                raise ValueError("eta must be a 1-d array of non-negative exponents")
        self.disturbance = bool(disturbance)
        # Row layout: [c, w[0..dim), stamp]. stamp is the update step the
        # stored values are current at; one row write per update keeps the
        # triple consistent for concurrent readers.
        self._state = np.zeros((K, dim + 2), dtype=np.float64)
        self._scratch = np.empty(dim + 2, dtype=np.float64)
        self._clock = 0

    # -- read side -----------------------------------------------------

    @property
    def update_steps(self) -> int:
        """Number of EMA updates applied so far (the decay clock)."""
        return self._clock

    def _snap(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One-shot copy: (materialized c, stored w, stored c)."""
        snap = self._state.copy()
        stored_c = snap[:, 0]
        decay = self.alpha ** (self._clock - snap[:, -1])
        return stored_c * decay, snap[:, 1:-1], stored_c

    def counters(self) -> np.ndarray:
        """Appearance counters c, decayed to the current step."""
        return self._snap()[0]

    def weights(self) -> np.ndarray:
        """Preliminary embeddings w decayed to the current step, (K, dim).

        w and c decay together, so weights() / counters() always equals
        the undecayed ratio.
        """
        snap = self._state.copy()
        decay = self.alpha ** (self._clock - snap[:, -1])
        return snap[:, 1:-1] * decay[:, None]

    def initialized_mask(self) -> np.ndarray:
        """Slots whose current appearance mass is above the empty floor."""
        return self.counters() > EMPTY_COUNTER

    def is_initialized(self, k: int) -> bool:
        if not 0 <= k < self.K:
            raise IndexError(f"cluster index {k} out of range [0, {self.K})")
        row = self._state[k]
        return bool(row[0] * self.alpha ** (self._clock - row[-1]) > EMPTY_COUNTER)

    def num_initialized(self) -> int:
        return int(self.initialized_mask().sum())

    def cluster_embedding(self, k: int) -> np.ndarray:
        """Return e[k] = w[k] / c[k].

        Raises EmptyClusterError for a slot with no current appearance
        mass (never updated, or fully decayed away).
        """
        if not 0 <= k < self.K:
            raise IndexError(f"cluster index {k} out of range [0, {self.K})")
        row = self._state[k].copy()
        if row[0] * self.alpha ** (self._clock - row[-1]) <= EMPTY_COUNTER:
            raise EmptyClusterError(k)
        return row[1:-1] / row[0]

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """All cluster embeddings plus the usable-slot mask.

        Rows of empty slots are zero-filled and must be ignored via the
        returned mask.
        """
        c, w, stored_c = self._snap()
        mask = c > EMPTY_COUNTER
        e = np.zeros((self.K, self.dim), dtype=np.float64)
        if mask.any():
            e[mask] = w[mask] / stored_c[mask, None]
        return e, mask

    def disturbance_factor(self, k: int | None = None):
        """Counter discount r = min(c[k] / (sum(c) / K) * s, 1).

        Pure function of the current counters. With no appearance mass
        anywhere there is no information to discount with, so r = 1 for
        every slot. A slot with no mass (while others have some) gets
        r = 0, the maximal boost.
        """
        c = self.counters()
        total = float(c.sum())
        if total <= EMPTY_COUNTER * self.K:
            r = np.ones(self.K, dtype=np.float64)
        else:
            r = np.minimum(c / (total / self.K) * self.s, 1.0)
        if k is None:
            return r
        if not 0 <= k < self.K:
            raise IndexError(f"cluster index {k} out of range [0, {self.K})")
        return float(r[k])

    def quantize(self, v) -> QuantizationResult:
        """Nearest cluster under the disturbance-discounted distance.

        Scans every slot: usable slots score ||e[k] - v||^2 * r(k),
        empty slots score 0 (they capture the item and will adopt its
        embedding on the next update). Ties break toward the lowest
        cluster index.
        """
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatchError(
                f"expected vector of length {self.dim}, got shape {v.shape}"
            )
        c, w, stored_c = self._snap()
        init = c > EMPTY_COUNTER
        disc = np.zeros(self.K, dtype=np.float64)
        raw = np.zeros(self.K, dtype=np.float64)
        if init.any():
            e = w[init] / stored_c[init, None]
            d = _sq_dists(v[None, :], e)[0]
            raw[init] = d
            if self.disturbance:
                factors = np.minimum(c[init] / (c.sum() / self.K) * self.s, 1.0)
                disc[init] = d * factors
            else:
                disc[init] = d
        k = int(np.argmin(disc))  # first minimum == lowest index
        return QuantizationResult(k, float(disc[k]), float(raw[k]))

    def quantize_batch(self, V) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized quantize over a batch, with empty-slot claiming.

        Returns (cluster_ids, e_batch, discounted, raw) where e_batch
        row o is the embedding the item was quantized to. All rows are
        scored against the same codebook state (batch semantics). Empty
        slots are claimed one per distinct new embedding, in batch
        order, so a cold batch seeds distinct slots instead of piling
        onto the first one; a row exactly equal to an embedding claimed
        earlier in the batch reuses that slot.
        """
        V = np.asarray(V, dtype=np.float64)
        if V.ndim != 2 or V.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"expected (B, {self.dim}) batch, got shape {V.shape}"
            )
        B = V.shape[0]
        if B == 0:
            return (
                np.empty(0, dtype=np.int64),
                np.empty((0, self.dim), dtype=np.float64),
                np.empty(0, dtype=np.float64),
                np.empty(0, dtype=np.float64),
            )
        c, w, stored_c = self._snap()
        init = c > EMPTY_COUNTER
        idx_init = np.flatnonzero(init)
        ids = np.empty(B, dtype=np.int64)
        disc_out = np.empty(B, dtype=np.float64)
        raw_out = np.empty(B, dtype=np.float64)
        e_batch = np.empty((B, self.dim), dtype=np.float64)

        if idx_init.size:
            E = w[idx_init] / stored_c[idx_init, None]
            d2 = _sq_dists(V, E)
            if self.disturbance:
                factors = np.minimum(c[idx_init] / (c.sum() / self.K) * self.s, 1.0)
                disc = d2 * factors[None, :]
            else:
                disc = d2
        else:
            E = np.empty((0, self.dim))
            d2 = np.empty((B, 0))
            disc = d2

        empty = np.flatnonzero(~init)
        if empty.size == 0:
            cols = np.argmin(disc, axis=1)
            rows = np.arange(B)
            ids[:] = idx_init[cols]
            disc_out[:] = disc[rows, cols]
            raw_out[:] = d2[rows, cols]
            e_batch[:] = E[cols]
            return ids, e_batch, disc_out, raw_out

        # Seeding path: walk the batch in order, handing each new item
        # the next empty slot unless a usable slot (or a slot claimed
        # earlier in this batch) already matches it exactly.
        claimed: list[tuple[int, np.ndarray]] = []
        next_empty = 0
        for o in range(B):
            best_k = self.K  # sentinel larger than any index
            best_disc = np.inf
            best_raw = np.inf
            if idx_init.size:
                col = int(np.argmin(disc[o]))
                best_k = int(idx_init[col])
                best_disc = float(disc[o, col])
                best_raw = float(d2[o, col])
            for slot, vec in claimed:
                if np.array_equal(vec, V[o]) and (0.0 < best_disc or slot < best_k):
                    best_k, best_disc, best_raw = slot, 0.0, 0.0
                    break
            take_empty = next_empty < empty.size and (
                best_disc > 0.0 or int(empty[next_empty]) < best_k
            )
            if take_empty:
                slot = int(empty[next_empty])
                next_empty += 1
                claimed.append((slot, V[o].copy()))
                ids[o] = slot
                disc_out[o] = 0.0
                raw_out[o] = 0.0
                e_batch[o] = V[o]
            elif best_k == self.K:
                # Cold batch wider than the codebook: no usable slot, no
                # empty slot left. Fall back to the nearest slot claimed
                # earlier in this batch (it will adopt its claimant's value).
                dcl = np.array([((vec - V[o]) ** 2).sum() for _, vec in claimed])
                j = int(np.argmin(dcl))
                slot, vec = claimed[j]
                ids[o] = slot
                disc_out[o] = raw_out[o] = float(dcl[j])
                e_batch[o] = vec
            else:
                ids[o] = best_k
                disc_out[o] = best_disc
                raw_out[o] = best_raw
                if best_disc == 0.0 and not init[best_k]:
                    e_batch[o] = V[o]
                else:
                    e_batch[o] = E[int(np.flatnonzero(idx_init == best_k)[0])]
        return ids, e_batch, disc_out, raw_out

    # -- write side ----------------------------------------------------

    def ema_update(self, k: int, v, delta: float, rewards=None, advance: bool = True) -> None:
        """Fold one item occurrence into slot k.

        Conceptually every slot does w <- alpha * w, c <- alpha * c once
        per update step, and slot k additionally absorbs

            w[k] += (1 - alpha) * m * delta**beta * v
            c[k] += (1 - alpha) * m * delta**beta

        where m = prod((1 + rewards)**eta) in multi-task mode and 1
        otherwise. Unhit slots are decayed lazily via their stamps.

        advance=True starts a new decay step (per-occurrence stepping);
        a batched trainer advances on the first fold of each batch so
        all of a training step's occurrences share one decay step, which
        keeps the counters meaningful as appearance rates when the batch
        spans a whole codebook sweep. delta is the item's occurrence
        interval and must be positive; rewards must be non-negative.
        """
        if not 0 <= k < self.K:
            raise IndexError(f"cluster index {k} out of range [0, {self.K})")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionMismatchError(
                f"expected vector of length {self.dim}, got shape {v.shape}"
            )
        if not delta > 0.0:
            raise ValueError(f"occurrence interval must be positive, got {delta}")
        weight = float(delta) ** self.beta
        if rewards is not None:
            if self.eta is None:
                raise ValueError("rewards passed to a codebook with no task exponents")
            rewards = np.asarray(rewards, dtype=np.float64)
            if rewards.shape != self.eta.shape:
                raise ValueError(
                    f"expected {self.eta.shape[0]} task rewards, got shape {rewards.shape}"
                )
            if (rewards < 0).any():
                raise ValueError("task rewards must be non-negative")
            weight *= float(np.prod((1.0 + rewards) ** self.eta))
        if advance:
            self._clock += 1
        gain = (1.0 - self.alpha) * weight
        row = self._state[k]
        decay = self.alpha ** (self._clock - row[-1])
        scratch = self._scratch
        np.multiply(row, decay, out=scratch)
        scratch[0] += gain
        scratch[1:-1] += gain * v
        scratch[-1] = self._clock
        self._state[k] = scratch  # single assignment: readers never see a torn row

    # -- snapshot plumbing ----------------------------------------------

    def state_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(counters, weights) materialized at the current step."""
        snap = self._state.copy()
        decay = self.alpha ** (self._clock - snap[:, -1])
        return snap[:, 0] * decay, snap[:, 1:-1] * decay[:, None]

    @classmethod
    def from_state(
        cls,
        counters,
        weights,
        *,
        alpha: float,
        beta: float,
        s: float,
        eta=None,
        disturbance: bool = True,
    ) -> "Codebook":
        counters = np.asarray(counters, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or counters.shape != (weights.shape[0],):
            raise ValueError("counters and weights shapes are inconsistent")
        cb = cls(
            weights.shape[0],
            weights.shape[1],
            alpha=alpha,
            beta=beta,
            s=s,
            eta=eta,
            disturbance=disturbance,
        )
        cb._state[:, 0] = counters
        cb._state[:, 1:-1] = weights
        return cb

    def require_initialized(self) -> None:
        """Raise EmptyCodebookError unless at least one slot is usable."""
        if not self.initialized_mask().any():
            raise EmptyCodebookError("codebook has no initialized cluster")


def _sq_dists(V: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, shape (B, K_init).

    One shared formula so single and batch quantization round floats
    identically.
    """
    d = (
        (V * V).sum(axis=1)[:, None]
        - 2.0 * (V @ E.T)
        + (E * E).sum(axis=1)[None, :]
    )
    return np.maximum(d, 0.0)
