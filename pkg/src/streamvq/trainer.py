"""Two-tower training with in-batch softmax and straight-through routing.

The towers are embedding lookups (one user table per task, one shared
item table of embedding + popularity bias) with an optional single
affine layer per side. Everything is plain float64 numpy with hand
derived gradients, so every parameter is exactly checkable against
finite differences.

Two losses drive the index:

  * the auxiliary loss scores each batch row's user against every batch
    item via u.v + bias and takes in-batch softmax cross entropy; it is
    what keeps item embeddings moving freely with the data.
  * the index loss is the same construction with each item replaced by
    its quantized cluster embedding e = Q(v). Clusters receive no
    gradient (they learn only by EMA): the gradient at e is rerouted
    unchanged onto the item embedding (straight-through).

A third, similarity loss sum ||v - e||^2 is kept solely for the
degradation ablation and is off by default: it locks items to their
current clusters, which is exactly the failure mode the auxiliary loss
exists to avoid.

Rows with an all-zero reward on the primary task count as exposure
without engagement: they still serve as in-batch negatives and still
update the index state, but they do not contribute a positive softmax
row. Batches whose events carry no rewards at all are treated as all
positive, which keeps hand-built test batches simple.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codebook import Codebook, QuantizationResult
from .engine import AssignmentEngine
from .errors import UnknownUserError
from .events import IMPRESSION, Event

INIT_SCALE = 0.05

# Seed-stream tags so per-id initialization is a pure function of
# (seed, table, id) and therefore independent of arrival order.
_ITEM_TAG = 1
_USER_TAG_BASE = 100


def _init_vector(seed: int, tag: int, entity_id: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng((seed, tag, entity_id))
    return rng.uniform(-INIT_SCALE, INIT_SCALE, dim)


class _Table:
    """Growable embedding table keyed by opaque int ids."""

    def __init__(self, dim: int, seed: int, tag: int, with_bias: bool = False):
        self.dim = dim
        self.seed = seed
        self.tag = tag
        cap = 1024
        self.emb = np.empty((cap, dim), dtype=np.float64)
        self.bias = np.zeros(cap, dtype=np.float64) if with_bias else None
        self._row: dict[int, int] = {}
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def __contains__(self, entity_id: int) -> bool:
        return entity_id in self._row

    def row(self, entity_id: int) -> int:
        r = self._row.get(entity_id)
        if r is None:
            if self._n == self.emb.shape[0]:
                self._grow()
            r = self._n
            self._n += 1
            self._row[entity_id] = r
            self.emb[r] = _init_vector(self.seed, self.tag, entity_id, self.dim)
            if self.bias is not None:
                self.bias[r] = 0.0
        return r

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.row(i) for i in ids], dtype=np.intp)

    def peek(self, entity_id: int) -> int | None:
        return self._row.get(entity_id)

    def ids(self) -> list[int]:
        return list(self._row.keys())

    def _grow(self) -> None:
        cap = self.emb.shape[0] * 2
        emb = np.empty((cap, self.dim), dtype=np.float64)
        emb[: self._n] = self.emb[: self._n]
        self.emb = emb
        if self.bias is not None:
            bias = np.zeros(cap, dtype=np.float64)
            bias[: self._n] = self.bias[: self._n]
            self.bias = bias


class TowerModel:
    """Embedding tables plus optional affine layers for both towers.

    User representations are per task ("finish" interest and "stay"
    interest are different vectors); the item table is shared by all
    tasks. The optional hidden layer is a single affine map per tower,
    initialized at identity.
    """

    def __init__(
        self,
        dim: int,
        tasks: Sequence[str],
        *,
        lr: float = 0.05,
        seed: int = 0,
        hidden: bool = False,
    ):
        if not tasks:
            raise ValueError("at least one task is required")
        self.dim = dim
        self.tasks = list(tasks)
        self.lr = float(lr)
        self.seed = int(seed)
        self.hidden = bool(hidden)
        self.items = _Table(dim, seed, _ITEM_TAG, with_bias=True)
        self.users = {
            t: _Table(dim, seed, _USER_TAG_BASE + p)
            for p, t in enumerate(self.tasks)
        }
        if hidden:
            self.user_affine = np.eye(dim)
            self.user_shift = np.zeros(dim)
            self.item_affine = np.eye(dim)
            self.item_shift = np.zeros(dim)

    def user_vector(self, user_id: int, task: str | None = None) -> np.ndarray:
        """Forward the user tower for one known user.

        Raises UnknownUserError if the user was never trained.
        """
        task = task or self.tasks[0]
        table = self.users[task]
        row = table.peek(user_id)
        if row is None:
            raise UnknownUserError(user_id)
        u = table.emb[row]
        if self.hidden:
            u = u @ self.user_affine.T + self.user_shift
        return u.copy() if not self.hidden else u

    def item_vector(self, item_id: int) -> tuple[np.ndarray, float]:
        row = self.items.peek(item_id)
        if row is None:
            raise KeyError(item_id)
        v = self.items.emb[row]
        if self.hidden:
            v = v @ self.item_affine.T + self.item_shift
        b = float(self.items.bias[row])
        return (v.copy() if not self.hidden else v, b)


def inbatch_softmax(
    u: np.ndarray,
    cand: np.ndarray,
    bias: np.ndarray,
    offsets: np.ndarray | None = None,
    row_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Bias-augmented in-batch softmax cross entropy.

    logits[o, r] = u_o . cand_r + bias_r (+ offsets_r); the diagonal is
    the positive pair. Returns (loss, dlogits) where loss sums
    -log softmax over (optionally weighted) rows and dlogits is its
    gradient with respect to the logits.
    """
    Z = u @ cand.T + bias[None, :]
    if offsets is not None:
        Z = Z + offsets[None, :]
    Z = Z - Z.max(axis=1, keepdims=True)
    expz = np.exp(Z)
    denom = expz.sum(axis=1, keepdims=True)
    logp = Z - np.log(denom)
    diag = np.arange(Z.shape[0])
    if row_weights is None:
        loss = float(-logp[diag, diag].sum())
        dZ = expz / denom
        dZ[diag, diag] -= 1.0
    else:
        loss = float(-(row_weights * logp[diag, diag]).sum())
        dZ = (expz / denom) * row_weights[:, None]
        dZ[diag, diag] -= row_weights
    return loss, dZ


@dataclass
class GradientBundle:
    """Per-batch gradients keyed by the rows they scatter onto."""

    loss_aux: float
    loss_ind: float
    loss_sim: float
    item_rows: np.ndarray
    user_rows: np.ndarray
    grad_item: np.ndarray  # (B, dim), add per item_rows
    grad_bias: np.ndarray  # (B,)
    grad_user: dict[str, np.ndarray]  # task -> (B, dim)
    cluster_ids: np.ndarray
    discounted: np.ndarray
    raw: np.ndarray
    grad_user_affine: np.ndarray | None = None
    grad_user_shift: np.ndarray | None = None
    grad_item_affine: np.ndarray | None = None
    grad_item_shift: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def total_loss(self) -> float:
        return self.loss_aux + self.loss_ind + self.loss_sim

    def dense_item_grad(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.grad_item.shape[1]))
        np.add.at(out, self.item_rows, self.grad_item)
        return out

    def dense_bias_grad(self, n_rows: int) -> np.ndarray:
        out = np.zeros(n_rows)
        np.add.at(out, self.item_rows, self.grad_bias)
        return out

    def dense_user_grad(self, task: str, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.grad_user[task].shape[1]))
        np.add.at(out, self.user_rows, self.grad_user[task])
        return out


class Trainer:
    """Single writer driving towers, codebook, and assignment engine.

    Args:
        model: the two-tower parameter store (this trainer mutates it).
        codebook: cluster set; only ever updated through the engine's
            EMA path, never by gradients.
        engine: assignment store receiving the per-event write-back.
        weight_aux / weight_ind / weight_sim: loss mixing weights.
        logq: subtract log of the estimated sampling probability
            (1 / occurrence interval) from each candidate's logits.
        ablation_lsim: replace the auxiliary loss with the similarity
            loss (the degradation ablation).
    """

    def __init__(
        self,
        model: TowerModel,
        codebook: Codebook,
        engine: AssignmentEngine,
        *,
        weight_aux: float = 1.0,
        weight_ind: float = 1.0,
        weight_sim: float = 1.0,
        logq: bool = False,
        ablation_lsim: bool = False,
    ):
        self.model = model
        self.codebook = codebook
        self.engine = engine
        self.weight_aux = float(weight_aux)
        self.weight_ind = float(weight_ind)
        self.weight_sim = float(weight_sim)
        self.logq = bool(logq)
        self.ablation_lsim = bool(ablation_lsim)

    # -- batch assembly ---------------------------------------------------

    def _gather(self, events: Sequence[Event]):
        if not events:
            raise ValueError("empty batch")
        for ev in events:
            if ev.stream != IMPRESSION:
                raise ValueError("training batches must contain impression events")
        item_rows = self.model.items.rows([ev.item_id for ev in events])
        user_rows_per_task = {
            t: self.model.users[t].rows([ev.user_id for ev in events])
            for t in self.model.tasks
        }
        # Per-task tables share row order because user ids are looked up
        # identically; keep one row array for scatter convenience.
        user_rows = user_rows_per_task[self.model.tasks[0]]
        v_raw = self.model.items.emb[item_rows]
        bias = self.model.items.bias[item_rows]
        if self.model.hidden:
            v = v_raw @ self.model.item_affine.T + self.model.item_shift
        else:
            v = v_raw
        u_raw = {t: self.model.users[t].emb[user_rows_per_task[t]] for t in self.model.tasks}
        if self.model.hidden:
            u = {
                t: u_raw[t] @ self.model.user_affine.T + self.model.user_shift
                for t in self.model.tasks
            }
        else:
            u = u_raw
        return item_rows, user_rows, v_raw, v, bias, u_raw, u

    def logq_correction(self, events: Sequence[Event]) -> np.ndarray:
        """Additive logit offsets cancelling in-batch sampling bias.

        Each candidate's sampling probability is estimated as the
        reciprocal of its occurrence interval, so the offset added to
        its column is -log(1/delta) = log(delta). Popular items
        (small delta) get the larger subtraction.
        """
        deltas = np.array(
            [self.engine.delta(ev.item_id, ev.timestamp) for ev in events]
        )
        return np.log(deltas)

    def _row_weights(self, events: Sequence[Event]) -> np.ndarray | None:
        """Positive-row mask from the primary task's reward.

        Exposure events with zero engagement stay in the batch as
        negatives but do not anchor a softmax row. Batches with no
        rewards attached anywhere are treated as all-positive.
        """
        primary = self.model.tasks[0]
        if all(not ev.rewards for ev in events):
            return None
        w = np.array(
            [1.0 if ev.rewards.get(primary, 1.0) > 0.0 else 0.0 for ev in events]
        )
        return w

    # -- losses (forward only) ---------------------------------------------

    def loss_aux(self, events: Sequence[Event]) -> float:
        """In-batch softmax loss on raw item embeddings plus bias."""
        _, _, _, v, bias, _, u = self._gather(events)
        offsets = self.logq_correction(events) if self.logq else None
        w = self._row_weights(events)
        total = 0.0
        for t in self.model.tasks:
            loss, _ = inbatch_softmax(u[t], v, bias, offsets, w)
            total += loss
        return total

    def loss_ind(self, events: Sequence[Event]) -> float:
        """In-batch softmax loss on quantized embeddings plus bias."""
        _, _, _, v, bias, _, u = self._gather(events)
        e = self._quantized(v)[1]
        offsets = self.logq_correction(events) if self.logq else None
        w = self._row_weights(events)
        total = 0.0
        for t in self.model.tasks:
            loss, _ = inbatch_softmax(u[t], e, bias, offsets, w)
            total += loss
        return total

    def loss_sim_ablation(self, events: Sequence[Event]) -> float:
        """Sum of squared item-to-cluster distances (ablation only)."""
        _, _, _, v, _, _, _ = self._gather(events)
        e = self._quantized(v)[1]
        w = self._row_weights(events)
        d = ((v - e) ** 2).sum(axis=1)
        return float(d.sum() if w is None else (w * d).sum())

    def _quantized(self, v: np.ndarray):
        ids, e, disc, raw = self.codebook.quantize_batch(v)
        return ids, e, disc, raw

    # -- gradients ---------------------------------------------------------

    def batch_loss(self, events: Sequence[Event]) -> float:
        """Total weighted training loss, forward only (used for checks)."""
        return self.compute_gradients(events).total_loss

    def compute_gradients(self, events: Sequence[Event]) -> GradientBundle:
        """Forward and backward pass; mutates nothing.

        Cluster embeddings are inputs, never parameters: the index
        loss's gradient at e is copied onto the item embedding
        (straight-through) and the codebook is untouched.
        """
        item_rows, user_rows, v_raw, v, bias, u_raw, u = self._gather(events)
        B = len(events)
        cluster_ids, e, disc, raw = self._quantized(v)
        offsets = self.logq_correction(events) if self.logq else None
        w = self._row_weights(events)

        gv = np.zeros_like(v)
        gbias = np.zeros(B)
        gu = {t: np.zeros_like(u[t]) for t in self.model.tasks}
        loss_aux_total = 0.0
        loss_ind_total = 0.0
        loss_sim_total = 0.0

        if self.ablation_lsim:
            d = v - e
            dsq = (d * d).sum(axis=1)
            if w is None:
                loss_sim_total = float(dsq.sum()) * self.weight_sim
                gv += self.weight_sim * 2.0 * d
            else:
                loss_sim_total = float((w * dsq).sum()) * self.weight_sim
                gv += self.weight_sim * 2.0 * w[:, None] * d

        for t in self.model.tasks:
            if not self.ablation_lsim:
                loss_a, dZa = inbatch_softmax(u[t], v, bias, offsets, w)
                loss_aux_total += self.weight_aux * loss_a
                gu[t] += self.weight_aux * (dZa @ v)
                gv += self.weight_aux * (dZa.T @ u[t])
                gbias += self.weight_aux * dZa.sum(axis=0)
            loss_i, dZi = inbatch_softmax(u[t], e, bias, offsets, w)
            loss_ind_total += self.weight_ind * loss_i
            gu[t] += self.weight_ind * (dZi @ e)
            # Straight-through: the gradient that lands on e moves v instead.
            gv += self.weight_ind * (dZi.T @ u[t])
            gbias += self.weight_ind * dZi.sum(axis=0)

        bundle = GradientBundle(
            loss_aux=loss_aux_total,
            loss_ind=loss_ind_total,
            loss_sim=loss_sim_total,
            item_rows=item_rows,
            user_rows=user_rows,
            grad_item=gv,
            grad_bias=gbias,
            grad_user=gu,
            cluster_ids=cluster_ids,
            discounted=disc,
            raw=raw,
        )
        if self.model.hidden:
            # Chain through the affine layers; the raw tables get A^T g.
            bundle.grad_item_affine = gv.T @ v_raw
            bundle.grad_item_shift = gv.sum(axis=0)
            bundle.grad_item = gv @ self.model.item_affine
            ua = np.zeros_like(self.model.user_affine)
            us = np.zeros(self.model.dim)
            for t in self.model.tasks:
                ua += gu[t].T @ u_raw[t]
                us += gu[t].sum(axis=0)
                bundle.grad_user[t] = gu[t] @ self.model.user_affine
            bundle.grad_user_affine = ua
            bundle.grad_user_shift = us
        return bundle

    def apply_gradients(self, bundle: GradientBundle) -> None:
        """One SGD step; scatter-adds handle duplicate ids in a batch."""
        lr = self.model.lr
        np.add.at(self.model.items.emb, bundle.item_rows, -lr * bundle.grad_item)
        np.add.at(self.model.items.bias, bundle.item_rows, -lr * bundle.grad_bias)
        for t in self.model.tasks:
            np.add.at(
                self.model.users[t].emb, bundle.user_rows, -lr * bundle.grad_user[t]
            )
        if self.model.hidden:
            self.model.item_affine -= lr * bundle.grad_item_affine
            self.model.item_shift -= lr * bundle.grad_item_shift
            self.model.user_affine -= lr * bundle.grad_user_affine
            self.model.user_shift -= lr * bundle.grad_user_shift

    # -- the full step -------------------------------------------------------

    def train_step(self, events: Sequence[Event]) -> dict:
        """Forward, backward, SGD, then per-event index write-back.

        Quantization is computed against the codebook state at batch
        start; EMA updates and assignments then apply event by event,
        in stream order, with the post-step item parameters. The whole
        batch shares a single EMA decay step (one training step, one
        step of the moving average).
        """
        bundle = self.compute_gradients(events)
        self.apply_gradients(bundle)
        emb = self.model.items.emb
        bias = self.model.items.bias
        affine = self.model.hidden
        for o, ev in enumerate(events):
            row = bundle.item_rows[o]
            v = emb[row]
            if affine:
                v = v @ self.model.item_affine.T + self.model.item_shift
            q = QuantizationResult(
                int(bundle.cluster_ids[o]),
                float(bundle.discounted[o]),
                float(bundle.raw[o]),
            )
            self.engine.process_impression(ev, v, float(bias[row]), q, advance=o == 0)
        gnorm_item = float(np.linalg.norm(bundle.grad_item))
        gnorm_user = float(
            np.sqrt(sum(np.linalg.norm(g) ** 2 for g in bundle.grad_user.values()))
        )
        return {
            "batch_size": len(events),
            "loss_aux": bundle.loss_aux,
            "loss_ind": bundle.loss_ind,
            "loss_sim": bundle.loss_sim,
            "grad_norm_item": gnorm_item,
            "grad_norm_user": gnorm_user,
            "grad_norm_bias": float(np.linalg.norm(bundle.grad_bias)),
        }
