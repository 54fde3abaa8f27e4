"""Streaming run orchestration: events in, snapshots and metrics out.

Wires the generator (or an event file) through the trainer and the
assignment engine: impressions accumulate into fixed-size batches for
the in-batch losses, candidate events refresh assignments inline, and
snapshots are dumped at a configurable impression cadence. Optionally
evaluates served recall against the exhaustive oracle at a second
cadence, which is how drift-recovery curves are produced.

A run directory, when requested, holds the echoed config, every
snapshot, a sidecar trainer-state file per snapshot (the serving
snapshot intentionally excludes trainer state, so resuming needs the
sidecar), training metrics, the recall curve, and the per-cluster
impression counts.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .codebook import Codebook
from .config import RunConfig
from .engine import AssignmentEngine
from .errors import UnknownUserError
from .events import CANDIDATE, IMPRESSION, Event
from .serving import Query, serve_query
from .simulator import (
    SyntheticCorpus,
    brute_force_topk,
    generate_corpus,
    generate_events,
    normalized_entropy,
    max_share,
    recall_at,
)
from .snapshot import PostingListSnapshot, read_snapshot_file, write_snapshot_file
from .trainer import TowerModel, Trainer


@dataclass
class RunResult:
    """Live state and artifacts of one completed streaming run."""

    config: RunConfig
    codebook: Codebook
    engine: AssignmentEngine
    model: TowerModel
    trainer: Trainer
    final_snapshot: PostingListSnapshot
    snapshots: list[PostingListSnapshot] = field(default_factory=list)
    recall_curve: list[tuple[int, float]] = field(default_factory=list)
    train_metrics: list[dict] = field(default_factory=list)
    impressions: int = 0
    events_seen: int = 0
    out_dir: str | None = None

    def impression_entropy(self) -> float:
        return normalized_entropy(self.engine.impressions_by_cluster)

    def max_impression_share(self) -> float:
        return max_share(self.engine.impressions_by_cluster)


def build_components(config: RunConfig):
    """Codebook, engine, model, trainer per the config."""
    codebook = Codebook(
        config.K,
        config.dim,
        alpha=config.alpha,
        beta=config.beta,
        s=config.s,
        eta=config.eta_array() if config.multi_task else None,
        disturbance=config.disturbance,
    )
    engine = AssignmentEngine(
        codebook,
        tasks=config.tasks if config.multi_task else None,
        first_delta=config.first_delta,
        ema_enabled=config.ema,
    )
    model = TowerModel(
        config.dim,
        config.tasks,
        lr=config.lr,
        seed=config.seed,
        hidden=config.hidden_layer,
    )
    trainer = Trainer(
        model,
        codebook,
        engine,
        weight_aux=config.loss_weights["aux"],
        weight_ind=config.loss_weights["ind"],
        weight_sim=config.loss_weights["sim"],
        logq=config.logq,
        ablation_lsim=config.ablation_lsim,
    )
    return codebook, engine, model, trainer


def user_lookup(model: TowerModel):
    """Serving-side user resolution backed by the live tower tables."""

    def lookup(user_id, task=None):
        return model.user_vector(int(user_id), task)

    return lookup


def evaluate_recall(
    config: RunConfig,
    model: TowerModel,
    engine: AssignmentEngine,
    snapshot: PostingListSnapshot,
) -> float:
    """Mean served recall against the unquantized exhaustive oracle.

    Queries the first eval_queries user ids with their current tower
    vectors; users never seen in the stream are skipped.
    """
    ids, emb, bias, _ = engine.item_arrays()
    if ids.shape[0] == 0:
        return 0.0
    task = config.tasks[0]
    total, used = 0.0, 0
    for uid in range(config.eval_queries):
        try:
            u = model.user_vector(uid, task)
        except UnknownUserError:
            continue
        exact = brute_force_topk(u, ids, emb, bias, config.eval_topn)
        served = serve_query(
            Query(
                u=u,
                probe_count=config.probe,
                target_size=config.eval_topn,
                chunk_size=config.chunk,
            ),
            snapshot,
        )
        total += recall_at([i for i, _ in served.items], [i for i, _ in exact])
        used += 1
    return total / used if used else 0.0


def run_stream(
    config: RunConfig,
    *,
    corpus: SyntheticCorpus | None = None,
    events: Iterable[Event] | None = None,
    out_dir: str | None = None,
    keep_snapshots: bool = False,
    resume_snapshot: str | None = None,
    resume_state: str | None = None,
    progress=None,
) -> RunResult:
    """Drive one full streaming run.

    corpus and events default to the generators under config.seed.
    With out_dir set, snapshots, sidecar state files, and metric CSVs
    are written as the run progresses; the last completed snapshot is
    always valid on interrupt because files are written whole.

    To resume, pass a dumped snapshot (codebook state) plus its state
    sidecar (everything else) and replay the same event stream; events
    already consumed are skipped by count.
    """
    codebook, engine, model, trainer = build_components(config)
    if corpus is None and events is None:
        corpus = generate_corpus(config.corpus_config(), config.seed)
    if events is None:
        events = generate_events(
            corpus,
            config.n_events,
            config.candidate_ratio,
            config.seed,
            tasks=config.tasks,
        )
    result = RunResult(
        config=config,
        codebook=codebook,
        engine=engine,
        model=model,
        trainer=trainer,
        final_snapshot=None,
        out_dir=out_dir,
    )
    resuming = resume_state is not None
    skip_events = 0
    if resuming:
        if resume_snapshot is None:
            raise ValueError("resuming needs the snapshot along with the state file")
        snap = read_snapshot_file(resume_snapshot)
        if snap.num_clusters != codebook.K or snap.dim != codebook.dim:
            raise ValueError("snapshot shape does not match the config")
        skip_events = _load_state(resume_state, engine, model, result)
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "snapshots"), exist_ok=True)
        config.save(os.path.join(out_dir, "config.json"))

    cadence = config.snapshot_cadence
    eval_every = config.eval_every
    batch: list[Event] = []
    next_dump = cadence * (result.impressions // cadence + 1) if cadence else 0
    next_eval = (
        eval_every * (result.impressions // eval_every + 1) if eval_every else 0
    )
    last_dumped = result.impressions
    loss_window: list[dict] = []

    def dump() -> PostingListSnapshot:
        nonlocal last_dumped
        snap = engine.dump_snapshot()
        last_dumped = result.impressions
        result.final_snapshot = snap
        if keep_snapshots:
            result.snapshots.append(snap)
        if out_dir is not None:
            path = os.path.join(out_dir, "snapshots", f"snap_{snap.version:06d}.svq")
            write_snapshot_file(snap, path)
            _save_state(
                os.path.join(out_dir, "snapshots", f"state_{snap.version:06d}.npz"),
                engine,
                model,
                result,
            )
        row = {
            "events_seen": result.events_seen,
            "impressions": result.impressions,
            "snapshot": snap.version,
        }
        for key in ("loss_aux", "loss_ind", "loss_sim"):
            vals = [m[key] / max(m["batch_size"], 1) for m in loss_window]
            row[key] = float(np.mean(vals)) if vals else 0.0
        loss_window.clear()
        result.train_metrics.append(row)
        return snap

    def flush():
        nonlocal next_dump, next_eval
        if batch:
            metrics = trainer.train_step(batch)
            loss_window.append(metrics)
            result.impressions += len(batch)
            batch.clear()
        while cadence and result.impressions >= next_dump:
            dump()
            next_dump += cadence
        while eval_every and result.impressions >= next_eval:
            snap = engine.dump_snapshot()
            r = evaluate_recall(config, model, engine, snap)
            result.recall_curve.append((result.impressions, r))
            next_eval += eval_every
            if progress is not None:
                progress(result.impressions, r)

    if not resuming:
        dump()  # initial snapshot: an empty index is still servable state

    for ev in events:
        result.events_seen += 1
        if result.events_seen <= skip_events:
            continue
        if ev.stream == IMPRESSION:
            batch.append(ev)
            if len(batch) >= config.batch_size:
                flush()
        elif config.candidate_stream:
            engine.process_candidate(ev)
    flush()
    if result.impressions > last_dumped or result.final_snapshot is None:
        dump()

    if out_dir is not None:
        _write_run_csvs(out_dir, result)
    return result


# -- resume state -------------------------------------------------------------


def _save_state(path, engine: AssignmentEngine, model: TowerModel, result: RunResult):
    """Sidecar with everything the serving snapshot leaves out.

    Row order of every table is preserved so a resumed run scatters
    gradients in the same float order and reproduces the original
    byte for byte.
    """
    n = len(engine)
    arrays = {
        "engine_ids": engine._ids[:n].copy(),
        "engine_emb": engine._emb[:n].copy(),
        "engine_bias": engine._bias[:n].copy(),
        "engine_cluster": engine._cluster[:n].copy(),
        "engine_last_seen": engine._last_seen[:n].copy(),
        "impressions_by_cluster": engine.impressions_by_cluster.copy(),
        # raw slot rows incl. stamps: materialized counters cannot resume
        # bit-exactly because alpha**(a+b) != alpha**a * alpha**b
        "codebook_state": engine.codebook._state.copy(),
        "counters": np.array(
            [
                engine.skipped_candidates,
                engine._next_snapshot,
                engine.codebook._clock,
            ],
            dtype=np.int64,
        ),
        "progress": np.array(
            [result.events_seen, result.impressions], dtype=np.int64
        ),
        "item_ids": np.array(model.items.ids(), dtype=np.int64),
        "item_emb": model.items.emb[: len(model.items)].copy(),
        "item_bias": model.items.bias[: len(model.items)].copy(),
    }
    for p, t in enumerate(model.tasks):
        table = model.users[t]
        arrays[f"user_ids_{p}"] = np.array(table.ids(), dtype=np.int64)
        arrays[f"user_emb_{p}"] = table.emb[: len(table)].copy()
    if model.hidden:
        arrays["user_affine"] = model.user_affine
        arrays["user_shift"] = model.user_shift
        arrays["item_affine"] = model.item_affine
        arrays["item_shift"] = model.item_shift
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _restore_table(table, ids: np.ndarray, emb: np.ndarray, bias=None):
    table._row = {int(i): r for r, i in enumerate(ids)}
    table._n = len(ids)
    cap = max(1024, len(ids))
    table.emb = np.empty((cap, table.dim), dtype=np.float64)
    table.emb[: len(ids)] = emb
    if table.bias is not None:
        table.bias = np.zeros(cap, dtype=np.float64)
        table.bias[: len(ids)] = bias


def _load_state(path, engine: AssignmentEngine, model: TowerModel, result: RunResult) -> int:
    """Restore a sidecar; codebook state must come from the snapshot."""
    data = np.load(path)
    ids = data["engine_ids"]
    n = len(ids)
    cap = max(1024, n)
    dim = engine.codebook.dim
    engine._ids = np.empty(cap, dtype=np.int64)
    engine._emb = np.empty((cap, dim), dtype=np.float64)
    engine._bias = np.empty(cap, dtype=np.float64)
    engine._cluster = np.full(cap, -1, dtype=np.int64)
    engine._last_seen = np.zeros(cap, dtype=np.int64)
    engine._ids[:n] = ids
    engine._emb[:n] = data["engine_emb"]
    engine._bias[:n] = data["engine_bias"]
    engine._cluster[:n] = data["engine_cluster"]
    engine._last_seen[:n] = data["engine_last_seen"]
    engine._row = {int(i): r for r, i in enumerate(ids)}
    engine._n = n
    engine.impressions_by_cluster[:] = data["impressions_by_cluster"]
    engine.skipped_candidates = int(data["counters"][0])
    engine._next_snapshot = int(data["counters"][1])
    engine.codebook._state[:] = data["codebook_state"]
    engine.codebook._clock = int(data["counters"][2])
    result.events_seen = 0
    result.impressions = int(data["progress"][1])
    _restore_table(model.items, data["item_ids"], data["item_emb"], data["item_bias"])
    for p, t in enumerate(model.tasks):
        _restore_table(model.users[t], data[f"user_ids_{p}"], data[f"user_emb_{p}"])
    if model.hidden:
        model.user_affine = data["user_affine"]
        model.user_shift = data["user_shift"]
        model.item_affine = data["item_affine"]
        model.item_shift = data["item_shift"]
    return int(data["progress"][0])


# -- run artifacts -------------------------------------------------------------


def _write_run_csvs(out_dir: str, result: RunResult) -> None:
    with open(os.path.join(out_dir, "train_metrics.csv"), "w", newline="") as fh:
        if result.train_metrics:
            writer = csv.DictWriter(fh, fieldnames=list(result.train_metrics[0]))
            writer.writeheader()
            writer.writerows(result.train_metrics)
    with open(os.path.join(out_dir, "recall_curve.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["impressions", "recall"])
        writer.writerows(result.recall_curve)
    with open(
        os.path.join(out_dir, "impressions_by_cluster.csv"), "w", newline=""
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "impressions"])
        for k, n in enumerate(result.engine.impressions_by_cluster):
            writer.writerow([k, int(n)])
