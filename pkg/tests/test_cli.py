"""CLI tests: gen/train/serve/eval wiring, reproducibility, exit codes."""

import csv
import json
import os
import socket
import subprocess
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from streamvq import (
    QueryServer,
    RunConfig,
    read_events,
    read_snapshot_file,
    write_snapshot_file,
)
from streamvq.cli import main
from streamvq.snapshot import save_snapshot

TINY = dict(
    n_items=300,
    n_users=30,
    n_groups=6,
    dim=8,
    K=16,
    n_events=1200,
    candidate_ratio=0.25,
    batch_size=64,
    snapshot_cadence=600,
    seed=3,
)


def write_config(tmp_path, name="config.json", **overrides):
    merged = dict(TINY)
    merged.update(overrides)
    path = tmp_path / name
    RunConfig(**merged).save(path)
    return str(path)


def test_gen_writes_matching_deterministic_files(tmp_path):
    cfg = write_config(tmp_path)
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["gen", "--config", cfg, "--out", out_a]) == 0
    assert main(["gen", "--config", cfg, "--out", out_b]) == 0
    events_a = os.path.join(out_a, "events.jsonl")
    events = list(read_events(events_a))
    impressions = [ev for ev in events if ev.stream == "impression"]
    assert len(impressions) == TINY["n_events"]
    assert len(events) == TINY["n_events"] + int(TINY["n_events"] * 0.25)
    # byte-identical outputs for the same seed
    for name in ("events.jsonl", "corpus.npz", "config.json"):
        with open(os.path.join(out_a, name), "rb") as fa, open(
            os.path.join(out_b, name), "rb"
        ) as fb:
            assert fa.read() == fb.read()


def test_gen_round_trips_through_the_reader(tmp_path):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "g")
    main(["gen", "--config", cfg, "--out", out])
    path = os.path.join(out, "events.jsonl")
    events = list(read_events(path))
    from streamvq.events import event_to_json

    with open(path) as fh:
        raw = [line.strip() for line in fh if line.strip()]
    assert [event_to_json(ev) for ev in events] == raw


def test_train_zero_events_dumps_initial_snapshot_only(tmp_path):
    cfg = write_config(tmp_path, n_events=0)
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg, "--out", out]) == 0
    snaps = sorted(os.listdir(os.path.join(out, "snapshots")))
    assert [s for s in snaps if s.endswith(".svq")] == ["snap_000000.svq"]


def test_train_snapshot_count_and_flag_overrides(tmp_path):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg, "--out", out, "--snapshot-cadence", "500"]) == 0
    snaps = [s for s in os.listdir(os.path.join(out, "snapshots")) if s.endswith(".svq")]
    # ceil(1200 / 500) = 3 crossings-or-final, plus the initial dump
    assert len(snaps) == 4
    echoed = RunConfig.load(os.path.join(out, "config.json"))
    assert echoed.snapshot_cadence == 500  # flags win and are echoed


def test_train_from_generated_events_file(tmp_path):
    cfg = write_config(tmp_path)
    gen_out = str(tmp_path / "gen")
    main(["gen", "--config", cfg, "--out", gen_out])
    run_out = str(tmp_path / "run")
    events_path = os.path.join(gen_out, "events.jsonl")
    assert (
        main(["train", "--config", cfg, "--out", run_out, "--events", events_path]) == 0
    )
    snap = read_snapshot_file(
        sorted(
            os.path.join(run_out, "snapshots", f)
            for f in os.listdir(os.path.join(run_out, "snapshots"))
            if f.endswith(".svq")
        )[-1]
    )
    assert snap.num_items > 0


def test_train_resume_matches_full_run(tmp_path):
    cfg = write_config(tmp_path, n_events=1800, snapshot_cadence=600)
    gen_out = str(tmp_path / "gen")
    main(["gen", "--config", cfg, "--out", gen_out, "--n-events", "1800"])
    events = os.path.join(gen_out, "events.jsonl")
    full = str(tmp_path / "full")
    main(["train", "--config", cfg, "--out", full, "--events", events])
    resumed = str(tmp_path / "resumed")
    assert (
        main(
            [
                "train",
                "--config",
                cfg,
                "--out",
                resumed,
                "--events",
                events,
                "--resume-snapshot",
                os.path.join(full, "snapshots", "snap_000001.svq"),
                "--resume-state",
                os.path.join(full, "snapshots", "state_000001.npz"),
            ]
        )
        == 0
    )
    last = "snap_000003.svq"
    with open(os.path.join(full, "snapshots", last), "rb") as fa, open(
        os.path.join(resumed, "snapshots", last), "rb"
    ) as fb:
        assert fa.read() == fb.read()


def test_missing_events_file_is_an_error(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "x"),
                 "--events", str(tmp_path / "nope.jsonl")]) == 2


# -- serve ----------------------------------------------------------------------


def run_training(tmp_path, **overrides):
    cfg = write_config(tmp_path, **overrides)
    out = str(tmp_path / "run")
    main(["train", "--config", cfg, "--out", out])
    snaps = sorted(
        os.path.join(out, "snapshots", f)
        for f in os.listdir(os.path.join(out, "snapshots"))
        if f.endswith(".svq")
    )
    return cfg, out, snaps[-1]


def ask(sock_file, request):
    sock_file.write((json.dumps(request) + "\n").encode())
    sock_file.flush()


def test_query_server_concurrent_identical_queries(tmp_path):
    cfg, out, snap_path = run_training(tmp_path)
    snap = read_snapshot_file(snap_path)
    server = QueryServer(snapshot=snap, defaults={"probe": 8, "S": 10, "l": 4})
    server.start()
    try:
        host, port = server.address
        request = json.dumps({"u": [0.1] * 8, "probe": 8, "S": 10, "l": 4}) + "\n"

        def one_query(_):
            with socket.create_connection((host, port)) as s:
                s.sendall(request.encode())
                with s.makefile("rb") as fh:
                    return fh.readline()

        with ThreadPoolExecutor(max_workers=32) as pool:
            responses = list(pool.map(one_query, range(1000)))
        assert len(set(responses)) == 1
        body = json.loads(responses[0])
        assert body["snapshot"] == snap.version
        assert len(body["items"]) == 10
    finally:
        server.shutdown()


def test_query_server_no_snapshot_and_reload(tmp_path):
    cfg, out, snap_path = run_training(tmp_path)
    server = QueryServer(snapshot=None)
    server.start()
    try:
        host, port = server.address
        with socket.create_connection((host, port)) as s:
            with s.makefile("rwb") as fh:
                ask(fh, {"u": [0.0] * 8})
                assert json.loads(fh.readline()) == {"error": "no snapshot"}
                # reload mid-connection: later queries cite the new snapshot
                server.set_snapshot(read_snapshot_file(snap_path))
                ask(fh, {"u": [0.0] * 8, "S": 5})
                body = json.loads(fh.readline())
                assert body["snapshot"] == read_snapshot_file(snap_path).version
    finally:
        server.shutdown()


def test_query_server_error_paths(tmp_path):
    cfg, out, snap_path = run_training(tmp_path)
    server = QueryServer(snapshot=read_snapshot_file(snap_path))
    server.start()
    try:
        host, port = server.address
        with socket.create_connection((host, port)) as s:
            with s.makefile("rwb") as fh:
                ask(fh, {"user": 123456})  # no state sidecar: unknown user
                assert "unknown user" in json.loads(fh.readline())["error"]
                fh.write(b"this is not json\n")
                fh.flush()
                assert "bad request" in json.loads(fh.readline())["error"]
                ask(fh, {})  # neither user nor raw vector
                assert "bad request" in json.loads(fh.readline())["error"]
    finally:
        server.shutdown()


def test_serve_stdin_subprocess_with_user_lookup(tmp_path):
    cfg, out, snap_path = run_training(tmp_path)
    queries = [
        {"u": [0.05] * 8, "S": 5},
        {"user": 1, "S": 5},  # resolved through the state sidecar
        {"user": 987654},
    ]
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "streamvq.cli",
            "serve",
            "--config",
            cfg,
            "--run",
            out,
            "--stdin",
        ],
        input="\n".join(json.dumps(q) for q in queries) + "\n",
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    lines = [json.loads(l) for l in proc.stdout.strip().splitlines()]
    assert len(lines) == 3
    assert len(lines[0]["items"]) == 5
    assert len(lines[1]["items"]) == 5
    assert "unknown user" in lines[2]["error"]


def test_serve_missing_snapshot_file_is_an_error(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["serve", "--config", cfg, "--snapshot", str(tmp_path / "no.svq"),
                 "--stdin"]) == 2


# -- eval -----------------------------------------------------------------------


def fake_run_dir(tmp_path, name, *, beta, disturbance, counts, curve=None, drift_at=None):
    run = tmp_path / name
    (run / "snapshots").mkdir(parents=True)
    config = RunConfig(
        **{**TINY, "beta": beta, "disturbance": disturbance, "drift_at": drift_at}
    )
    config.save(run / "config.json")
    with open(run / "impressions_by_cluster.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "impressions"])
        for k, n in enumerate(counts):
            writer.writerow([k, n])
    if curve is not None:
        with open(run / "recall_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["impressions", "recall"])
            writer.writerows(curve)
    return str(run)


def test_eval_reports_metrics_and_integrity(tmp_path, capsys):
    cfg, out, snap_path = run_training(tmp_path)
    report = str(tmp_path / "report.csv")
    code = main(
        [
            "eval",
            "--run",
            out,
            "--report",
            report,
            "--histogram",
            "--oracle-self-check",
            "--assert-snapshot-integrity",
        ]
    )
    assert code == 0
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    metrics = {r["metric"] for r in rows}
    assert {"impression_entropy", "max_impression_share", "item_entropy"} <= metrics


def test_eval_detects_broken_snapshot(tmp_path):
    cfg, out, snap_path = run_training(tmp_path)
    snap = read_snapshot_file(snap_path)
    snap.item_ids[1] = snap.item_ids[0]  # duplicate item: exclusivity broken
    write_snapshot_file(snap, snap_path)
    assert main(["eval", "--run", out, "--assert-snapshot-integrity"]) == 1


def test_eval_balance_ordering_assertion(tmp_path):
    uniform = [10] * 16
    skewed = [1000] + [2] * 15
    on = fake_run_dir(tmp_path, "on", beta=0.5, disturbance=True, counts=uniform)
    off = fake_run_dir(tmp_path, "off", beta=0.0, disturbance=False, counts=skewed)
    assert main(["eval", "--run", on, "--run", off, "--assert-balance-ordering"]) == 0
    # flipped data must fail
    on2 = fake_run_dir(tmp_path, "on2", beta=0.5, disturbance=True, counts=skewed)
    off2 = fake_run_dir(tmp_path, "off2", beta=0.0, disturbance=False, counts=uniform)
    assert main(["eval", "--run", on2, "--run", off2, "--assert-balance-ordering"]) == 1


def test_eval_immediacy_ordering_assertion(tmp_path):
    fast = [(1000, 0.9), (2000, 0.4), (3000, 0.9)]
    slow = [(1000, 0.9), (2000, 0.4), (3000, 0.5), (4000, 0.9)]
    on = fake_run_dir(
        tmp_path, "con", beta=0.5, disturbance=True, counts=[1] * 4,
        curve=fast, drift_at=1500,
    )
    off_dir = tmp_path / "coff"
    (off_dir / "snapshots").mkdir(parents=True)
    config = RunConfig(**{**TINY, "candidate_stream": False, "drift_at": 1500})
    config.save(off_dir / "config.json")
    with open(off_dir / "impressions_by_cluster.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "impressions"])
        for k in range(4):
            writer.writerow([k, 1])
    with open(off_dir / "recall_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["impressions", "recall"])
        writer.writerows(slow)
    assert (
        main(["eval", "--run", on, "--run", str(off_dir), "--assert-immediacy-ordering"])
        == 0
    )


def test_eval_without_runs_is_usage_error(tmp_path):
    assert main(["eval"]) == 2
