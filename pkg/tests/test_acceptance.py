"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end runs use
the real server, tracker, and transports at desk scale (200 iterations,
50 ms compute floor), so this module takes around a minute.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import statistics
import subprocess
import sys
import time
from pathlib import Path

import pytest
import requests

from steerd.adapter import TransportConfig, open_backend
from steerd.harness import (
    HarnessConfig,
    ScheduledTune,
    SimParams,
    SweepElement,
    run_sweep,
    run_timeloop,
    sedimentation_dataflow,
    sweep_dataflow,
)
from steerd.kvstore import KVServer
from steerd.model import DataElement, dataflow_to_doc
from steerd.server import ProvServer
from steerd.store import ProvStore
from steerd.tracker import TrackerSession
from steerd.adapter import NoSuchParameter, SteeringCommand, publish_command

from conftest import FIXTURES, GOLDEN, StalledServer, two_stage_dataflow
from test_store import assert_impact_matches_oracle, seed_random_run

TUNE_REASON = "checking how linear iterations affects convergence"


def _register(server_url: str, df, transport: TransportConfig | None = None) -> str:
    doc = dataflow_to_doc(df)
    if transport is not None:
        doc["transport"] = transport.to_wire()
    response = requests.post(server_url + "/v1/runs", json=doc, timeout=10)
    response.raise_for_status()
    return response.json()["workflow_run_id"]


# --------------------------------------------------------------------------
# Criterion 1: fixture replay of the tunings query, byte-exact, under 1 s.
# --------------------------------------------------------------------------

def test_criterion_1_fixture_replay_tunings_table(tmp_path):
    store = ProvStore(str(tmp_path / "fixture.db"))
    with open(FIXTURES / "six_tunings.ndjson", encoding="utf-8") as fp:
        store.load_ndjson(fp)
    server = ProvServer(store, "127.0.0.1:0").start()
    try:
        steerctl = shutil.which("steerctl")
        argv = [steerctl] if steerctl else [sys.executable, "-m", "steerd.cli"]
        env = dict(os.environ, STEERD_SERVER_URL=server.url, HOME=str(tmp_path))
        t0 = time.perf_counter()
        proc = subprocess.run(
            argv + ["tunings", "--user", "Bob"],
            env=env,
            capture_output=True,
            timeout=10,
        )
        wall = time.perf_counter() - t0
        assert proc.returncode == 0, proc.stderr
        golden = (GOLDEN / "tunings_bob.txt").read_bytes()
        assert proc.stdout == golden
        assert wall < 1.0, f"took {wall:.2f}s"
    finally:
        server.stop()


# --------------------------------------------------------------------------
# Criterion 2: impact query equals brute force on randomized runs.
# --------------------------------------------------------------------------

def test_criterion_2_impact_oracle_equivalence():
    seed = 20180613
    for case in range(20):
        store = ProvStore()
        import random

        seed_random_run(store, "r", random.Random(seed + case))
        assert_impact_matches_oracle(
            store, "r", window=10, metrics=["num_elements", "linear_iters"]
        )
        store.close()


# --------------------------------------------------------------------------
# Criteria 3-5 share three full 200-iteration steered runs (one per
# transport) plus one stalled-server run.
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def kv_service():
    server = KVServer("127.0.0.1:0").start()
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory, kv_service):
    results = {}
    for mode in ("file", "msg", "kv"):
        tmp = tmp_path_factory.mktemp(f"e2e-{mode}")
        store = ProvStore(str(tmp / "prov.db"))
        server = ProvServer(store, "127.0.0.1:0").start()
        if mode == "file":
            transport = TransportConfig(mode="file", steer_file=str(tmp / "steer.json"))
        elif mode == "msg":
            transport = TransportConfig(mode="msg", steer_listen="127.0.0.1:0")
        else:
            transport = TransportConfig(
                mode="kv", kv_endpoint=kv_service.address, kv_namespace=f"e2e-{mode}"
            )
        run_id = _register(server.url, sedimentation_dataflow(), transport)
        session = TrackerSession(
            run_id, sedimentation_dataflow(), server_url=server.url, user="Bob"
        )
        config = HarnessConfig(
            params=SimParams(n_time_steps=200, compute_floor_ms=50.0),
            tune_schedule=[
                ScheduledTune(
                    eta={"flow_initial_linear_solver_tolerance": 1e-6},
                    at_iteration=50,
                    reason=TUNE_REASON,
                )
            ],
        )
        t0 = time.perf_counter()
        state = run_timeloop(config, session, transport)
        wall = time.perf_counter() - t0
        stats = session.close()
        requests.post(server.url + f"/v1/runs/{run_id}/close", timeout=10).raise_for_status()
        results[mode] = {
            "server": server,
            "store": store,
            "run_id": run_id,
            "wall": wall,
            "state": state,
            "stats": stats,
        }
    yield results
    for r in results.values():
        r["server"].stop()


def test_criterion_3_end_to_end_steering_all_transports(e2e_runs):
    applied_etas = {}
    for mode, r in e2e_runs.items():
        assert r["wall"] < 60.0, f"{mode} run took {r['wall']:.1f}s"
        assert r["stats"]["dropped"] == 0
        store, run_id = r["store"], r["run_id"]
        series = store.query_series(run_id, "linear_iters")
        by_step = dict(series.points)
        assert len(by_step) == 200
        for t in range(1, 51):
            assert by_step[t] == 108.0, f"{mode}: iteration {t}"
        first_low = min(t for t, v in by_step.items() if v == 80.0)
        assert first_low <= 52, f"{mode}: drop landed at {first_low}"
        for t in range(first_low, 201):
            assert by_step[t] == 80.0, f"{mode}: iteration {t}"
        tunings = store.query_tunings(run_id)
        assert len(tunings) == 1
        row = tunings[0]
        assert row.attribute == "flow_initial_linear_solver_tolerance"
        assert row.old_value == 1e-8 and row.new_value == 1e-6
        assert row.t_step is not None and 51 <= row.t_step <= 52
        tuning_rows = store.fetch_all("ParameterTuning")
        assert len(tuning_rows) == 1
        assert tuning_rows[0]["iteration_data"] is not None
        # provenance completeness: one instrumented transformation, one task
        # per iteration, and every task finished
        tasks = store.fetch_all("Task")
        assert len(tasks) == 200
        assert all(t["status"] == "finished" for t in tasks)
        # the influenced-task set equals the tasks running at applied_at,
        # replayed from the recorded wall intervals
        applied_at = tuning_rows[0]["applied_at"]
        running_then = {
            t["task_id"]
            for t in tasks
            if t["wall_start"] <= applied_at
            and (t["wall_end"] is None or t["wall_end"] >= applied_at)
        }
        influenced = {r["task_id"] for r in store.fetch_all("InfluencedTask")}
        assert influenced == running_then and len(influenced) == 1
        applied_etas[mode] = sorted(
            (t["attribute_name"], json_dump(t["new_value"]), t["old_value"])
            for t in store.fetch_all("ParameterTuned")
        )
    # transport equivalence: identical applied tunings across the three modes
    assert applied_etas["file"] == applied_etas["msg"] == applied_etas["kv"]


def json_dump(value):
    return json.dumps(value)


def test_criterion_4_overhead_identity_and_asymptotics(e2e_runs, tmp_path):
    r = e2e_runs["file"]
    report = r["store"].overhead_report(r["run_id"])
    # decomposition identity: components sum exactly to the run total
    assert sum(report.seconds.values()) == report.total_seconds
    assert abs(sum(report.percent.values()) - 100.0) <= 0.01
    steer_share = (
        report.seconds["prov"] + report.seconds["s_point"] + report.seconds["s_action"]
    ) / report.total_seconds
    assert steer_share < 0.05, f"tracking share {steer_share:.4%}"

    # asymptotics: the share shrinks as the compute floor doubles; these runs
    # have no tunes, so s_action stays exactly zero
    shares = []
    for floor in (50.0, 100.0, 200.0):
        store = ProvStore(str(tmp_path / f"floor-{int(floor)}.db"))
        server = ProvServer(store, "127.0.0.1:0").start()
        try:
            transport = TransportConfig(
                mode="file", steer_file=str(tmp_path / f"steer-{int(floor)}.json")
            )
            run_id = _register(server.url, sedimentation_dataflow(), transport)
            session = TrackerSession(
                run_id, sedimentation_dataflow(), server_url=server.url, user="Bob"
            )
            config = HarnessConfig(params=SimParams(n_time_steps=40, compute_floor_ms=floor))
            run_timeloop(config, session, transport)
            session.close()
            report = store.overhead_report(run_id)
            assert report.seconds["s_action"] == 0.0
            shares.append(
                (report.seconds["prov"] + report.seconds["s_point"] + report.seconds["s_action"])
                / report.total_seconds
            )
        finally:
            server.stop()
    assert shares[0] > shares[1] > shares[2], shares


def test_criterion_5_hot_path_asynchrony(e2e_runs, tmp_path):
    healthy_per_iteration = e2e_runs["file"]["wall"] / 200
    stalled = StalledServer()
    try:
        session = TrackerSession(
            "run-stalled",
            sedimentation_dataflow(),
            server_url=stalled.url,
            user="Bob",
            send_timeout=(0.5, 1.0),
        )
        transport = TransportConfig(mode="file", steer_file=str(tmp_path / "steer.json"))
        config = HarnessConfig(params=SimParams(n_time_steps=200, compute_floor_ms=50.0))
        t0 = time.perf_counter()
        run_timeloop(config, session, transport)
        wall = time.perf_counter() - t0
        stats = session.close(flush_timeout=1.0)
    finally:
        stalled.close()
    stalled_per_iteration = wall / 200
    drift = abs(stalled_per_iteration - healthy_per_iteration) / healthy_per_iteration
    assert drift <= 0.10, (
        f"stalled {stalled_per_iteration * 1000:.2f} ms/iter vs healthy "
        f"{healthy_per_iteration * 1000:.2f} ms/iter"
    )
    assert stats["dropped"] > 0
    print(f"\n  dropped-message counter: {stats['dropped']}")

    # median idle steering-point check under 1 ms over 1000 checks
    steer_file = tmp_path / "idle.json"
    probe_cfg = TransportConfig(mode="file", steer_file=str(steer_file))
    backend = open_backend(probe_cfg)
    publish_command(
        SteeringCommand(
            action_id="warm", workflow_run_id="r", dataset_tag="I_Iteration_Params",
            eta={"dt": 0.01}, user="Bob", issued_at=1,
        ),
        probe_cfg,
    )
    idle_session = TrackerSession(
        "run-idle", sedimentation_dataflow(), user="Bob", sink=lambda m: None,
        adapter_backend=backend,
    )
    element = DataElement("I_Iteration_Params-e1", SimParams(n_time_steps=1).to_values())
    idle_session.steering_point_check("I_Iteration_Params", element)  # consume warm-up
    costs = []
    for _ in range(1000):
        t0 = time.perf_counter()
        got = idle_session.steering_point_check("I_Iteration_Params", element)
        costs.append((time.perf_counter() - t0) * 1000.0)
        assert got == []
    backend.close()
    median = statistics.median(costs)
    assert median < 1.0, f"median idle check {median:.3f} ms"
    print(f"  median idle steering check: {median * 1000:.1f} us")


# --------------------------------------------------------------------------
# Criterion 6: sweep-mode tuning safety.
# --------------------------------------------------------------------------

def test_criterion_6_sweep_tuning_safety(tmp_path):
    bands = "jhkh" + "jkjhkj"  # 3 of the final six carry band=j
    elements = [
        SweepElement("2MASS", band, f"field-{i}", 1.0, 1.0, f"/data/{i}")
        for i, band in enumerate(bands, start=1)
    ]
    store = ProvStore(str(tmp_path / "sweep.db"))
    server = ProvServer(store, "127.0.0.1:0").start()
    try:
        transport = TransportConfig(mode="file", steer_file=str(tmp_path / "steer.json"))
        run_id = _register(server.url, sweep_dataflow(), transport)
        session = TrackerSession(run_id, sweep_dataflow(), server_url=server.url, user="Bob")
        config = HarnessConfig(
            params=SimParams(n_time_steps=1, compute_floor_ms=0.0),
            sweep_elements=elements,
            sweep_floor_ms=0.5,
            tune_schedule=[
                ScheduledTune(
                    eta={"width": 3.0, "height": 3.0},
                    after_processed=4,
                    criteria=[{"attribute": "band", "op": "=", "value": "j"}],
                )
            ],
        )
        results = run_sweep(elements, config, session, transport)
        session.close()
        requests.post(server.url + f"/v1/runs/{run_id}/close", timeout=10)

        # brute-force enumeration: pending-at-submit elements with band=j
        expected = {
            f"I_List_FITS-e{i}" for i in range(5, 11) if bands[i - 1] == "j"
        }
        assert len(expected) == 3
        modified = {m["element_id"] for m in store.fetch_all("ModifiedDataElement")}
        assert modified == expected

        # the four processed elements kept their recorded inputs
        recorded = {}
        tasks = {t["task_id"]: t for t in store.fetch_all("Task")}
        for d in store.fetch_all("Dataset"):
            if d["dataset_tag"] == "I_List_FITS":
                recorded.setdefault(d["element_id"], []).append(d)
        for i in range(1, 5):
            for row in recorded[f"I_List_FITS-e{i}"]:
                assert row["values"]["width"] == 1.0
        for element_id in expected:
            for row in recorded[element_id]:
                assert row["values"]["width"] == 3.0

        # no modified element's chain started before the tune was applied
        applied_at = store.fetch_all("ParameterTuning")[0]["applied_at"]
        for element_id in modified:
            starts = [
                tasks[d["task_id"]]["wall_start"] for d in recorded[element_id]
            ]
            assert min(starts) >= applied_at
        assert len(results) == 10
    finally:
        server.stop()


# --------------------------------------------------------------------------
# Criterion 7: tune-capture unit suite.
# --------------------------------------------------------------------------

def test_criterion_7_tune_capture_suite(tmp_path):
    messages: list[dict] = []
    cfg = TransportConfig(mode="file", steer_file=str(tmp_path / "steer.json"))
    backend = open_backend(cfg)
    session = TrackerSession(
        "run-7", sedimentation_dataflow(), user="Bob", sink=messages.append,
        adapter_backend=backend,
    )
    element = DataElement(
        "I_Iteration_Params-e1", SimParams(n_time_steps=9).to_values()
    )

    def submit(action_id, eta, dataset="I_Iteration_Params"):
        publish_command(
            SteeringCommand(
                action_id=action_id, workflow_run_id="run-7", dataset_tag=dataset,
                eta=eta, user="Bob", issued_at=1,
            ),
            cfg,
        )

    # keys(theta) == keys(eta) for every capture
    for i, eta in enumerate(
        (
            {"flow_initial_linear_solver_tolerance": 1e-6},
            {"max_linear_iterations": 300, "amr/c_fraction": 0.05},
            {"dt": 0.02, "refine_rate": 0.01, "coarsen_gain": 0.5},
        )
    ):
        submit(f"k{i}", eta)
        records = session.steering_point_check(
            "I_Iteration_Params", element, iteration_data={"t_step": i + 1}
        )
        assert len(records) == 1
        assert set(records[0].theta) == set(records[0].eta) == set(eta)
        element = element.with_values(records[0].eta)

    # d captured iff a tuned attribute is a loop attribute: every
    # I_Iteration_Params attribute is, so d must be present...
    submit("d1", {"tmax": 2.0})
    records = session.steering_point_check(
        "I_Iteration_Params", element, iteration_data={"t_step": 9, "time": 0.09}
    )
    assert records[0].iteration_data == {"t_step": 9, "time": 0.09}
    backend.close()

    # ...and the sweep parameters are not, so d must be absent there.
    sweep_backend = open_backend(
        TransportConfig(mode="file", steer_file=str(tmp_path / "sweep-steer.json"))
    )
    sweep_session = TrackerSession(
        "run-7s", sweep_dataflow(), user="Bob", sink=messages.append,
        adapter_backend=sweep_backend,
    )
    publish_command(
        SteeringCommand(
            action_id="d2", workflow_run_id="run-7s", dataset_tag="I_List_FITS",
            eta={"width": 2.0}, user="Bob", issued_at=1,
        ),
        sweep_backend.cfg,
    )
    sweep_element = DataElement(
        "I_List_FITS-e1",
        {"survey": "2MASS", "band": "j", "location": "x", "width": 1.0,
         "height": 1.0, "fits_dir": "/d"},
    )
    records = sweep_session.steering_point_check(
        "I_List_FITS", sweep_element, iteration_data={"t_step": 3}
    )
    assert records[0].iteration_data is None

    # unknown key: NoSuchParameter, nothing applied or emitted
    publish_command(
        SteeringCommand(
            action_id="bad", workflow_run_id="run-7s", dataset_tag="I_List_FITS",
            eta={"ghost": 1}, user="Bob", issued_at=2,
        ),
        sweep_backend.cfg,
    )
    emitted_before = len(messages)
    with pytest.raises(NoSuchParameter):
        sweep_session.steering_point_check("I_List_FITS", sweep_element)
    assert len(messages) == emitted_before

    # tuning to the same value is still a tracked action
    publish_command(
        SteeringCommand(
            action_id="same", workflow_run_id="run-7s", dataset_tag="I_List_FITS",
            eta={"width": 1.0}, user="Bob", issued_at=3,
        ),
        sweep_backend.cfg,
    )
    records = sweep_session.steering_point_check("I_List_FITS", sweep_element)
    assert records[0].theta == {"width": 1.0} and records[0].eta == {"width": 1.0}
    sweep_backend.close()


# --------------------------------------------------------------------------
# Criterion 8: crash safety — acked messages survive a server kill.
# --------------------------------------------------------------------------

def _spawn_server(store_path: str, tmp_home: Path):
    env = dict(os.environ, HOME=str(tmp_home))
    proc = subprocess.Popen(
        [sys.executable, "-m", "steerd.server", "--listen", "127.0.0.1:0",
         "--store", store_path],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
        env=env,
    )
    line = proc.stdout.readline()
    match = re.search(r"http://[\d.]+:\d+", line)
    assert match, f"no listen line: {line!r}"
    return proc, match.group(0)


def test_criterion_8_crash_safety(tmp_path):
    store_path = str(tmp_path / "crash.db")
    proc, url = _spawn_server(store_path, tmp_path)
    try:
        run_id = _register(url, two_stage_dataflow())
        messages = []
        seq = 0
        for i in range(6):
            seq += 1
            messages.append(
                {
                    "kind": "task_begin",
                    "client_seq": seq,
                    "payload": {
                        "task_id": f"t{i}",
                        "workflow_run_id": run_id,
                        "transformation_tag": "prepare",
                        "wall_start": 1_700_000_000_000_000 + i,
                        "inputs": [
                            {"dataset_tag": "I_Raw", "element_id": f"e{i}",
                             "values": {"path": f"/in/{i}", "threshold": i}}
                        ],
                    },
                }
            )
        for i in range(5):
            seq += 1
            messages.append(
                {
                    "kind": "task_end",
                    "client_seq": seq,
                    "payload": {
                        "task_id": f"t{i}",
                        "wall_end": 1_700_000_000_100_000 + i,
                        "outputs": [],
                        "perf": {"comp_ms": 10.0, "prov_ms": 0.1, "ext_ms": 0.0,
                                 "s_point_ms": 0.0, "s_action_ms": 0.0},
                    },
                }
            )
        seq += 1
        messages.append(
            {
                "kind": "steer_intent",
                "client_seq": seq,
                "payload": {
                    "action_id": "intent-crash",
                    "workflow_run_id": run_id,
                    "user": "Bob",
                    "dataset_tag": "I_Raw",
                    "eta": {"threshold": 99},
                    "issued_at": 1_700_000_000_000_000,
                },
            }
        )
        body = "".join(json.dumps(m) + "\n" for m in messages)
        response = requests.post(url + "/v1/ingest", data=body.encode(), timeout=10)
        acks = [json.loads(line) for line in response.text.splitlines()]
        assert len(acks) == len(messages)
        assert all(a["status"] == "accepted" for a in acks)
    finally:
        proc.kill()
        proc.wait(timeout=10)

    # restart on the same store: every acked message must be present
    proc, url = _spawn_server(store_path, tmp_path)
    try:
        verify = ProvStore(store_path)
        tasks = verify.fetch_all("Task")
        assert len(tasks) == 6
        assert sum(1 for t in tasks if t["status"] == "finished") == 5
        assert len(verify.fetch_all("Performance")) == 5
        assert len(verify.fetch_all("Dataset")) == 6
        intents = verify.fetch_all("SteerIntent")
        assert [i["action_id"] for i in intents] == ["intent-crash"]
        verify.close()

        response = requests.post(url + f"/v1/runs/{run_id}/close", timeout=10)
        body = response.json()
        assert body["dangling_tunings"] == 1
        assert body["dangling_tasks"] == 1  # t5 never ended
        verify = ProvStore(store_path)
        dangling = [
            t for t in verify.fetch_all("ParameterTuning") if t["dangling"]
        ]
        assert [t["tuning_id"] for t in dangling] == ["intent-crash"]
        verify.close()
    finally:
        proc.kill()
        proc.wait(timeout=10)
