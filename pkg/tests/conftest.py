"""Shared fixtures: stores, in-process servers, and the tunings fixture."""

from __future__ import annotations

import socket
import threading
from pathlib import Path

import pytest

from steerd.model import (
    AttributeDef,
    DataDependency,
    DataflowDef,
    DatasetSchema,
    DataTransformationDef,
)
from steerd.server import ProvServer
from steerd.store import ProvStore

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"
FIXTURE_RUN_ID = "lock-exchange-01"


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    verdict = "PASS" if report.passed else "FAIL"
    print(f"\nACCEPTANCE {verdict} {name}", flush=True)


@pytest.fixture
def store():
    s = ProvStore()
    yield s
    s.close()


@pytest.fixture
def fixture_store():
    s = ProvStore()
    with open(FIXTURES / "six_tunings.ndjson", encoding="utf-8") as fp:
        s.load_ndjson(fp)
    yield s
    s.close()


@pytest.fixture
def live_server():
    """In-process server over a fresh in-memory store."""
    server = ProvServer(ProvStore(), listen="127.0.0.1:0").start()
    yield server
    server.stop()


@pytest.fixture
def fixture_server(tmp_path):
    """In-process server over a file store preloaded with the tunings fixture."""
    store = ProvStore(str(tmp_path / "fixture.db"))
    with open(FIXTURES / "six_tunings.ndjson", encoding="utf-8") as fp:
        store.load_ndjson(fp)
    server = ProvServer(store, listen="127.0.0.1:0").start()
    yield server
    server.stop()


def two_stage_dataflow() -> DataflowDef:
    """Small well-formed dataflow used across model and server tests."""
    return DataflowDef(
        tag="two-stage",
        transformations=(
            DataTransformationDef("prepare", ("I_Raw",), ("O_Clean",)),
            DataTransformationDef("analyze", ("O_Clean",), ("O_Result",)),
        ),
        datasets=(
            DatasetSchema(
                "I_Raw",
                "input",
                (
                    AttributeDef("path", "textual", "F_I"),
                    AttributeDef("threshold", "numeric", "P_I"),
                ),
            ),
            DatasetSchema(
                "O_Clean", "output", (AttributeDef("rows", "numeric", "C_O"),)
            ),
            DatasetSchema(
                "O_Result", "output", (AttributeDef("score", "numeric", "C_O"),)
            ),
        ),
        dependencies=(DataDependency(frozenset(), "prepare", "analyze"),),
        execution_model="acyclic",
    )


class StalledServer:
    """Accepts connections and never reads: the pathological provenance server."""

    def __init__(self) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(("127.0.0.1", 0))
        self._sock.listen(64)
        self._conns: list[socket.socket] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._sock.getsockname()
        return f"http://{host}:{port}"

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
                self._conns.append(conn)
            except socket.timeout:
                continue
            except OSError:
                return

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2)
        for conn in self._conns:
            try:
                conn.close()
            except OSError:
                pass
        self._sock.close()
