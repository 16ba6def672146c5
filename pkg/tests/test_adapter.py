"""Adapter transports: publication, polling, consumption, and apply_tune."""

from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from steerd.adapter import (
    DuplicateActionId,
    NoSuchParameter,
    SteeringCommand,
    TransportConfig,
    TransportError,
    apply_tune,
    open_backend,
    publish_command,
)
from steerd.kvstore import KVClient, KVServer
from steerd.model import Conjunct, DataElement, ElementCriteria


def _cmd(i: int, dataset="I_Iteration_Params", eta=None, user="Bob", criteria=None) -> SteeringCommand:
    return SteeringCommand(
        action_id=f"a{i}",
        workflow_run_id="r1",
        dataset_tag=dataset,
        eta=eta or {"tol": 10.0 ** -i},
        user=user,
        criteria=criteria,
        issued_at=1_000_000 + i,
    )


class TestApplyTune:
    def test_tolerance_update(self):
        element = DataElement("e1", {"tol": 1e-8})
        updated, theta = apply_tune(_cmd(1, eta={"tol": 1e-6}), element)
        assert updated.values == {"tol": 1e-6}
        assert theta == {"tol": 1e-8}
        assert element.values == {"tol": 1e-8}  # input untouched

    def test_same_value_tune(self):
        element = DataElement("e1", {"tol": 5})
        updated, theta = apply_tune(_cmd(1, eta={"tol": 5}), element)
        assert updated.values == element.values
        assert theta == {"tol": 5}

    def test_unknown_parameter(self):
        element = DataElement("e1", {"tol": 1e-8})
        with pytest.raises(NoSuchParameter):
            apply_tune(_cmd(1, eta={"ghost": 1}), element)

    @given(
        st.dictionaries(
            st.sampled_from(list("abcdef")), st.floats(allow_nan=False, allow_infinity=False),
            min_size=1, max_size=6,
        ),
        st.dictionaries(
            st.sampled_from(list("abc")), st.floats(allow_nan=False, allow_infinity=False),
            min_size=1, max_size=3,
        ),
    )
    def test_apply_is_pure_and_idempotent(self, base, eta):
        values = dict(base)
        values.update({k: 0.0 for k in eta})
        element = DataElement("e1", values)
        cmd = _cmd(1, eta=eta)
        once, theta = apply_tune(cmd, element)
        twice, theta2 = apply_tune(cmd, once)
        assert once.values == twice.values
        assert set(theta) == set(eta)
        assert theta2 == {k: once.values[k] for k in eta}
        untouched = {k: v for k, v in element.values.items() if k not in eta}
        assert {k: once.values[k] for k in untouched} == untouched


class TestFileTransport:
    def test_submit_bumps_version_and_appends(self, tmp_path):
        path = str(tmp_path / "steering.json")
        cfg = TransportConfig(mode="file", steer_file=path)
        publish_command(_cmd(1), cfg)
        doc = json.loads(open(path).read())
        assert doc["version"] == 1 and len(doc["pending"]) == 1
        publish_command(_cmd(2), cfg)
        doc = json.loads(open(path).read())
        assert doc["version"] == 2
        assert [c["action_id"] for c in doc["pending"]] == ["a1", "a2"]

    def test_duplicate_action_id(self, tmp_path):
        cfg = TransportConfig(mode="file", steer_file=str(tmp_path / "s.json"))
        publish_command(_cmd(1), cfg)
        with pytest.raises(DuplicateActionId):
            publish_command(_cmd(1), cfg)

    def test_poll_returns_issue_order_and_consumes(self, tmp_path):
        cfg = TransportConfig(mode="file", steer_file=str(tmp_path / "s.json"))
        backend = open_backend(cfg)
        assert backend.poll("I_Iteration_Params") == []
        publish_command(_cmd(1), cfg)
        publish_command(_cmd(2), cfg)
        got = backend.poll("I_Iteration_Params")
        assert [c.action_id for c in got] == ["a1", "a2"]
        assert backend.poll("I_Iteration_Params") == []
        backend.close()

    def test_unchanged_file_is_not_reparsed(self, tmp_path, monkeypatch):
        cfg = TransportConfig(mode="file", steer_file=str(tmp_path / "s.json"))
        publish_command(_cmd(1), cfg)
        backend = open_backend(cfg)
        assert len(backend.poll("I_Iteration_Params")) == 1
        opened = []
        import steerd.adapter as adapter_mod

        original = adapter_mod._read_steer_doc
        monkeypatch.setattr(
            adapter_mod, "_read_steer_doc", lambda p: opened.append(p) or original(p)
        )
        for _ in range(20):
            assert backend.poll("I_Iteration_Params") == []
        assert opened == []  # stat probe only
        backend.close()

    def test_consumption_survives_restart(self, tmp_path):
        cfg = TransportConfig(mode="file", steer_file=str(tmp_path / "s.json"))
        publish_command(_cmd(1), cfg)
        backend = open_backend(cfg)
        assert [c.action_id for c in backend.poll("I_Iteration_Params")] == ["a1"]
        backend.close()
        publish_command(_cmd(2), cfg)
        restarted = open_backend(cfg)  # fresh process state
        got = restarted.poll("I_Iteration_Params")
        assert [c.action_id for c in got] == ["a2"]
        assert restarted.poll("I_Iteration_Params") == []
        restarted.close()

    def test_other_datasets_stay_pending(self, tmp_path):
        cfg = TransportConfig(mode="file", steer_file=str(tmp_path / "s.json"))
        publish_command(_cmd(1, dataset="I_A"), cfg)
        publish_command(_cmd(2, dataset="I_B"), cfg)
        backend = open_backend(cfg)
        assert [c.action_id for c in backend.poll("I_A")] == ["a1"]
        assert [c.action_id for c in backend.poll("I_B")] == ["a2"]
        backend.close()


class TestMsgTransport:
    def test_round_trip_in_issue_order(self):
        backend = open_backend(TransportConfig(mode="msg", steer_listen="127.0.0.1:0"))
        cfg = backend.cfg
        publish_command(_cmd(1), cfg)
        publish_command(_cmd(2), cfg)
        got = backend.poll("I_Iteration_Params")
        assert [c.action_id for c in got] == ["a1", "a2"]
        backend.close()

    def test_backend_down_raises_transport_error(self):
        backend = open_backend(TransportConfig(mode="msg", steer_listen="127.0.0.1:0"))
        cfg = backend.cfg
        backend.close()
        with pytest.raises(TransportError):
            publish_command(_cmd(1), cfg)

    def test_duplicate_action_id(self):
        backend = open_backend(TransportConfig(mode="msg", steer_listen="127.0.0.1:0"))
        publish_command(_cmd(1), backend.cfg)
        with pytest.raises(DuplicateActionId):
            publish_command(_cmd(1), backend.cfg)
        backend.close()

    def test_criteria_travel_verbatim(self):
        backend = open_backend(TransportConfig(mode="msg", steer_listen="127.0.0.1:0"))
        criteria = ElementCriteria((Conjunct("band", "=", "j"),))
        publish_command(_cmd(1, criteria=criteria), backend.cfg)
        got = backend.poll("I_Iteration_Params")
        assert got[0].criteria == criteria
        backend.close()


@pytest.fixture
def kv_server():
    server = KVServer("127.0.0.1:0").start()
    yield server
    server.shutdown()
    server.server_close()


class TestKvTransport:
    def test_submit_pushes_onto_pending_key(self, kv_server):
        cfg = TransportConfig(mode="kv", kv_endpoint=kv_server.address, kv_namespace="r1")
        publish_command(_cmd(1), cfg)
        client = KVClient(kv_server.address)
        pending = client.request("LALL", "steer:r1:I_Iteration_Params:pending")
        assert [c["action_id"] for c in pending] == ["a1"]
        client.close()

    def test_poll_consumes_fifo_and_records_consumed(self, kv_server):
        cfg = TransportConfig(mode="kv", kv_endpoint=kv_server.address, kv_namespace="r1")
        publish_command(_cmd(1), cfg)
        publish_command(_cmd(2), cfg)
        backend = open_backend(cfg)
        got = backend.poll("I_Iteration_Params")
        assert [c.action_id for c in got] == ["a1", "a2"]
        assert backend.poll("I_Iteration_Params") == []
        client = KVClient(kv_server.address)
        assert client.request("LALL", "steer:r1:I_Iteration_Params:consumed") == ["a1", "a2"]
        client.close()
        backend.close()

    def test_consumption_survives_client_restart(self, kv_server):
        cfg = TransportConfig(mode="kv", kv_endpoint=kv_server.address, kv_namespace="r1")
        publish_command(_cmd(1), cfg)
        backend = open_backend(cfg)
        assert len(backend.poll("I_Iteration_Params")) == 1
        backend.close()
        publish_command(_cmd(2), cfg)
        restarted = open_backend(cfg)
        assert [c.action_id for c in restarted.poll("I_Iteration_Params")] == ["a2"]
        restarted.close()

    def test_duplicate_action_id(self, kv_server):
        cfg = TransportConfig(mode="kv", kv_endpoint=kv_server.address, kv_namespace="r1")
        publish_command(_cmd(1), cfg)
        with pytest.raises(DuplicateActionId):
            publish_command(_cmd(1), cfg)

    def test_endpoint_down_raises(self):
        cfg = TransportConfig(mode="kv", kv_endpoint="127.0.0.1:1", kv_namespace="r1")
        with pytest.raises(TransportError):
            publish_command(_cmd(1), cfg)


class TestTransportEquivalence:
    def test_same_consumed_multiset_across_modes(self, tmp_path, kv_server):
        commands = [
            _cmd(1, eta={"tol": 1e-6}),
            _cmd(2, eta={"max_linear_iterations": 300}, user="Alice"),
            _cmd(3, dataset="I_Other", eta={"width": 3.0}),
            _cmd(4, eta={"tol": 1e-4, "amr/c_fraction": 0.05}),
        ]
        consumed_by_mode = {}
        for mode in ("file", "msg", "kv"):
            if mode == "file":
                cfg = TransportConfig(mode="file", steer_file=str(tmp_path / f"{mode}.json"))
                backend = open_backend(cfg)
            elif mode == "msg":
                backend = open_backend(TransportConfig(mode="msg", steer_listen="127.0.0.1:0"))
                cfg = backend.cfg
            else:
                cfg = TransportConfig(
                    mode="kv", kv_endpoint=kv_server.address, kv_namespace=f"eq-{mode}"
                )
                backend = open_backend(cfg)
            for cmd in commands:
                publish_command(cmd, cfg)
            got = backend.poll("I_Iteration_Params") + backend.poll("I_Other")
            backend.close()
            consumed_by_mode[mode] = Counter(
                (c.dataset_tag, tuple(sorted(c.eta.items())), c.user) for c in got
            )
        assert consumed_by_mode["file"] == consumed_by_mode["msg"] == consumed_by_mode["kv"]


class TestKvVerbs:
    def test_scalar_and_list_ops(self, kv_server):
        client = KVClient(kv_server.address)
        assert client.request("GET", "k") is None
        client.request("PUT", "k", {"a": 1})
        assert client.request("GET", "k") == {"a": 1}
        client.request("RPUSH", "q", 1)
        client.request("RPUSH", "q", 2)
        client.request("LPUSH", "q", 0)
        assert client.request("LALL", "q") == [0, 1, 2]
        assert client.request("LPOP", "q") == 0
        assert client.request("RPOP", "q") == 2
        client.request("DEL", "q")
        assert client.request("LALL", "q") == []
        client.close()
