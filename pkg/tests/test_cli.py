"""steerctl: parsing, rendering, golden tables, config persistence."""

from __future__ import annotations

import io
import json

import pytest
from hypothesis import given, strategies as st

from steerd import cli
from steerd.cli import CliInvocation, UsageError, parse, render, resolve_eta
from conftest import FIXTURE_RUN_ID, GOLDEN


class TestParse:
    def test_tune_with_inline_json(self):
        inv = parse(
            [
                "--tune",
                "--dataset=I_Iteration_Params",
                '--p={"max_linear_iterations":500}',
                "--reason=checking how linear iterations affects convergence",
            ]
        )
        assert inv.subcommand == "tune"
        assert inv.dataset == "I_Iteration_Params"
        assert resolve_eta(inv.params) == {"max_linear_iterations": 500}
        assert inv.reason.startswith("checking how")

    def test_tune_with_parameter_file(self, tmp_path):
        path = tmp_path / "new-values.json"
        path.write_text(
            '{"flow_initial_linear_solver_tolerance": 1.0e-6,\n "amr/c_fraction": 1.0e-5}'
        )
        inv = parse(["--tune", "--dataset=I_Iteration_Params", f"--p={path}"])
        eta = resolve_eta(inv.params)
        assert eta == {
            "flow_initial_linear_solver_tolerance": 1e-6,
            "amr/c_fraction": 1e-5,
        }

    def test_tune_without_dataset_is_usage_error(self):
        with pytest.raises(UsageError, match="dataset"):
            parse(["--tune", '--p={"a":1}'])

    def test_unknown_flag_rejected(self):
        with pytest.raises(UsageError, match="--frobnicate"):
            parse(["tunings", "--frobnicate=1"])

    def test_unknown_subcommand_rejected(self):
        with pytest.raises(UsageError, match="dance"):
            parse(["dance"])

    def test_user_alone_persists(self):
        inv = parse(["--user=Bob"])
        assert inv.subcommand is None and inv.user == "Bob"

    def test_space_separated_values(self):
        inv = parse(["tunings", "--user", "Bob", "--run", "r1"])
        assert inv.user == "Bob" and inv.run == "r1"

    def test_missing_value_rejected(self):
        with pytest.raises(UsageError):
            parse(["tunings", "--user"])

    def test_bad_window(self):
        with pytest.raises(UsageError):
            parse(["impact", "--window=0"])
        with pytest.raises(UsageError):
            parse(["impact", "--window=soon"])

    def test_series_requires_metric(self):
        with pytest.raises(UsageError, match="metric"):
            parse(["series"])

    def test_nonflat_params_rejected(self):
        with pytest.raises(UsageError, match="flat"):
            parse(["--tune", "--dataset=I_X", '--p={"a": {"b": 1}}'])


_simple_text = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="_-./"),
    min_size=1,
    max_size=12,
)


@st.composite
def invocations(draw):
    subcommand = draw(st.sampled_from(["tune", "tunings", "impact", "series", "overhead"]))
    inv = CliInvocation(subcommand=subcommand)
    inv.user = draw(st.none() | _simple_text)
    inv.run = draw(st.none() | _simple_text)
    inv.server = draw(st.none() | st.just("http://127.0.0.1:9999"))
    if subcommand == "tune":
        keys = draw(st.lists(_simple_text, min_size=1, max_size=3, unique=True))
        eta = {k: draw(st.integers(-1000, 1000)) for k in keys}
        inv.dataset = draw(_simple_text)
        inv.params = json.dumps(eta)
        inv.reason = draw(st.none() | _simple_text)
        inv.transport = draw(st.none() | st.sampled_from(["file", "msg", "kv"]))
    if subcommand == "impact":
        inv.window = draw(st.none() | st.integers(1, 50))
        inv.metrics = draw(st.lists(_simple_text, max_size=3, unique=True))
    if subcommand == "series":
        inv.metric = draw(_simple_text)
    return inv


class TestRoundTrip:
    @given(invocations())
    def test_parse_render_round_trip(self, inv):
        assert parse(render(inv)) == inv


class TestResolveEta:
    def test_inline_detection_by_leading_brace(self):
        assert resolve_eta('  {"a": 1}') == {"a": 1}

    def test_missing_file(self):
        with pytest.raises(UsageError, match="cannot read"):
            resolve_eta("no-such-file.json")

    def test_empty_object_rejected(self):
        with pytest.raises(UsageError):
            resolve_eta("{}")


class TestTables:
    def test_tunings_table_matches_golden(self, fixture_server, monkeypatch, tmp_path):
        monkeypatch.setenv("HOME", str(tmp_path))
        inv = parse(["tunings", "--user=Bob", f"--server={fixture_server.url}"])
        out = io.StringIO()
        assert cli.run(inv, out=out) == 0
        golden = (GOLDEN / "tunings_bob.txt").read_text()
        assert out.getvalue() == golden

    def test_tunings_twice_byte_identical(self, fixture_server, monkeypatch, tmp_path):
        monkeypatch.setenv("HOME", str(tmp_path))
        inv = parse(["tunings", f"--server={fixture_server.url}"])
        first, second = io.StringIO(), io.StringIO()
        assert cli.run(inv, out=first) == 0
        assert cli.run(inv, out=second) == 0
        assert first.getvalue() == second.getvalue()

    def test_series_rendering(self, fixture_server, monkeypatch, tmp_path):
        monkeypatch.setenv("HOME", str(tmp_path))
        inv = parse(
            ["series", "--metric=elapsed_ms", f"--server={fixture_server.url}",
             f"--run={FIXTURE_RUN_ID}"]
        )
        out = io.StringIO()
        assert cli.run(inv, out=out) == 0
        text = out.getvalue()
        assert "t_step=1401" in text and "tuning=1" in text

    def test_overhead_rendering(self):
        doc = {
            "components": {
                "comp": {"seconds": 1407967.18, "percent": 98.18},
                "prov": {"seconds": 4259.18, "percent": 0.3},
                "ext": {"seconds": 21367.60, "percent": 1.49},
                "s_point": {"seconds": 473.24, "percent": 0.03},
                "s_action": {"seconds": 2.44, "percent": 1.7e-5},
            },
            "total_seconds": 1434069.64,
            "overhead_seconds": 26102.46,
        }
        text = cli.render_overhead(doc)
        lines = text.splitlines()
        assert lines[0].split() == ["Component", "Total", "time", "(s)", "Total", "time", "(%)"]
        assert lines[1].startswith("comp") and "98.18%" in lines[1]
        assert "0.3%" in lines[2]
        assert "1.7e-5%" in lines[5]
        assert lines[6].startswith("c(Df)") and "100%" in lines[6]

    def test_impact_end_to_end_matches_seeded_levels(self, monkeypatch, tmp_path):
        from steerd.server import ProvServer
        from steerd.store import ProvStore
        from test_store import _seed_iteration_run, _seed_tuning

        monkeypatch.setenv("HOME", str(tmp_path))
        from steerd.harness import sedimentation_dataflow

        store = ProvStore()
        store.register_dataflow(sedimentation_dataflow(), "impact-run", 1)
        # elapsed exactly 10 ms before the tune at step 100 and 20 ms after
        _seed_iteration_run(
            store, "impact-run", {i: (10.0 if i < 100 else 20.0) for i in range(85, 116)}
        )
        _seed_tuning(store, "impact-run", "tn1", 100)
        server = ProvServer(store, "127.0.0.1:0").start()
        try:
            inv = parse(["impact", "--window=10", f"--server={server.url}"])
            out = io.StringIO()
            assert cli.run(inv, out=out) == 0
            row = out.getvalue().splitlines()[1]
            cells = [c.strip() for c in row.split("  ") if c.strip()]
            # elapsed shown in seconds: 10 ms -> 0.01, 20 ms -> 0.02
            assert "0.01" in cells and "0.02" in cells
        finally:
            server.stop()

    def test_impact_rendering_layout(self):
        doc = {
            "window": 10,
            "rows": [
                {
                    "tuning_id": "1",
                    "t_step": 1401,
                    "metrics": {
                        "elapsed_ms": {"before": 17300.0, "after": 18500.0},
                        "linear_iters": {"before": 2030.0, "after": 2000.0},
                    },
                    "partial_before": False,
                    "partial_after": True,
                }
            ],
        }
        text = cli.render_impact(doc)
        header = text.splitlines()[0]
        assert "Avg Time (s) Bef" in header and "Avg Time (s) Aft" in header
        assert "Avg linear_iters Bef" in header
        row = text.splitlines()[1]
        assert "17.3" in row and "18.5" in row and "after" in row


class TestRunErrors:
    def test_server_down_exit_3_names_endpoint(self, monkeypatch, tmp_path, capsys):
        monkeypatch.setenv("HOME", str(tmp_path))
        inv = parse(["tunings", "--server=http://127.0.0.1:1"])
        assert cli.run(inv) == 3
        assert "127.0.0.1:1" in capsys.readouterr().err

    def test_tune_with_transport_down_exit_3(self, fixture_server, monkeypatch, tmp_path, capsys):
        monkeypatch.setenv("HOME", str(tmp_path))
        inv = parse(
            [
                "--tune",
                "--dataset=I_Iteration_Params",
                '--p={"max_linear_iterations": 400}',
                "--user=Bob",
                "--transport=msg",
                "--steer-listen=127.0.0.1:1",
                f"--server={fixture_server.url}",
            ]
        )
        assert cli.run(inv) == 3
        assert "127.0.0.1:1" in capsys.readouterr().err
        # intent was registered before the transport failed: it stays staged
        # and will be flagged dangling at run close rather than leaking away
        staged = fixture_server.store.fetch_all("SteerIntent")
        assert len(staged) == 1
        assert staged[0]["eta"] == {"max_linear_iterations": 400}
        counts = fixture_server.store.close_run("lock-exchange-01")
        assert counts["dangling_tunings"] == 1

    def test_usage_error_exit_2(self, capsys):
        assert cli.main(["--tune"]) == 2
        assert "dataset" in capsys.readouterr().err


class TestConfig:
    def test_user_persisted_and_overridable(self, monkeypatch, tmp_path):
        monkeypatch.setenv("HOME", str(tmp_path))
        monkeypatch.delenv("STEERD_USER", raising=False)
        out = io.StringIO()
        assert cli.run(parse(["--user=Bob"]), out=out) == 0
        assert cli.read_config()["user"] == "Bob"
        assert cli._setting(None, "user", cli.read_config()) == "Bob"
        assert cli._setting("Alice", "user", cli.read_config()) == "Alice"
        monkeypatch.setenv("STEERD_USER", "Carol")
        assert cli._setting(None, "user", cli.read_config()) == "Carol"

    def test_config_file_round_trip(self, monkeypatch, tmp_path):
        monkeypatch.setenv("HOME", str(tmp_path))
        cli.write_config({"user": "Bob", "server_url": "http://x:1", "transport": "kv"})
        cfg = cli.read_config()
        assert cfg == {"user": "Bob", "server_url": "http://x:1", "transport": "kv"}
