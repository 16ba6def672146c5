"""Provenance server: ingests tracker messages, serves analytic queries.

HTTP/1.1, stdlib only. Ingestion is POST /v1/ingest with newline-delimited
JSON, one message per line ({"kind", "client_seq", "payload"}); the
response carries one line per input line, {"seq", "status", "reason"?}.
Every accepted line is committed to the store before the acks are written,
so an acked message survives a crash. Queries run on their own reader
connections and never hold up the single ingestion writer.

Routes:
    POST /v1/ingest                    ingest message batch
    POST /v1/runs                      register a dataflow, returns run id
    POST /v1/runs/{id}/close           flag dangling begins/intents
    POST /v1/runs/{id}/tune            mint + relay a steering command
    GET  /v1/runs                      list runs
    GET  /v1/runs/{id}/tunings[?user=] applied tunings with time steps
    GET  /v1/runs/{id}/impact?window=  windowed before/after averages
    GET  /v1/runs/{id}/series?metric=  per-iteration series + annotations
    GET  /v1/runs/{id}/overhead        cost decomposition report
    GET  /ui/...                       dashboard static assets (if built)
"""

from __future__ import annotations

import argparse
import json
import mimetypes
import os
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import parse_qs, urlparse

from . import adapter as adapter_mod
from .adapter import SteeringCommand, TransportConfig
from .model import DataflowLoadError, load_dataflow, validate_dataflow
from .store import (
    DatasetRow,
    EmptyRun,
    PerformanceRow,
    ProvStore,
    SchemaViolation,
    TaskRow,
    UnknownMetric,
    UnknownRun,
)
from .wire import now_micros

DEFAULT_LISTEN = "127.0.0.1:8787"

_BEGIN_REQUIRED = ("task_id", "workflow_run_id", "transformation_tag", "wall_start")
_END_REQUIRED = ("task_id", "wall_end", "perf")
_INTENT_REQUIRED = ("action_id", "workflow_run_id", "user", "dataset_tag", "eta", "issued_at")
_APPLIED_REQUIRED = ("action_id", "applied_at", "theta")
_PERF_FIELDS = ("comp_ms", "prov_ms", "ext_ms", "s_point_ms", "s_action_ms")


class _Reject(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(reason)
        self.reason = reason
        self.detail = detail


class ProvServer:
    """Store + HTTP front; writes are serialized through one lock."""

    def __init__(
        self,
        store: ProvStore,
        listen: str = DEFAULT_LISTEN,
        ui_dir: str | None = None,
    ) -> None:
        self.store = store
        self.ui_dir = ui_dir
        self._write_lock = threading.Lock()
        host, _, port = listen.partition(":")
        handler = _make_handler(self)
        self.httpd = ThreadingHTTPServer((host, int(port or 0)), handler)
        self.httpd.daemon_threads = True

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    @property
    def url(self) -> str:
        return f"http://{self.address}"

    def start(self) -> "ProvServer":
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.store.close()

    # -- ingestion ------------------------------------------------------------

    def ingest_lines(self, lines: list[str]) -> list[dict[str, Any]]:
        """Apply a message batch; acks are valid only after the commit."""
        acks = []
        last_seq: int | None = None
        with self._write_lock:
            for line in lines:
                try:
                    message = json.loads(line)
                    kind = message.get("kind")
                    seq = message.get("client_seq")
                    payload = message.get("payload")
                    if not isinstance(seq, int) or not isinstance(payload, dict):
                        raise _Reject("malformed", "missing kind/client_seq/payload")
                    if last_seq is not None and seq <= last_seq:
                        raise _Reject("malformed", "client_seq not increasing")
                    last_seq = seq
                    self._apply_message(kind, payload)
                    acks.append({"seq": seq, "status": "accepted"})
                except _Reject as exc:
                    ack = {
                        "seq": message.get("client_seq") if isinstance(message, dict) else None,
                        "status": "rejected",
                        "reason": exc.reason,
                    }
                    if exc.detail:
                        ack["detail"] = exc.detail
                    acks.append(ack)
                except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                    acks.append(
                        {"seq": None, "status": "rejected", "reason": "malformed", "detail": str(exc)}
                    )
        return acks

    def _apply_message(self, kind: str, payload: dict[str, Any]) -> None:
        if kind == "task_begin":
            self._apply_task_begin(payload)
        elif kind == "task_end":
            self._apply_task_end(payload)
        elif kind == "steer_intent":
            self._apply_steer_intent(payload)
        elif kind == "steer_applied":
            self._apply_steer_applied(payload)
        else:
            raise _Reject("malformed", f"unknown kind {kind!r}")

    @staticmethod
    def _require(payload: dict[str, Any], names: tuple[str, ...]) -> None:
        missing = [n for n in names if n not in payload]
        if missing:
            raise _Reject("malformed", f"missing field {missing[0]}")

    def _apply_task_begin(self, payload: dict[str, Any]) -> None:
        self._require(payload, _BEGIN_REQUIRED)
        if self.store.task_exists(payload["task_id"]):
            raise _Reject("malformed", f"task {payload['task_id']} already begun")
        try:
            self.store.append(
                TaskRow(
                    task_id=payload["task_id"],
                    workflow_run_id=payload["workflow_run_id"],
                    transformation_tag=payload["transformation_tag"],
                    iteration=payload.get("iteration"),
                    status="running",
                    wall_start=int(payload["wall_start"]),
                )
            )
            for item in payload.get("inputs", []):
                self.store.append(
                    DatasetRow(
                        element_id=item["element_id"],
                        dataset_tag=item["dataset_tag"],
                        task_id=payload["task_id"],
                        values=dict(item.get("values", {})),
                    )
                )
        except SchemaViolation as exc:
            raise _Reject("malformed", str(exc)) from exc

    def _apply_task_end(self, payload: dict[str, Any]) -> None:
        self._require(payload, _END_REQUIRED)
        perf = payload["perf"]
        self._require(perf, _PERF_FIELDS)
        if not self.store.complete_task(payload["task_id"], int(payload["wall_end"])):
            raise _Reject("unknown_task", payload["task_id"])
        try:
            self.store.append(
                PerformanceRow(
                    task_id=payload["task_id"],
                    comp_ms=float(perf["comp_ms"]),
                    prov_ms=float(perf["prov_ms"]),
                    ext_ms=float(perf["ext_ms"]),
                    s_point_ms=float(perf["s_point_ms"]),
                    s_action_ms=float(perf["s_action_ms"]),
                )
            )
            for item in payload.get("outputs", []):
                self.store.append(
                    DatasetRow(
                        element_id=item["element_id"],
                        dataset_tag=item["dataset_tag"],
                        task_id=payload["task_id"],
                        values=dict(item.get("values", {})),
                    )
                )
        except SchemaViolation as exc:
            raise _Reject("malformed", str(exc)) from exc

    def _apply_steer_intent(self, payload: dict[str, Any]) -> None:
        self._require(payload, _INTENT_REQUIRED)
        try:
            self.store.stage_intent(
                action_id=payload["action_id"],
                workflow_run_id=payload["workflow_run_id"],
                dataset_tag=payload["dataset_tag"],
                user=payload["user"],
                eta=payload["eta"],
                criteria=payload.get("criteria"),
                reason=payload.get("reason"),
                issued_at=int(payload["issued_at"]),
            )
        except SchemaViolation as exc:
            raise _Reject("malformed", str(exc)) from exc

    def _apply_steer_applied(self, payload: dict[str, Any]) -> None:
        self._require(payload, _APPLIED_REQUIRED)
        intent = self.store.take_intent(payload["action_id"])
        if intent is None:
            raise _Reject("unknown_action", payload["action_id"])
        theta = payload["theta"]
        eta = intent["eta"]
        if set(theta) - set(eta):
            raise _Reject("malformed", "theta names parameters not in the intent")
        try:
            self.store.apply_tuning(
                intent,
                applied_at=int(payload["applied_at"]),
                theta=theta,
                iteration_data=payload.get("iteration_data"),
                modified_element_ids=payload.get("modified_element_ids", []),
                influenced_element_ids=payload.get("influenced_element_ids", []),
                influenced_task_ids=payload.get("influenced_task_ids", []),
            )
        except SchemaViolation as exc:
            raise _Reject("malformed", str(exc)) from exc

    # -- registration and relay --------------------------------------------------

    def register_run(self, doc: dict[str, Any]) -> str:
        df = load_dataflow(doc)
        report = validate_dataflow(df)
        if report:
            raise DataflowLoadError(
                "; ".join(f"{v.entity}: {v.message}" for v in report)
            )
        run_id = doc.get("workflow_run_id") or f"run-{uuid.uuid4().hex[:12]}"
        transport = doc.get("transport")
        with self._write_lock:
            self.store.register_dataflow(df, run_id, now_micros(), transport)
        return run_id

    def relay_tune(self, run_id: str, body: dict[str, Any]) -> str:
        transport_doc = self.store.run_transport(run_id)
        if transport_doc is None:
            raise UnknownRun(f"run {run_id} has no registered transport")
        cfg = TransportConfig.from_wire(transport_doc)
        cmd = SteeringCommand(
            action_id=f"tune-{uuid.uuid4().hex[:12]}",
            workflow_run_id=run_id,
            dataset_tag=body["dataset_tag"],
            eta=dict(body["eta"]),
            user=body.get("user", "dashboard"),
            criteria=None,
            reason=body.get("reason"),
            issued_at=now_micros(),
        )
        wire = cmd.to_wire()
        if body.get("criteria"):
            wire["criteria"] = body["criteria"]
            cmd = SteeringCommand.from_wire(wire)
        with self._write_lock:
            self.store.stage_intent(
                cmd.action_id,
                run_id,
                cmd.dataset_tag,
                cmd.user,
                cmd.eta,
                wire.get("criteria"),
                cmd.reason,
                cmd.issued_at,
            )
        adapter_mod.publish_command(cmd, cfg)
        return cmd.action_id


def _make_handler(server: ProvServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:  # quiet by default
            if os.environ.get("STEERD_HTTP_LOG"):
                super().log_message(fmt, *args)

        def _send(self, code: int, body: bytes, content_type: str = "application/json") -> None:
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, code: int, doc: Any) -> None:
            self._send(code, (json.dumps(doc) + "\n").encode())

        def _error(self, code: int, message: str) -> None:
            self._send_json(code, {"error": message})

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length", 0))
            return self.rfile.read(length) if length else b""

        # -- POST -------------------------------------------------------------

        def do_POST(self) -> None:
            try:
                parsed = urlparse(self.path)
                parts = [p for p in parsed.path.split("/") if p]
                if parts == ["v1", "ingest"]:
                    self._post_ingest()
                elif parts == ["v1", "runs"]:
                    self._post_register()
                elif len(parts) == 4 and parts[:2] == ["v1", "runs"] and parts[3] == "close":
                    self._post_close(parts[2])
                elif len(parts) == 4 and parts[:2] == ["v1", "runs"] and parts[3] == "tune":
                    self._post_tune(parts[2])
                else:
                    self._error(404, f"no such endpoint {parsed.path}")
            except BrokenPipeError:
                pass
            except Exception as exc:  # noqa: BLE001 — keep the server alive
                try:
                    self._error(500, f"{type(exc).__name__}: {exc}")
                except Exception:
                    pass

        def _post_ingest(self) -> None:
            try:
                text = self._body().decode("utf-8")
            except UnicodeDecodeError:
                self._error(400, "body is not UTF-8")
                return
            lines = [ln for ln in text.splitlines() if ln.strip()]
            acks = server.ingest_lines(lines)
            body = "".join(json.dumps(a) + "\n" for a in acks).encode()
            self._send(200, body, "application/x-ndjson")

        def _post_register(self) -> None:
            try:
                doc = json.loads(self._body())
                run_id = server.register_run(doc)
            except (json.JSONDecodeError, DataflowLoadError, SchemaViolation, KeyError, TypeError) as exc:
                self._error(400, f"invalid dataflow: {exc}")
                return
            self._send_json(201, {"workflow_run_id": run_id})

        def _post_close(self, run_id: str) -> None:
            try:
                with server._write_lock:
                    counts = server.store.close_run(run_id)
            except UnknownRun:
                self._error(404, f"unknown run {run_id}")
                return
            self._send_json(200, {"workflow_run_id": run_id, **counts})

        def _post_tune(self, run_id: str) -> None:
            try:
                body = json.loads(self._body())
                if not body.get("eta"):
                    self._error(400, "eta must be non-empty")
                    return
                action_id = server.relay_tune(run_id, body)
            except (UnknownRun, KeyError) as exc:
                self._error(404, f"unknown run or field: {exc}")
                return
            except (json.JSONDecodeError, SchemaViolation, ValueError) as exc:
                self._error(400, str(exc))
                return
            except adapter_mod.TransportError as exc:
                self._error(502, str(exc))
                return
            self._send_json(202, {"action_id": action_id})

        # -- GET --------------------------------------------------------------

        def do_GET(self) -> None:
            try:
                parsed = urlparse(self.path)
                parts = [p for p in parsed.path.split("/") if p]
                query = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
                if parts == ["v1", "runs"]:
                    self._send_json(200, {"runs": server.store.list_runs()})
                elif len(parts) == 4 and parts[:2] == ["v1", "runs"]:
                    self._get_run_query(parts[2], parts[3], query)
                elif parts[:1] == ["ui"]:
                    self._get_ui(parts[1:])
                elif parts == ["healthz"]:
                    self._send_json(200, {"status": "ok"})
                else:
                    self._error(404, f"no such endpoint {parsed.path}")
            except BrokenPipeError:
                pass
            except Exception as exc:  # noqa: BLE001
                try:
                    self._error(500, f"{type(exc).__name__}: {exc}")
                except Exception:
                    pass

        def _get_run_query(self, run_id: str, op: str, query: dict[str, str]) -> None:
            store = server.store
            if not store.run_exists(run_id):
                self._error(404, f"unknown run {run_id}")
                return
            if op == "tunings":
                rows = store.query_tunings(run_id, user=query.get("user"))
                self._send_json(
                    200,
                    {
                        "rows": [
                            {
                                "tuning_id": r.tuning_id,
                                "t_step": r.t_step,
                                "attribute": r.attribute,
                                "old_value": r.old_value,
                                "new_value": r.new_value,
                            }
                            for r in rows
                        ]
                    },
                )
            elif op == "impact":
                window = int(query.get("window", 10))
                metrics = [m for m in query.get("metrics", "").split(",") if m]
                try:
                    rows = store.query_tuning_impact(run_id, window=window, metrics=metrics)
                except UnknownMetric as exc:
                    self._error(404, f"unknown metric {exc.args[0]}")
                    return
                except ValueError as exc:
                    self._error(400, str(exc))
                    return
                self._send_json(
                    200,
                    {
                        "window": window,
                        "rows": [
                            {
                                "tuning_id": r.tuning_id,
                                "t_step": r.t_step,
                                "metrics": {
                                    name: {"before": b, "after": a}
                                    for name, (b, a) in r.metrics.items()
                                },
                                "partial_before": r.partial_before,
                                "partial_after": r.partial_after,
                            }
                            for r in rows
                        ],
                    },
                )
            elif op == "series":
                metric = query.get("metric")
                if not metric:
                    self._error(400, "metric parameter required")
                    return
                try:
                    result = store.query_series(run_id, metric)
                except UnknownMetric:
                    self._error(404, f"unknown metric {metric}")
                    return
                self._send_json(
                    200,
                    {
                        "metric": result.metric,
                        "points": [[t, v] for t, v in result.points],
                        "annotations": [
                            {"t_step": t, "tuning_id": tid} for t, tid in result.annotations
                        ],
                    },
                )
            elif op == "overhead":
                try:
                    report = store.overhead_report(run_id)
                except EmptyRun:
                    self._error(404, f"run {run_id} has no finished task")
                    return
                self._send_json(
                    200,
                    {
                        "components": {
                            name: {
                                "seconds": report.seconds[name],
                                "percent": report.percent[name],
                            }
                            for name in report.seconds
                        },
                        "total_seconds": report.total_seconds,
                        "overhead_seconds": report.overhead_seconds,
                    },
                )
            else:
                self._error(404, f"no such query {op}")

        def _get_ui(self, parts: list[str]) -> None:
            if not server.ui_dir:
                self._error(404, "dashboard not built")
                return
            root = Path(server.ui_dir).resolve()
            rel = "/".join(parts) or "index.html"
            target = (root / rel).resolve()
            if not str(target).startswith(str(root)) or not target.is_file():
                self._error(404, f"no such asset {rel}")
                return
            content_type = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
            self._send(200, target.read_bytes(), content_type)

    return Handler


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="steerd-server", description=__doc__)
    parser.add_argument(
        "--listen",
        default=os.environ.get("STEERD_LISTEN", DEFAULT_LISTEN),
        help="host:port to bind (port 0 picks a free port)",
    )
    parser.add_argument("--store", default="./provenance.db", help="store path")
    parser.add_argument("--ui-dir", default=None, help="dashboard asset directory")
    args = parser.parse_args(argv)
    ui_dir = args.ui_dir
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        if bundled.is_dir():
            ui_dir = str(bundled)
    server = ProvServer(ProvStore(args.store), args.listen, ui_dir)
    print(f"steerd-server listening on {server.url} store={args.store}", flush=True)
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
