"""Adapter service: carries steering commands from the user to the workflow.

The front end publishes a SteeringCommand over one of three interchangeable
transports; the back end, polled from the workflow's steering points,
returns each command exactly once in issue order:

* file — a shared JSON document ``{"version", "pending", "consumed"}``
  replaced atomically (write-temp-then-rename); the poller probes the stat
  triple before parsing anything, and the consumed-id ledger makes
  consumption survive restarts.
* msg  — the back end listens on a local TCP address; commands travel as
  newline-delimited JSON (at-most-once per connection only: undelivered
  state dies with the process).
* kv   — pending/consumed lists in the bundled key-value service under
  ``steer:<namespace>:<dataset>:pending`` / ``...:consumed``; pops are
  atomic server-side.

Submitting also registers the steering intent with the provenance server
*before* the transport publication, so an intent that never reaches a
steering point is still flagged at run close.
"""

from __future__ import annotations

import json
import os
import socket
import socketserver
import threading
from dataclasses import dataclass, replace
from typing import Any, Mapping

import requests

from .kvstore import KVClient, KVError
from .model import DataElement, ElementCriteria

TRANSPORT_MODES = ("file", "msg", "kv")
DEFAULT_STEER_FILE = "./steering.json"


class TransportError(RuntimeError):
    """The transport or the provenance server cannot be reached."""


class DuplicateActionId(ValueError):
    pass


class NoSuchParameter(KeyError):
    """A tuning names a parameter the target element does not carry."""


@dataclass(frozen=True)
class SteeringCommand:
    action_id: str
    workflow_run_id: str
    dataset_tag: str
    eta: dict[str, Any]
    user: str
    criteria: ElementCriteria | None = None
    reason: str | None = None
    issued_at: int = 0

    def to_wire(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "action_id": self.action_id,
            "workflow_run_id": self.workflow_run_id,
            "dataset_tag": self.dataset_tag,
            "eta": dict(self.eta),
            "user": self.user,
            "issued_at": self.issued_at,
        }
        if self.criteria is not None and self.criteria.conjuncts:
            doc["criteria"] = self.criteria.to_wire()
        if self.reason is not None:
            doc["reason"] = self.reason
        return doc

    @classmethod
    def from_wire(cls, doc: Mapping[str, Any]) -> "SteeringCommand":
        return cls(
            action_id=doc["action_id"],
            workflow_run_id=doc["workflow_run_id"],
            dataset_tag=doc["dataset_tag"],
            eta=dict(doc["eta"]),
            user=doc["user"],
            criteria=ElementCriteria.from_wire(doc.get("criteria")),
            reason=doc.get("reason"),
            issued_at=int(doc.get("issued_at", 0)),
        )


@dataclass
class TransportConfig:
    mode: str
    steer_file: str | None = None
    steer_listen: str | None = None
    kv_endpoint: str | None = None
    kv_namespace: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in TRANSPORT_MODES:
            raise ValueError(f"unknown transport mode {self.mode!r}")
        if self.mode == "file" and not self.steer_file:
            self.steer_file = DEFAULT_STEER_FILE

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> "TransportConfig":
        env = os.environ if env is None else env
        return cls(
            mode=env.get("STEERD_TRANSPORT", "file"),
            steer_file=env.get("STEERD_STEER_FILE"),
            steer_listen=env.get("STEERD_STEER_LISTEN"),
            kv_endpoint=env.get("STEERD_KV_ENDPOINT"),
            kv_namespace=env.get("STEERD_KV_NAMESPACE"),
        )

    def to_wire(self) -> dict[str, Any]:
        doc = {"mode": self.mode}
        for name in ("steer_file", "steer_listen", "kv_endpoint", "kv_namespace"):
            value = getattr(self, name)
            if value:
                doc[name] = value
        return doc

    @classmethod
    def from_wire(cls, doc: Mapping[str, Any]) -> "TransportConfig":
        return cls(
            mode=doc["mode"],
            steer_file=doc.get("steer_file"),
            steer_listen=doc.get("steer_listen"),
            kv_endpoint=doc.get("kv_endpoint"),
            kv_namespace=doc.get("kv_namespace"),
        )


# --- the pure tuning application ------------------------------------------

def apply_tune(
    cmd: SteeringCommand, element: DataElement
) -> tuple[DataElement, dict[str, Any]]:
    """Apply eta to one element; returns the updated element and theta.

    Pure: the input element is untouched, the result differs only on tuned
    keys, and theta holds the prior values. Tuning to the current value is
    a valid (and still tracked) action.
    """
    missing = [k for k in cmd.eta if k not in element.values]
    if missing:
        raise NoSuchParameter(missing[0])
    theta = {k: element.values[k] for k in cmd.eta}
    return element.with_values(cmd.eta), theta


# --- intent registration ----------------------------------------------------

def emit_intent(cmd: SteeringCommand, server_url: str, timeout: float = 5.0) -> None:
    """Register the steering intent with the provenance server (synchronous)."""
    line = json.dumps(
        {"kind": "steer_intent", "client_seq": 1, "payload": cmd.to_wire()}
    )
    try:
        response = requests.post(
            server_url.rstrip("/") + "/v1/ingest",
            data=(line + "\n").encode(),
            headers={"Content-Type": "application/x-ndjson"},
            timeout=timeout,
        )
        response.raise_for_status()
        ack = json.loads(response.text.splitlines()[0])
    except (requests.RequestException, json.JSONDecodeError, IndexError) as exc:
        raise TransportError(f"provenance server {server_url} unreachable: {exc}") from exc
    if ack.get("status") != "accepted":
        reason = ack.get("reason", "rejected")
        if "already" in str(ack.get("detail", "")) or reason == "duplicate":
            raise DuplicateActionId(cmd.action_id)
        raise TransportError(f"intent rejected: {reason}")


def front_submit(
    cmd: SteeringCommand, cfg: TransportConfig, server_url: str | None = None
) -> str:
    """Publish a command: intent first, then the transport. Returns action_id."""
    if not cmd.eta:
        raise ValueError("eta must be non-empty")
    if server_url:
        emit_intent(cmd, server_url)
    publish_command(cmd, cfg)
    return cmd.action_id


def publish_command(cmd: SteeringCommand, cfg: TransportConfig) -> None:
    """Transport half of front_submit (no intent registration)."""
    if cfg.mode == "file":
        _file_publish(cmd, cfg)
    elif cfg.mode == "msg":
        _msg_publish(cmd, cfg)
    else:
        _kv_publish(cmd, cfg)


# --- file transport ----------------------------------------------------------

def _read_steer_doc(path: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fp:
            return json.load(fp)
    except FileNotFoundError:
        return {"version": 0, "pending": [], "consumed": []}
    except (OSError, json.JSONDecodeError) as exc:
        raise TransportError(f"steering file {path} unreadable: {exc}") from exc


def _write_steer_doc(path: str, doc: Mapping[str, Any]) -> None:
    tmp = f"{path}.tmp.{os.getpid()}.{threading.get_ident()}"
    try:
        with open(tmp, "w", encoding="utf-8") as fp:
            json.dump(doc, fp)
            fp.flush()
            os.fsync(fp.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise TransportError(f"steering file {path} unwritable: {exc}") from exc


class _FileLock:
    """Advisory flock on a sidecar, shared by both ends of the adapter."""

    def __init__(self, path: str) -> None:
        self.path = path + ".lock"
        self._fp = None

    def __enter__(self):
        import fcntl

        self._fp = open(self.path, "a+")
        fcntl.flock(self._fp.fileno(), fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        import fcntl

        if self._fp is not None:
            fcntl.flock(self._fp.fileno(), fcntl.LOCK_UN)
            self._fp.close()
            self._fp = None
        return False


def _file_publish(cmd: SteeringCommand, cfg: TransportConfig) -> None:
    path = cfg.steer_file or DEFAULT_STEER_FILE
    with _FileLock(path):
        doc = _read_steer_doc(path)
        known = {c["action_id"] for c in doc["pending"]} | set(doc["consumed"])
        if cmd.action_id in known:
            raise DuplicateActionId(cmd.action_id)
        doc["version"] = int(doc.get("version", 0)) + 1
        doc["pending"].append(cmd.to_wire())
        _write_steer_doc(path, doc)


# --- msg transport -----------------------------------------------------------

class _MsgHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            line = self.rfile.readline()
            if not line:
                return
            line = line.strip()
            if not line:
                continue
            backend = self.server.backend  # type: ignore[attr-defined]
            try:
                cmd = SteeringCommand.from_wire(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                self.wfile.write(
                    (json.dumps({"status": "error", "reason": f"malformed: {exc}"}) + "\n").encode()
                )
                continue
            accepted = backend._receive(cmd)
            if accepted:
                self.wfile.write(b'{"status": "ok"}\n')
            else:
                self.wfile.write(
                    b'{"status": "error", "reason": "duplicate_action_id"}\n'
                )


def _msg_publish(cmd: SteeringCommand, cfg: TransportConfig) -> None:
    if not cfg.steer_listen:
        raise TransportError("msg transport requires --steer-listen")
    host, _, port = cfg.steer_listen.partition(":")
    try:
        with socket.create_connection((host, int(port)), timeout=5.0) as sock:
            sock.sendall((json.dumps(cmd.to_wire()) + "\n").encode())
            reply = sock.makefile("rb").readline()
    except OSError as exc:
        raise TransportError(
            f"steering endpoint {cfg.steer_listen} unreachable: {exc}"
        ) from exc
    if not reply:
        raise TransportError(f"steering endpoint {cfg.steer_listen} closed connection")
    response = json.loads(reply)
    if response.get("status") != "ok":
        if response.get("reason") == "duplicate_action_id":
            raise DuplicateActionId(cmd.action_id)
        raise TransportError(response.get("reason", "rejected"))


# --- kv transport ------------------------------------------------------------

def _kv_keys(cfg: TransportConfig, dataset_tag: str) -> tuple[str, str]:
    namespace = cfg.kv_namespace or "default"
    base = f"steer:{namespace}:{dataset_tag}"
    return f"{base}:pending", f"{base}:consumed"


def _kv_publish(cmd: SteeringCommand, cfg: TransportConfig) -> None:
    if not cfg.kv_endpoint:
        raise TransportError("kv transport requires --kv-endpoint")
    client = KVClient(cfg.kv_endpoint)
    pending_key, consumed_key = _kv_keys(cfg, cmd.dataset_tag)
    try:
        pending = client.request("LALL", pending_key) or []
        consumed = client.request("LALL", consumed_key) or []
        known = {c["action_id"] for c in pending} | set(consumed)
        if cmd.action_id in known:
            raise DuplicateActionId(cmd.action_id)
        client.request("RPUSH", pending_key, cmd.to_wire())
    except KVError as exc:
        raise TransportError(str(exc)) from exc
    finally:
        client.close()


# --- back end ----------------------------------------------------------------

class AdapterBackend:
    """Workflow-side poller; each command is returned exactly once.

    Construct via open_backend(). poll() is called from the workflow's
    single steering context; the no-pending path is designed to be cheap
    (a stat probe, a deque check, or one LPOP round trip).
    """

    def __init__(self, cfg: TransportConfig) -> None:
        self.cfg = cfg
        self._probe: tuple | None = None
        self._probe_pending_tags: set[str] = set()
        self._server: socketserver.ThreadingTCPServer | None = None
        self._pending: list[SteeringCommand] = []
        self._seen: set[str] = set()
        self._lock = threading.Lock()
        self._kv: KVClient | None = None
        if cfg.mode == "msg":
            if not cfg.steer_listen:
                raise TransportError("msg transport requires --steer-listen")
            host, _, port = cfg.steer_listen.partition(":")
            server = socketserver.ThreadingTCPServer(
                (host, int(port or 0)), _MsgHandler, bind_and_activate=False
            )
            server.allow_reuse_address = True
            server.daemon_threads = True
            try:
                server.server_bind()
                server.server_activate()
            except OSError as exc:
                raise TransportError(f"cannot bind {cfg.steer_listen}: {exc}") from exc
            server.backend = self  # type: ignore[attr-defined]
            self._server = server
            threading.Thread(target=server.serve_forever, daemon=True).start()
            self.cfg = replace(cfg, steer_listen=self.address)
        elif cfg.mode == "kv":
            if not cfg.kv_endpoint:
                raise TransportError("kv transport requires --kv-endpoint")
            self._kv = KVClient(cfg.kv_endpoint)

    @property
    def address(self) -> str:
        assert self._server is not None
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def _receive(self, cmd: SteeringCommand) -> bool:
        with self._lock:
            if cmd.action_id in self._seen:
                return False
            self._seen.add(cmd.action_id)
            self._pending.append(cmd)
            return True

    def poll(self, dataset_tag: str) -> list[SteeringCommand]:
        """Commands pending for one dataset, issue-ordered, consumed atomically."""
        if self.cfg.mode == "file":
            return self._poll_file(dataset_tag)
        if self.cfg.mode == "msg":
            with self._lock:
                take = [c for c in self._pending if c.dataset_tag == dataset_tag]
                self._pending = [c for c in self._pending if c.dataset_tag != dataset_tag]
            return take
        return self._poll_kv(dataset_tag)

    def _poll_file(self, dataset_tag: str) -> list[SteeringCommand]:
        path = self.cfg.steer_file or DEFAULT_STEER_FILE
        try:
            st = os.stat(path)
        except FileNotFoundError:
            return []
        except OSError as exc:
            raise TransportError(f"steering file {path} unreadable: {exc}") from exc
        probe = (st.st_ino, st.st_size, st.st_mtime_ns)
        # Fast path: nothing changed since the last read AND that read left
        # nothing pending for this dataset (other datasets' commands may
        # legitimately sit in the file untouched).
        if probe == self._probe and dataset_tag not in self._probe_pending_tags:
            return []
        with _FileLock(path):
            doc = _read_steer_doc(path)
            consumed = set(doc["consumed"])
            take, keep = [], []
            for raw in doc["pending"]:
                cmd = SteeringCommand.from_wire(raw)
                if cmd.action_id in consumed:
                    continue
                if cmd.dataset_tag == dataset_tag:
                    take.append(cmd)
                else:
                    keep.append(raw)
            if take:
                doc["pending"] = keep
                doc["consumed"] = sorted(consumed | {c.action_id for c in take})
                doc["version"] = int(doc.get("version", 0)) + 1
                _write_steer_doc(path, doc)
                st = os.stat(path)
            self._probe = (st.st_ino, st.st_size, st.st_mtime_ns)
            self._probe_pending_tags = {raw["dataset_tag"] for raw in keep}
        return take

    def _poll_kv(self, dataset_tag: str) -> list[SteeringCommand]:
        assert self._kv is not None
        pending_key, consumed_key = _kv_keys(self.cfg, dataset_tag)
        take = []
        try:
            while True:
                raw = self._kv.request("LPOP", pending_key)
                if raw is None:
                    break
                cmd = SteeringCommand.from_wire(raw)
                self._kv.request("RPUSH", consumed_key, cmd.action_id)
                take.append(cmd)
        except KVError as exc:
            raise TransportError(str(exc)) from exc
        return take

    def close(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._kv is not None:
            self._kv.close()
            self._kv = None


def open_backend(cfg: TransportConfig) -> AdapterBackend:
    return AdapterBackend(cfg)
