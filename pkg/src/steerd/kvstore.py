"""Minimal embedded key-value service for the DBMS-driven steering transport.

Speaks newline-delimited JSON over TCP: one request object per line, one
response per line. Verbs: GET, PUT, LPUSH, RPUSH, LPOP, RPOP, LALL, DEL,
PING. State is in-memory; the service outlives workflow restarts, which is
what gives the kv transport its at-most-once consumption across client
crashes (pops are atomic server-side).
"""

from __future__ import annotations

import argparse
import json
import socket
import socketserver
import threading
from collections import deque
from typing import Any


class KVError(RuntimeError):
    pass


class _State:
    def __init__(self) -> None:
        self.scalars: dict[str, Any] = {}
        self.lists: dict[str, deque] = {}
        self.lock = threading.Lock()

    def handle(self, request: dict[str, Any]) -> dict[str, Any]:
        op = request.get("op")
        key = request.get("key")
        with self.lock:
            if op == "PING":
                return {"status": "ok"}
            if op == "GET":
                return {"status": "ok", "value": self.scalars.get(key)}
            if op == "PUT":
                self.scalars[key] = request.get("value")
                return {"status": "ok"}
            if op == "DEL":
                self.scalars.pop(key, None)
                self.lists.pop(key, None)
                return {"status": "ok"}
            if op == "LPUSH":
                self.lists.setdefault(key, deque()).appendleft(request.get("value"))
                return {"status": "ok"}
            if op == "RPUSH":
                self.lists.setdefault(key, deque()).append(request.get("value"))
                return {"status": "ok"}
            if op == "LPOP":
                q = self.lists.get(key)
                return {"status": "ok", "value": q.popleft() if q else None}
            if op == "RPOP":
                q = self.lists.get(key)
                return {"status": "ok", "value": q.pop() if q else None}
            if op == "LALL":
                q = self.lists.get(key)
                return {"status": "ok", "value": list(q) if q else []}
        return {"status": "error", "reason": f"unknown op {op!r}"}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        while True:
            line = self.rfile.readline()
            if not line:
                return
            line = line.strip()
            if not line:
                continue
            try:
                response = self.server.state.handle(json.loads(line))  # type: ignore[attr-defined]
            except (json.JSONDecodeError, TypeError) as exc:
                response = {"status": "error", "reason": f"malformed request: {exc}"}
            self.wfile.write((json.dumps(response) + "\n").encode())


class KVServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, listen: str = "127.0.0.1:0") -> None:
        host, _, port = listen.partition(":")
        super().__init__((host, int(port or 0)), _Handler)
        self.state = _State()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "KVServer":
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return self


class KVClient:
    """Persistent-connection client; reconnects once on a broken socket."""

    def __init__(self, endpoint: str, timeout: float = 2.0) -> None:
        self.endpoint = endpoint
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._rfile = None

    def _connect(self) -> None:
        host, _, port = self.endpoint.partition(":")
        self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
        self._rfile = self._sock.makefile("rb")

    def request(self, op: str, key: str | None = None, value: Any = None) -> Any:
        payload = json.dumps({"op": op, "key": key, "value": value}) + "\n"
        for attempt in (0, 1):
            try:
                if self._sock is None:
                    self._connect()
                assert self._sock is not None and self._rfile is not None
                self._sock.sendall(payload.encode())
                line = self._rfile.readline()
                if not line:
                    raise ConnectionError("connection closed")
                response = json.loads(line)
                if response.get("status") != "ok":
                    raise KVError(response.get("reason", "kv error"))
                return response.get("value")
            except (OSError, ConnectionError, json.JSONDecodeError) as exc:
                self.close()
                if attempt:
                    raise KVError(f"kv endpoint {self.endpoint} unreachable: {exc}") from exc

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self._rfile = None


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="steerd-kv", description=__doc__)
    parser.add_argument("--listen", default="127.0.0.1:6399", help="host:port to bind")
    args = parser.parse_args(argv)
    server = KVServer(args.listen)
    print(f"steerd-kv listening on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
