"""steerctl: submit parameter tunes and print steering-analysis tables.

Subcommands: tune (also spelled as the bare --tune flag), tunings, impact,
series, overhead. `--user NAME` with no subcommand persists the default
identity to ~/.steerd/config. Settings resolve flags over environment over
the config file. Exit codes: 0 ok, 2 usage, 3 transport/server failure.
"""

from __future__ import annotations

import fcntl
import json
import os
import sys
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import requests

from .adapter import (
    DuplicateActionId,
    SteeringCommand,
    TransportConfig,
    TransportError,
    front_submit,
)
from .wire import format_value, now_micros

SUBCOMMANDS = ("tune", "tunings", "impact", "series", "overhead")
DEFAULT_SERVER_URL = "http://127.0.0.1:8787"
CONFIG_KEYS = (
    "user",
    "server_url",
    "transport",
    "steer_file",
    "steer_listen",
    "kv_endpoint",
    "kv_namespace",
)
_ENV_BY_KEY = {
    "user": "STEERD_USER",
    "server_url": "STEERD_SERVER_URL",
    "transport": "STEERD_TRANSPORT",
    "steer_file": "STEERD_STEER_FILE",
    "steer_listen": "STEERD_STEER_LISTEN",
    "kv_endpoint": "STEERD_KV_ENDPOINT",
    "kv_namespace": "STEERD_KV_NAMESPACE",
}


class UsageError(ValueError):
    pass


@dataclass
class CliInvocation:
    subcommand: str | None = None
    user: str | None = None
    dataset: str | None = None
    params: str | None = None
    reason: str | None = None
    run: str | None = None
    server: str | None = None
    transport: str | None = None
    steer_file: str | None = None
    steer_listen: str | None = None
    kv_endpoint: str | None = None
    kv_namespace: str | None = None
    window: int | None = None
    metrics: list[str] = field(default_factory=list)
    metric: str | None = None


_VALUE_FLAGS = {
    "user",
    "dataset",
    "p",
    "reason",
    "run",
    "server",
    "transport",
    "steer-file",
    "steer-listen",
    "kv-endpoint",
    "kv-namespace",
    "window",
    "metrics",
    "metric",
}


def parse(argv: list[str]) -> CliInvocation:
    """Parse an argv into an invocation; unknown flags are rejected."""
    inv = CliInvocation()
    tune_flag = False
    positionals: list[str] = []
    i = 0
    while i < len(argv):
        token = argv[i]
        i += 1
        if not token.startswith("--"):
            positionals.append(token)
            continue
        name, eq, value = token[2:].partition("=")
        if name == "tune" and not eq:
            tune_flag = True
            continue
        if name not in _VALUE_FLAGS:
            raise UsageError(f"unknown flag --{name}")
        if not eq:
            if i >= len(argv):
                raise UsageError(f"flag --{name} requires a value")
            value = argv[i]
            i += 1
        _assign(inv, name, value)
    if tune_flag:
        if positionals:
            raise UsageError(f"unexpected argument {positionals[0]!r}")
        inv.subcommand = "tune"
    elif positionals:
        if positionals[0] not in SUBCOMMANDS:
            raise UsageError(f"unknown subcommand {positionals[0]!r}")
        if len(positionals) > 1:
            raise UsageError(f"unexpected argument {positionals[1]!r}")
        inv.subcommand = positionals[0]
    elif inv.user is None:
        raise UsageError(
            "usage: steerctl (--tune --dataset=DS --p=JSON|FILE [--reason=TEXT]"
            " | tunings|impact|series|overhead [flags] | --user=NAME)"
        )
    _check(inv)
    return inv


def _assign(inv: CliInvocation, name: str, value: str) -> None:
    if name == "window":
        try:
            inv.window = int(value)
        except ValueError:
            raise UsageError(f"--window expects an integer, got {value!r}") from None
        if inv.window < 1:
            raise UsageError("--window must be >= 1")
    elif name == "metrics":
        inv.metrics = [m for m in value.split(",") if m]
    elif name == "p":
        inv.params = value
    else:
        setattr(inv, name.replace("-", "_"), value)


def _check(inv: CliInvocation) -> None:
    if inv.subcommand == "tune":
        if not inv.dataset:
            raise UsageError("tune requires --dataset")
        if not inv.params:
            raise UsageError("tune requires --p")
        resolve_eta(inv.params)
    if inv.subcommand == "series" and not inv.metric:
        raise UsageError("series requires --metric")
    if inv.transport is not None and inv.transport not in ("file", "msg", "kv"):
        raise UsageError(f"unknown transport {inv.transport!r}")


def render(inv: CliInvocation) -> list[str]:
    """Canonical argv for an invocation; parse(render(inv)) == inv."""
    argv: list[str] = []
    if inv.subcommand == "tune":
        argv.append("--tune")
    elif inv.subcommand:
        argv.append(inv.subcommand)
    pairs = [
        ("user", inv.user),
        ("dataset", inv.dataset),
        ("p", inv.params),
        ("reason", inv.reason),
        ("run", inv.run),
        ("server", inv.server),
        ("transport", inv.transport),
        ("steer-file", inv.steer_file),
        ("steer-listen", inv.steer_listen),
        ("kv-endpoint", inv.kv_endpoint),
        ("kv-namespace", inv.kv_namespace),
        ("window", None if inv.window is None else str(inv.window)),
        ("metrics", ",".join(inv.metrics) if inv.metrics else None),
        ("metric", inv.metric),
    ]
    for name, value in pairs:
        if value is not None:
            argv.append(f"--{name}={value}")
    return argv


def resolve_eta(params: str) -> dict[str, Any]:
    """--p accepts inline JSON (leading '{') or a path to a JSON file."""
    text = params
    if not params.lstrip().startswith("{"):
        try:
            text = Path(params).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read parameter file {params}: {exc}") from exc
    try:
        eta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"parameters are not valid JSON: {exc}") from exc
    if not isinstance(eta, dict) or not eta:
        raise UsageError("parameters must be a non-empty JSON object")
    for key, value in eta.items():
        if isinstance(value, dict):
            raise UsageError(f"parameter {key} must be a flat value")
    return eta


# --- configuration ------------------------------------------------------------

def config_path() -> Path:
    return Path.home() / ".steerd" / "config"


def read_config() -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = config_path().read_text(encoding="utf-8")
    except OSError:
        return out
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_config(updates: dict[str, str]) -> None:
    path = config_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+", encoding="utf-8") as fp:
        fcntl.flock(fp.fileno(), fcntl.LOCK_EX)
        fp.seek(0)
        current: dict[str, str] = {}
        for line in fp.read().splitlines():
            if line.strip() and not line.startswith("#") and "=" in line:
                key, _, value = line.partition("=")
                current[key.strip()] = value.strip()
        current.update(updates)
        fp.seek(0)
        fp.truncate()
        for key in CONFIG_KEYS:
            if key in current:
                fp.write(f"{key}={current[key]}\n")
        fcntl.flock(fp.fileno(), fcntl.LOCK_UN)


def _setting(inv_value: str | None, key: str, cfg: dict[str, str]) -> str | None:
    if inv_value is not None:
        return inv_value
    env = os.environ.get(_ENV_BY_KEY[key])
    if env:
        return env
    return cfg.get(key)


# --- rendering ------------------------------------------------------------------

def render_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip()]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def _fmt_avg(value: Any) -> str:
    if value is None:
        return "-"
    return format_value(round(float(value), 6))


def _fmt_percent(value: float) -> str:
    if value >= 0.01:
        text = f"{value:.2f}".rstrip("0").rstrip(".")
        return f"{text}%"
    if value == 0:
        return "0%"
    return f"{format_value(float(f'{value:.2g}'))}%"


def _fmt_seconds(value: float) -> str:
    if value == 0:
        return "0.00"
    if value >= 0.01:
        return f"{value:.2f}"
    return format_value(float(f"{value:.3g}"))


def render_tunings(rows: list[dict[str, Any]]) -> str:
    headers = ["Parameter Tuning", "t_step", "Parameter Tuned", "Old Val", "New Val"]
    table = [
        [
            str(r["tuning_id"]),
            "-" if r["t_step"] is None else str(r["t_step"]),
            r["attribute"],
            format_value(r["old_value"]),
            format_value(r["new_value"]),
        ]
        for r in rows
    ]
    return render_table(headers, table)


_METRIC_LABELS = {"elapsed_ms": "Time (s)"}


def render_impact(doc: dict[str, Any]) -> str:
    rows = doc["rows"]
    names: list[str] = []
    for r in rows:
        for name in r["metrics"]:
            if name not in names:
                names.append(name)
    headers = ["Parameter Tuning", "t_step"]
    for name in names:
        label = _METRIC_LABELS.get(name, name)
        headers += [f"Avg {label} Bef", f"Avg {label} Aft"]
    headers.append("Partial")
    table = []
    for r in rows:
        line = [str(r["tuning_id"]), str(r["t_step"])]
        for name in names:
            cell = r["metrics"].get(name, {})
            before, after = cell.get("before"), cell.get("after")
            if name == "elapsed_ms":
                before = None if before is None else before / 1000.0
                after = None if after is None else after / 1000.0
            line += [_fmt_avg(before), _fmt_avg(after)]
        partial = []
        if r["partial_before"]:
            partial.append("before")
        if r["partial_after"]:
            partial.append("after")
        line.append(",".join(partial))
        table.append(line)
    return render_table(headers, table)


def render_series(doc: dict[str, Any]) -> str:
    table = [[str(t), format_value(v)] for t, v in doc["points"]]
    out = render_table(["t_step", doc["metric"]], table)
    annotations = doc.get("annotations", [])
    if annotations:
        out += "Tunes:\n"
        for a in annotations:
            t_step = "-" if a["t_step"] is None else str(a["t_step"])
            out += f"  t_step={t_step}  tuning={a['tuning_id']}\n"
    return out


_COMPONENT_LABELS = [
    ("comp", "comp"),
    ("prov", "prov"),
    ("ext", "ext"),
    ("s_point", "s_point"),
    ("s_action", "s_action"),
]


def render_overhead(doc: dict[str, Any]) -> str:
    rows = []
    for key, label in _COMPONENT_LABELS:
        component = doc["components"][key]
        rows.append(
            [label, _fmt_seconds(component["seconds"]), _fmt_percent(component["percent"])]
        )
    rows.append(["c(Df)", _fmt_seconds(doc["total_seconds"]), "100%"])
    return render_table(["Component", "Total time (s)", "Total time (%)"], rows)


# --- execution ------------------------------------------------------------------

def _server_url(inv: CliInvocation, cfg: dict[str, str]) -> str:
    return _setting(inv.server, "server_url", cfg) or DEFAULT_SERVER_URL


def _get(url: str, params: dict[str, Any] | None = None) -> dict[str, Any]:
    try:
        response = requests.get(url, params=params, timeout=10)
    except requests.RequestException as exc:
        raise TransportError(f"server {url} unreachable: {exc}") from exc
    if response.status_code != 200:
        try:
            message = response.json().get("error", response.text)
        except json.JSONDecodeError:
            message = response.text
        raise TransportError(f"server {url}: {message}")
    return response.json()


def _resolve_run(inv: CliInvocation, base: str) -> str:
    if inv.run:
        return inv.run
    runs = _get(base + "/v1/runs").get("runs", [])
    if not runs:
        raise TransportError(f"server {base}: no registered runs")
    return runs[-1]["workflow_run_id"]


def _transport_config(inv: CliInvocation, cfg: dict[str, str]) -> TransportConfig:
    return TransportConfig(
        mode=_setting(inv.transport, "transport", cfg) or "file",
        steer_file=_setting(inv.steer_file, "steer_file", cfg),
        steer_listen=_setting(inv.steer_listen, "steer_listen", cfg),
        kv_endpoint=_setting(inv.kv_endpoint, "kv_endpoint", cfg),
        kv_namespace=_setting(inv.kv_namespace, "kv_namespace", cfg),
    )


def run(inv: CliInvocation, out=None) -> int:
    out = out if out is not None else sys.stdout
    cfg = read_config()
    if inv.subcommand is None:
        write_config({"user": inv.user or ""})
        print(f"user={inv.user}", file=out)
        return 0
    base = _server_url(inv, cfg)
    try:
        if inv.subcommand == "tune":
            return _run_tune(inv, cfg, base, out)
        run_id = _resolve_run(inv, base)
        if inv.subcommand == "tunings":
            params = {"user": inv.user} if inv.user else None
            doc = _get(base + f"/v1/runs/{run_id}/tunings", params)
            out.write(render_tunings(doc["rows"]))
        elif inv.subcommand == "impact":
            params = {"window": inv.window or 10}
            if inv.metrics:
                params["metrics"] = ",".join(inv.metrics)
            doc = _get(base + f"/v1/runs/{run_id}/impact", params)
            out.write(render_impact(doc))
        elif inv.subcommand == "series":
            doc = _get(base + f"/v1/runs/{run_id}/series", {"metric": inv.metric})
            out.write(render_series(doc))
        elif inv.subcommand == "overhead":
            doc = _get(base + f"/v1/runs/{run_id}/overhead")
            out.write(render_overhead(doc))
    except (TransportError, DuplicateActionId) as exc:
        print(f"steerctl: {exc}", file=sys.stderr)
        return 3
    return 0


def _run_tune(inv: CliInvocation, cfg: dict[str, str], base: str, out) -> int:
    eta = resolve_eta(inv.params or "")
    user = _setting(inv.user, "user", cfg)
    if not user:
        raise UsageError("tune requires a user (--user, STEERD_USER, or config)")
    transport = _transport_config(inv, cfg)
    try:
        run_id = inv.run or _resolve_run(inv, base)
        cmd = SteeringCommand(
            action_id=f"tune-{uuid.uuid4().hex[:12]}",
            workflow_run_id=run_id,
            dataset_tag=inv.dataset or "",
            eta=eta,
            user=user,
            reason=inv.reason,
            issued_at=now_micros(),
        )
        front_submit(cmd, transport, server_url=base)
    except (TransportError, DuplicateActionId) as exc:
        print(f"steerctl: {exc}", file=sys.stderr)
        return 3
    echo = ", ".join(f"{k}={format_value(v)}" for k, v in eta.items())
    print(f"submitted {cmd.action_id}: {echo}", file=out)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        inv = parse(argv)
    except UsageError as exc:
        print(f"steerctl: {exc}", file=sys.stderr)
        return 2
    try:
        return run(inv)
    except UsageError as exc:
        print(f"steerctl: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
