"""Append-optimized relational provenance store and its analytic queries.

Logical tables: ParameterTuning, ParameterTuned, Dataset,
ModifiedDataElement, InfluencedDataElement, InfluencedTask, Task,
Performance, Attribute, plus the prospective Dataflow and
DataTransformation tables. Rows are appended, never rewritten — the one
exception is TaskRow completion (status / wall_end), which mirrors how a
task's end joins its begin. A SteerIntent staging table (internal, not part
of the logical schema) holds steering intents durably until they are
applied or flagged dangling at run close.

Backed by a single-file SQLite database (":memory:" for tests). One logical
writer per run; readers open their own connections and see a consistent
prefix of appended rows (WAL mode when file-backed).
"""

from __future__ import annotations

import json
import os
import sqlite3
import threading
from dataclasses import dataclass, field
from typing import Any, IO, Iterable, Mapping

from .model import DataflowDef, dataflow_to_doc
from .wire import canonical_json, valid_scalar

OVERHEAD_COMPONENTS = ("comp", "prov", "ext", "s_point", "s_action")
ELAPSED_METRIC = "elapsed_ms"


class SchemaViolation(ValueError):
    """A row fails its type invariants and was not recorded."""


class StoreUnavailable(RuntimeError):
    """The backing database cannot be opened or written."""


class UnknownMetric(KeyError):
    """A query names a metric that is neither elapsed time nor a known attribute."""


class EmptyRun(ValueError):
    """The run has no finished task to report on."""


class UnknownRun(KeyError):
    """No run registered under this id."""


# --- row types -------------------------------------------------------------

@dataclass
class TaskRow:
    task_id: str
    workflow_run_id: str
    transformation_tag: str
    iteration: int | None
    status: str
    wall_start: int
    wall_end: int | None = None
    dangling: bool = False


@dataclass
class PerformanceRow:
    task_id: str
    comp_ms: float
    prov_ms: float
    ext_ms: float
    s_point_ms: float
    s_action_ms: float


@dataclass
class DatasetRow:
    element_id: str
    dataset_tag: str
    task_id: str
    values: dict[str, Any]


@dataclass
class ParameterTuningRow:
    tuning_id: str
    workflow_run_id: str
    dataset_tag: str
    user: str
    reason: str | None
    issued_at: int
    applied_at: int | None
    iteration_data: dict[str, Any] | None = None
    dangling: bool = False


@dataclass
class ParameterTunedRow:
    tuning_id: str
    attribute_name: str
    old_value: Any
    new_value: Any


@dataclass
class ModifiedDataElementRow:
    tuning_id: str
    element_id: str


@dataclass
class InfluencedDataElementRow:
    tuning_id: str
    element_id: str


@dataclass
class InfluencedTaskRow:
    tuning_id: str
    task_id: str


@dataclass
class TuningQueryRow:
    """One Query-1 result line: a tuned attribute with its time-step context."""

    tuning_id: str
    t_step: int | None
    attribute: str
    old_value: Any
    new_value: Any


@dataclass
class ImpactRow:
    """One Query-2 result line: windowed averages around a tuning."""

    tuning_id: str
    t_step: int
    metrics: dict[str, tuple[float | None, float | None]]
    partial_before: bool
    partial_after: bool


@dataclass
class SeriesResult:
    metric: str
    points: list[tuple[int, float]]
    annotations: list[tuple[int | None, str]]


@dataclass
class OverheadReport:
    """Per-component cost decomposition of one run.

    Component seconds are each converted from the summed millisecond
    columns, and total_seconds is the sum of the converted components, so
    the decomposition identity holds exactly on the reported numbers.
    """

    seconds: dict[str, float]
    percent: dict[str, float]
    total_seconds: float
    overhead_seconds: float


_SCHEMA = """
CREATE TABLE IF NOT EXISTS Dataflow (
    workflow_run_id TEXT PRIMARY KEY,
    dataflow_tag TEXT NOT NULL,
    execution_model TEXT NOT NULL,
    registered_at INTEGER NOT NULL,
    definition_json TEXT NOT NULL,
    transport_json TEXT,
    closed INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS DataTransformation (
    workflow_run_id TEXT NOT NULL,
    tag TEXT NOT NULL,
    is_loop_evaluator INTEGER NOT NULL,
    has_steering_point INTEGER NOT NULL,
    input_schemas_json TEXT NOT NULL,
    output_schemas_json TEXT NOT NULL,
    PRIMARY KEY (workflow_run_id, tag)
);
CREATE TABLE IF NOT EXISTS Attribute (
    workflow_run_id TEXT NOT NULL,
    dataset_tag TEXT NOT NULL,
    name TEXT NOT NULL,
    data_type TEXT NOT NULL,
    semantics TEXT NOT NULL,
    PRIMARY KEY (workflow_run_id, dataset_tag, name)
);
CREATE TABLE IF NOT EXISTS Task (
    task_id TEXT PRIMARY KEY,
    workflow_run_id TEXT NOT NULL,
    transformation_tag TEXT NOT NULL,
    iteration INTEGER,
    status TEXT NOT NULL,
    wall_start INTEGER NOT NULL,
    wall_end INTEGER,
    dangling INTEGER NOT NULL DEFAULT 0
);
CREATE INDEX IF NOT EXISTS task_run_iter ON Task (workflow_run_id, iteration);
CREATE TABLE IF NOT EXISTS Performance (
    task_id TEXT PRIMARY KEY,
    comp_ms REAL NOT NULL,
    prov_ms REAL NOT NULL,
    ext_ms REAL NOT NULL,
    s_point_ms REAL NOT NULL,
    s_action_ms REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS Dataset (
    element_id TEXT NOT NULL,
    dataset_tag TEXT NOT NULL,
    task_id TEXT NOT NULL,
    values_json TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS dataset_task ON Dataset (task_id);
CREATE TABLE IF NOT EXISTS ParameterTuning (
    tuning_id TEXT PRIMARY KEY,
    workflow_run_id TEXT NOT NULL,
    dataset_tag TEXT NOT NULL,
    user TEXT NOT NULL,
    reason TEXT,
    issued_at INTEGER NOT NULL,
    applied_at INTEGER,
    iteration_data_json TEXT,
    dangling INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS ParameterTuned (
    tuning_id TEXT NOT NULL,
    attribute_name TEXT NOT NULL,
    old_value_json TEXT NOT NULL,
    new_value_json TEXT NOT NULL,
    PRIMARY KEY (tuning_id, attribute_name)
);
CREATE TABLE IF NOT EXISTS ModifiedDataElement (
    tuning_id TEXT NOT NULL,
    element_id TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS InfluencedDataElement (
    tuning_id TEXT NOT NULL,
    element_id TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS InfluencedTask (
    tuning_id TEXT NOT NULL,
    task_id TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS SteerIntent (
    action_id TEXT PRIMARY KEY,
    workflow_run_id TEXT NOT NULL,
    dataset_tag TEXT NOT NULL,
    user TEXT NOT NULL,
    eta_json TEXT NOT NULL,
    criteria_json TEXT,
    reason TEXT,
    issued_at INTEGER NOT NULL
);
"""

_TABLES = (
    "Dataflow",
    "DataTransformation",
    "Attribute",
    "Task",
    "Performance",
    "Dataset",
    "ParameterTuning",
    "ParameterTuned",
    "ModifiedDataElement",
    "InfluencedDataElement",
    "InfluencedTask",
)


def _check_values_map(values: Mapping[str, Any], context: str) -> None:
    for name, value in values.items():
        if not valid_scalar(value):
            raise SchemaViolation(
                f"{context}: attribute {name}: {value!r} is not a tagged scalar"
            )


def _check_duration(name: str, value: Any) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
        raise SchemaViolation(f"{name} must be a non-negative duration, got {value!r}")


class ProvStore:
    """Relational provenance store over a single SQLite database.

    All writes go through one connection guarded by a lock (the single
    logical writer); query methods run on a per-call reader connection when
    file-backed, so long analytic reads never delay ingestion.
    """

    def __init__(self, path: str = ":memory:") -> None:
        self.path = path
        try:
            self._conn = sqlite3.connect(path, check_same_thread=False)
        except sqlite3.Error as exc:
            raise StoreUnavailable(f"cannot open store at {path}: {exc}") from exc
        self._lock = threading.RLock()
        self._conn.execute("PRAGMA busy_timeout=5000")
        if path != ":memory:":
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA synchronous=FULL")
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- connections -------------------------------------------------------

    def _reader(self) -> sqlite3.Connection:
        if self.path == ":memory:":
            return self._conn
        conn = sqlite3.connect(self.path, check_same_thread=False)
        conn.execute("PRAGMA busy_timeout=5000")
        return conn

    def _run_query(self, sql: str, params: tuple = ()) -> list[tuple]:
        conn = self._reader()
        try:
            with self._lock if conn is self._conn else _NULL_CONTEXT:
                return conn.execute(sql, params).fetchall()
        finally:
            if conn is not self._conn:
                conn.close()

    # -- appends -----------------------------------------------------------

    def append(self, row: Any) -> None:
        """Durably record one row after checking its invariants."""
        with self._lock, self._conn:
            self._append_locked(row)

    def append_many(self, rows: Iterable[Any]) -> None:
        """Record a batch in a single transaction (durable once this returns)."""
        with self._lock, self._conn:
            for row in rows:
                self._append_locked(row)

    def _append_locked(self, row: Any) -> None:
        try:
            if isinstance(row, TaskRow):
                self._append_task(row)
            elif isinstance(row, PerformanceRow):
                self._append_performance(row)
            elif isinstance(row, DatasetRow):
                _check_values_map(row.values, f"element {row.element_id}")
                self._conn.execute(
                    "INSERT INTO Dataset (element_id, dataset_tag, task_id, values_json)"
                    " VALUES (?,?,?,?)",
                    (row.element_id, row.dataset_tag, row.task_id, canonical_json(row.values)),
                )
            elif isinstance(row, ParameterTuningRow):
                self._append_tuning(row)
            elif isinstance(row, ParameterTunedRow):
                if row.old_value is None:
                    raise SchemaViolation(
                        f"tuning {row.tuning_id}: old value for {row.attribute_name} is absent"
                    )
                self._conn.execute(
                    "INSERT INTO ParameterTuned VALUES (?,?,?,?)",
                    (
                        row.tuning_id,
                        row.attribute_name,
                        canonical_json(row.old_value),
                        canonical_json(row.new_value),
                    ),
                )
            elif isinstance(row, ModifiedDataElementRow):
                self._conn.execute(
                    "INSERT INTO ModifiedDataElement VALUES (?,?)",
                    (row.tuning_id, row.element_id),
                )
            elif isinstance(row, InfluencedDataElementRow):
                self._conn.execute(
                    "INSERT INTO InfluencedDataElement VALUES (?,?)",
                    (row.tuning_id, row.element_id),
                )
            elif isinstance(row, InfluencedTaskRow):
                self._conn.execute(
                    "INSERT INTO InfluencedTask VALUES (?,?)",
                    (row.tuning_id, row.task_id),
                )
            else:
                raise SchemaViolation(f"unknown row type {type(row).__name__}")
        except sqlite3.IntegrityError as exc:
            raise SchemaViolation(str(exc)) from exc
        except sqlite3.Error as exc:
            raise StoreUnavailable(str(exc)) from exc

    def _append_task(self, row: TaskRow) -> None:
        if row.status not in ("running", "finished", "failed"):
            raise SchemaViolation(f"task {row.task_id}: unknown status {row.status!r}")
        if row.status == "finished":
            if row.wall_end is None:
                raise SchemaViolation(f"task {row.task_id}: finished without wall_end")
            if row.wall_end < row.wall_start:
                raise SchemaViolation(f"task {row.task_id}: wall_end precedes wall_start")
        self._check_iteration_invariant(row)
        self._conn.execute(
            "INSERT INTO Task VALUES (?,?,?,?,?,?,?,?)",
            (
                row.task_id,
                row.workflow_run_id,
                row.transformation_tag,
                row.iteration,
                row.status,
                row.wall_start,
                row.wall_end,
                int(row.dangling),
            ),
        )

    def _check_iteration_invariant(self, row: TaskRow) -> None:
        # Only enforceable when the prospective rows for the run exist.
        got = self._conn.execute(
            "SELECT t.is_loop_evaluator, d.execution_model FROM DataTransformation t"
            " JOIN Dataflow d USING (workflow_run_id)"
            " WHERE t.workflow_run_id=? AND t.tag=?",
            (row.workflow_run_id, row.transformation_tag),
        ).fetchone()
        if got is None:
            return
        is_loop, model = bool(got[0]), got[1]
        iteration_allowed = is_loop or model == "parameter_sweep"
        if row.iteration is not None and not iteration_allowed:
            raise SchemaViolation(
                f"task {row.task_id}: iteration on non-loop transformation "
                f"{row.transformation_tag}"
            )
        if row.iteration is None and is_loop:
            raise SchemaViolation(
                f"task {row.task_id}: loop-evaluator task without iteration"
            )

    def _append_performance(self, row: PerformanceRow) -> None:
        for name in OVERHEAD_COMPONENTS:
            _check_duration(f"{name}_ms", getattr(row, f"{name}_ms"))
        got = self._conn.execute(
            "SELECT dt.has_steering_point FROM Task t"
            " JOIN DataTransformation dt ON dt.workflow_run_id = t.workflow_run_id"
            " AND dt.tag = t.transformation_tag WHERE t.task_id=?",
            (row.task_id,),
        ).fetchone()
        if got is not None and not got[0] and (row.s_point_ms or row.s_action_ms):
            raise SchemaViolation(
                f"task {row.task_id}: steering cost on a transformation without "
                "a steering point"
            )
        self._conn.execute(
            "INSERT INTO Performance VALUES (?,?,?,?,?,?)",
            (
                row.task_id,
                row.comp_ms,
                row.prov_ms,
                row.ext_ms,
                row.s_point_ms,
                row.s_action_ms,
            ),
        )

    def _append_tuning(self, row: ParameterTuningRow) -> None:
        if row.applied_at is not None and row.applied_at < row.issued_at:
            raise SchemaViolation(
                f"tuning {row.tuning_id}: applied_at precedes issued_at"
            )
        if row.iteration_data is not None:
            _check_values_map(row.iteration_data, f"tuning {row.tuning_id}")
        self._conn.execute(
            "INSERT INTO ParameterTuning VALUES (?,?,?,?,?,?,?,?,?)",
            (
                row.tuning_id,
                row.workflow_run_id,
                row.dataset_tag,
                row.user,
                row.reason,
                row.issued_at,
                row.applied_at,
                None if row.iteration_data is None else canonical_json(row.iteration_data),
                int(row.dangling),
            ),
        )

    def complete_task(
        self, task_id: str, wall_end: int, status: str = "finished"
    ) -> bool:
        """The one permitted in-place update: close a running task."""
        if status not in ("finished", "failed"):
            raise SchemaViolation(f"task {task_id}: bad completion status {status!r}")
        with self._lock, self._conn:
            cur = self._conn.execute(
                "UPDATE Task SET status=?, wall_end=? WHERE task_id=? AND status='running'",
                (status, wall_end, task_id),
            )
            return cur.rowcount == 1

    def task_exists(self, task_id: str) -> bool:
        return bool(self._run_query("SELECT 1 FROM Task WHERE task_id=?", (task_id,)))

    # -- prospective provenance ---------------------------------------------

    def register_dataflow(
        self,
        df: DataflowDef,
        workflow_run_id: str,
        registered_at: int,
        transport: Mapping[str, Any] | None = None,
    ) -> None:
        doc = dataflow_to_doc(df)
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO Dataflow VALUES (?,?,?,?,?,?,0)",
                    (
                        workflow_run_id,
                        df.tag,
                        df.execution_model,
                        registered_at,
                        canonical_json(doc),
                        None if transport is None else canonical_json(dict(transport)),
                    ),
                )
            except sqlite3.IntegrityError as exc:
                raise SchemaViolation(f"run {workflow_run_id} already registered") from exc
            for t in df.transformations:
                self._conn.execute(
                    "INSERT INTO DataTransformation VALUES (?,?,?,?,?,?)",
                    (
                        workflow_run_id,
                        t.tag,
                        int(t.is_loop_evaluator),
                        int(t.has_steering_point),
                        canonical_json(list(t.input_schemas)),
                        canonical_json(list(t.output_schemas)),
                    ),
                )
            for s in df.datasets:
                for a in s.attributes:
                    self._conn.execute(
                        "INSERT INTO Attribute VALUES (?,?,?,?,?)",
                        (workflow_run_id, s.tag, a.name, a.data_type, a.semantics),
                    )

    def run_exists(self, workflow_run_id: str) -> bool:
        return bool(
            self._run_query(
                "SELECT 1 FROM Dataflow WHERE workflow_run_id=?", (workflow_run_id,)
            )
        )

    def list_runs(self) -> list[dict[str, Any]]:
        rows = self._run_query(
            "SELECT workflow_run_id, dataflow_tag, execution_model, registered_at, closed"
            " FROM Dataflow ORDER BY registered_at, workflow_run_id"
        )
        return [
            {
                "workflow_run_id": r[0],
                "dataflow_tag": r[1],
                "execution_model": r[2],
                "registered_at": r[3],
                "closed": bool(r[4]),
            }
            for r in rows
        ]

    def run_transport(self, workflow_run_id: str) -> dict[str, Any] | None:
        rows = self._run_query(
            "SELECT transport_json FROM Dataflow WHERE workflow_run_id=?",
            (workflow_run_id,),
        )
        if not rows:
            raise UnknownRun(workflow_run_id)
        return None if rows[0][0] is None else json.loads(rows[0][0])

    # -- steering intents ----------------------------------------------------

    def stage_intent(
        self,
        action_id: str,
        workflow_run_id: str,
        dataset_tag: str,
        user: str,
        eta: Mapping[str, Any],
        criteria: list | None,
        reason: str | None,
        issued_at: int,
    ) -> None:
        if not eta:
            raise SchemaViolation(f"intent {action_id}: empty eta")
        _check_values_map(eta, f"intent {action_id}")
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO SteerIntent VALUES (?,?,?,?,?,?,?,?)",
                    (
                        action_id,
                        workflow_run_id,
                        dataset_tag,
                        user,
                        canonical_json(dict(eta)),
                        None if criteria is None else canonical_json(criteria),
                        reason,
                        issued_at,
                    ),
                )
            except sqlite3.IntegrityError as exc:
                raise SchemaViolation(f"intent {action_id} already staged") from exc

    def take_intent(self, action_id: str) -> dict[str, Any] | None:
        """Remove and return a staged intent; None when never staged."""
        with self._lock, self._conn:
            got = self._conn.execute(
                "SELECT workflow_run_id, dataset_tag, user, eta_json, criteria_json,"
                " reason, issued_at FROM SteerIntent WHERE action_id=?",
                (action_id,),
            ).fetchone()
            if got is None:
                return None
            self._conn.execute("DELETE FROM SteerIntent WHERE action_id=?", (action_id,))
        return {
            "action_id": action_id,
            "workflow_run_id": got[0],
            "dataset_tag": got[1],
            "user": got[2],
            "eta": json.loads(got[3]),
            "criteria": None if got[4] is None else json.loads(got[4]),
            "reason": got[5],
            "issued_at": got[6],
        }

    def apply_tuning(
        self,
        intent: Mapping[str, Any],
        applied_at: int,
        theta: Mapping[str, Any],
        iteration_data: Mapping[str, Any] | None,
        modified_element_ids: Iterable[str],
        influenced_element_ids: Iterable[str],
        influenced_task_ids: Iterable[str],
    ) -> None:
        """Materialize a consumed intent as the full tuning row group."""
        eta = intent["eta"]
        tuning_id = intent["action_id"]
        with self._lock, self._conn:
            self._append_locked(
                ParameterTuningRow(
                    tuning_id=tuning_id,
                    workflow_run_id=intent["workflow_run_id"],
                    dataset_tag=intent["dataset_tag"],
                    user=intent["user"],
                    reason=intent.get("reason"),
                    issued_at=intent["issued_at"],
                    applied_at=applied_at,
                    iteration_data=dict(iteration_data) if iteration_data else None,
                )
            )
            for name, old in theta.items():
                self._append_locked(
                    ParameterTunedRow(tuning_id, name, old, eta[name])
                )
            for element_id in modified_element_ids:
                self._append_locked(ModifiedDataElementRow(tuning_id, element_id))
            for element_id in influenced_element_ids:
                self._append_locked(InfluencedDataElementRow(tuning_id, element_id))
            for task_id in influenced_task_ids:
                self._append_locked(InfluencedTaskRow(tuning_id, task_id))

    def close_run(self, workflow_run_id: str) -> dict[str, int]:
        """Flag unmatched begins and intents as dangling; idempotent."""
        if not self.run_exists(workflow_run_id):
            raise UnknownRun(workflow_run_id)
        with self._lock, self._conn:
            cur = self._conn.execute(
                "UPDATE Task SET dangling=1"
                " WHERE workflow_run_id=? AND status='running' AND dangling=0",
                (workflow_run_id,),
            )
            dangling_tasks = cur.rowcount
            intents = self._conn.execute(
                "SELECT action_id, dataset_tag, user, reason, issued_at"
                " FROM SteerIntent WHERE workflow_run_id=?",
                (workflow_run_id,),
            ).fetchall()
            for action_id, dataset_tag, user, reason, issued_at in intents:
                self._append_locked(
                    ParameterTuningRow(
                        tuning_id=action_id,
                        workflow_run_id=workflow_run_id,
                        dataset_tag=dataset_tag,
                        user=user,
                        reason=reason,
                        issued_at=issued_at,
                        applied_at=None,
                        iteration_data=None,
                        dangling=True,
                    )
                )
            self._conn.execute(
                "DELETE FROM SteerIntent WHERE workflow_run_id=?", (workflow_run_id,)
            )
            self._conn.execute(
                "UPDATE Dataflow SET closed=1 WHERE workflow_run_id=?",
                (workflow_run_id,),
            )
        return {"dangling_tasks": dangling_tasks, "dangling_tunings": len(intents)}

    # -- analytic queries ----------------------------------------------------

    def query_tunings(
        self, workflow_run_id: str, user: str | None = None
    ) -> list[TuningQueryRow]:
        """All applied tunings, one row per tuned attribute, by applied_at.

        The time step is read from the tuning's iteration snapshot; a user
        filter restricts to that identity's actions.
        """
        sql = (
            "SELECT pt.tuning_id, pt.iteration_data_json, pd.attribute_name,"
            " pd.old_value_json, pd.new_value_json"
            " FROM ParameterTuning pt JOIN ParameterTuned pd USING (tuning_id)"
            " WHERE pt.workflow_run_id=?"
        )
        params: list[Any] = [workflow_run_id]
        if user is not None:
            sql += " AND pt.user=?"
            params.append(user)
        sql += " ORDER BY pt.applied_at, pt.tuning_id, pd.attribute_name"
        out = []
        for tuning_id, iter_json, attr, old_json, new_json in self._run_query(
            sql, tuple(params)
        ):
            t_step = None
            if iter_json:
                data = json.loads(iter_json)
                raw = data.get("t_step")
                t_step = int(raw) if raw is not None else None
            out.append(
                TuningQueryRow(tuning_id, t_step, attr, json.loads(old_json), json.loads(new_json))
            )
        return out

    def _metric_known(self, workflow_run_id: str, metric: str) -> bool:
        if metric == ELAPSED_METRIC:
            return True
        if self._run_query(
            "SELECT 1 FROM Attribute WHERE workflow_run_id=? AND name=? LIMIT 1",
            (workflow_run_id, metric),
        ):
            return True
        # No prospective rows (e.g. seeded fixtures): accept observed keys.
        rows = self._run_query(
            "SELECT 1 FROM Dataset d JOIN Task t USING (task_id)"
            " WHERE t.workflow_run_id=? AND json_extract(d.values_json, ?) IS NOT NULL"
            " LIMIT 1",
            (workflow_run_id, _json_path(metric)),
        )
        return bool(rows)

    def query_series(self, workflow_run_id: str, metric: str) -> SeriesResult:
        """Per-iteration series of one metric plus this run's tune annotations."""
        if not self._metric_known(workflow_run_id, metric):
            raise UnknownMetric(metric)
        per_iteration: dict[int, list[float]] = {}
        if metric == ELAPSED_METRIC:
            rows = self._run_query(
                "SELECT iteration, wall_start, wall_end FROM Task"
                " WHERE workflow_run_id=? AND iteration IS NOT NULL"
                " AND status='finished'",
                (workflow_run_id,),
            )
            for iteration, start, end in rows:
                per_iteration.setdefault(int(iteration), []).append((end - start) / 1000.0)
        else:
            rows = self._run_query(
                "SELECT t.iteration, d.values_json FROM Dataset d"
                " JOIN Task t USING (task_id)"
                " WHERE t.workflow_run_id=? AND t.iteration IS NOT NULL",
                (workflow_run_id,),
            )
            for iteration, values_json in rows:
                values = json.loads(values_json)
                if metric in values and isinstance(values[metric], (int, float)):
                    per_iteration.setdefault(int(iteration), []).append(float(values[metric]))
        points = [
            (it, sum(vs) / len(vs)) for it, vs in sorted(per_iteration.items())
        ]
        annotations = []
        for tuning_id, iter_json in self._run_query(
            "SELECT tuning_id, iteration_data_json FROM ParameterTuning"
            " WHERE workflow_run_id=? AND applied_at IS NOT NULL"
            " ORDER BY applied_at, tuning_id",
            (workflow_run_id,),
        ):
            t_step = None
            if iter_json:
                raw = json.loads(iter_json).get("t_step")
                t_step = int(raw) if raw is not None else None
            annotations.append((t_step, tuning_id))
        return SeriesResult(metric, points, annotations)

    def query_tuning_impact(
        self,
        workflow_run_id: str,
        window: int = 10,
        metrics: Iterable[str] = (),
    ) -> list[ImpactRow]:
        """Windowed before/after averages around each applied tuning.

        The before window is [t-window, t-1] and the after window is
        [t+1, t+window] where t is the tuning's captured time step; average
        elapsed time is always included. Rows are flagged partial when fewer
        than `window` iterations carry the metric on that side.
        """
        if window < 1:
            raise ValueError("window must be >= 1")
        names = [ELAPSED_METRIC]
        for m in metrics:
            if m not in names:
                names.append(m)
        for m in names:
            if not self._metric_known(workflow_run_id, m):
                raise UnknownMetric(m)
        tunings = []
        for tuning_id, iter_json in self._run_query(
            "SELECT tuning_id, iteration_data_json FROM ParameterTuning"
            " WHERE workflow_run_id=? AND applied_at IS NOT NULL"
            " ORDER BY applied_at, tuning_id",
            (workflow_run_id,),
        ):
            if not iter_json:
                continue
            raw = json.loads(iter_json).get("t_step")
            if raw is None:
                continue
            tunings.append((tuning_id, int(raw)))
        out = []
        for tuning_id, t_step in tunings:
            row_metrics: dict[str, tuple[float | None, float | None]] = {}
            partial_before = partial_after = False
            for m in names:
                before, n_before = self._window_average(
                    workflow_run_id, m, t_step - window, t_step - 1
                )
                after, n_after = self._window_average(
                    workflow_run_id, m, t_step + 1, t_step + window
                )
                row_metrics[m] = (before, after)
                partial_before = partial_before or n_before < window
                partial_after = partial_after or n_after < window
            out.append(
                ImpactRow(tuning_id, t_step, row_metrics, partial_before, partial_after)
            )
        return out

    def _window_average(
        self, workflow_run_id: str, metric: str, lo: int, hi: int
    ) -> tuple[float | None, int]:
        """Mean of per-iteration means over [lo, hi]; None when no iteration."""
        if metric == ELAPSED_METRIC:
            rows = self._run_query(
                "SELECT AVG(v), COUNT(*) FROM ("
                " SELECT AVG((wall_end - wall_start) / 1000.0) AS v FROM Task"
                " WHERE workflow_run_id=? AND status='finished'"
                " AND iteration BETWEEN ? AND ? GROUP BY iteration)",
                (workflow_run_id, lo, hi),
            )
        else:
            path = _json_path(metric)
            rows = self._run_query(
                "SELECT AVG(v), COUNT(*) FROM ("
                " SELECT AVG(json_extract(d.values_json, ?)) AS v FROM Dataset d"
                " JOIN Task t USING (task_id)"
                " WHERE t.workflow_run_id=? AND t.iteration BETWEEN ? AND ?"
                " AND json_extract(d.values_json, ?) IS NOT NULL"
                " GROUP BY t.iteration)",
                (path, workflow_run_id, lo, hi, path),
            )
        avg, count = rows[0]
        return (None if avg is None else float(avg)), int(count or 0)

    def overhead_report(self, workflow_run_id: str) -> OverheadReport:
        """Run-level cost decomposition: comp, prov, ext, s_point, s_action.

        Each component is the sum of its per-task millisecond column; the
        run total is the sum of the component costs and the overhead is
        everything except the application's own computation.
        """
        rows = self._run_query(
            "SELECT SUM(comp_ms), SUM(prov_ms), SUM(ext_ms), SUM(s_point_ms),"
            " SUM(s_action_ms), COUNT(*) FROM Performance p"
            " JOIN Task t USING (task_id) WHERE t.workflow_run_id=?",
            (workflow_run_id,),
        )
        sums = rows[0]
        if not sums[5]:
            raise EmptyRun(workflow_run_id)
        seconds = {
            name: (sums[i] or 0.0) / 1000.0 for i, name in enumerate(OVERHEAD_COMPONENTS)
        }
        total = sum(seconds[name] for name in OVERHEAD_COMPONENTS)
        percent = {
            name: (100.0 * seconds[name] / total if total else 0.0)
            for name in OVERHEAD_COMPONENTS
        }
        overhead = sum(seconds[name] for name in OVERHEAD_COMPONENTS if name != "comp")
        return OverheadReport(seconds, percent, total, overhead)

    # -- fixtures ------------------------------------------------------------

    def dump_ndjson(self, fp: IO[str]) -> None:
        """One flat JSON object per line, `table` key plus the schema fields."""
        for table in _TABLES:
            conn = self._reader()
            try:
                cur = conn.execute(f"SELECT * FROM {table}")
                columns = [c[0] for c in cur.description]
                for row in cur.fetchall():
                    record: dict[str, Any] = {"table": table}
                    for col, value in zip(columns, row):
                        record[_plain_field(col)] = _load_field(col, value)
                    fp.write(canonical_json(record) + "\n")
            finally:
                if conn is not self._conn:
                    conn.close()

    def load_ndjson(self, fp: IO[str]) -> int:
        loaded = 0
        with self._lock, self._conn:
            for line in fp:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                table = record.pop("table")
                self._insert_record(table, record)
                loaded += 1
        return loaded

    def _insert_record(self, table: str, record: Mapping[str, Any]) -> None:
        if table not in _TABLES:
            raise SchemaViolation(f"unknown table {table}")
        cur = self._conn.execute(f"SELECT * FROM {table} LIMIT 0")
        columns = [c[0] for c in cur.description]
        values = []
        for col in columns:
            raw = record.get(_plain_field(col))
            values.append(_store_field(col, raw))
        marks = ",".join("?" for _ in columns)
        self._conn.execute(f"INSERT INTO {table} VALUES ({marks})", tuple(values))

    def fetch_all(self, table: str) -> list[dict[str, Any]]:
        """Raw table contents as dicts, for oracles and tests."""
        if table not in _TABLES and table != "SteerIntent":
            raise SchemaViolation(f"unknown table {table}")
        conn = self._reader()
        try:
            cur = conn.execute(f"SELECT * FROM {table}")
            columns = [c[0] for c in cur.description]
            return [
                {_plain_field(c): _load_field(c, v) for c, v in zip(columns, row)}
                for row in cur.fetchall()
            ]
        finally:
            if conn is not self._conn:
                conn.close()


class _NullContext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL_CONTEXT = _NullContext()

_JSON_COLUMNS = {
    "values_json": "values",
    "iteration_data_json": "iteration_data",
    "definition_json": "definition",
    "transport_json": "transport",
    "input_schemas_json": "input_schemas",
    "output_schemas_json": "output_schemas",
    "old_value_json": "old_value",
    "new_value_json": "new_value",
    "eta_json": "eta",
    "criteria_json": "criteria",
}
_BOOL_COLUMNS = {"dangling", "closed", "is_loop_evaluator", "has_steering_point"}


def _plain_field(column: str) -> str:
    return _JSON_COLUMNS.get(column, column)


def _load_field(column: str, value: Any) -> Any:
    if column in _JSON_COLUMNS:
        return None if value is None else json.loads(value)
    if column in _BOOL_COLUMNS:
        return bool(value)
    return value


def _store_field(column: str, value: Any) -> Any:
    if column in _JSON_COLUMNS:
        return None if value is None else canonical_json(value)
    if column in _BOOL_COLUMNS:
        return int(bool(value))
    return value


def _json_path(name: str) -> str:
    return '$."' + name.replace('"', '\\"') + '"'
