"""Client instrumentation for monitoring and steering points.

A TrackerSession wraps one workflow run: task_begin/task_end capture the
dataflow's retrospective provenance, register_extractor hooks raw-data
extraction into task completion, and steering_point_check polls the adapter
back end and captures every applied tuning (new values, prior values, the
user, the tasks running at that moment, and the loop-iteration snapshot
when a loop attribute was tuned).

None of the instrumented calls ever waits on the network: messages go into
a bounded queue drained by a background sender thread, so enqueue cost is
independent of provenance-server latency. When the queue is full the
enqueue blocks briefly (default 10 ms) and then drops the message,
incrementing a visible counter — bounded overhead outranks completeness
under pathological backpressure, and drops are observable.

Per-task costs are split into prov (tuple preparation), ext (synchronous
extractors), s_point (idle steering checks), s_action (tune capture), and
comp = elapsed minus all of those. Task elapsed and extractor cost are
measured on the monotonic wall clock; the toolkit's own bookkeeping
sections (prov, s_point, s_action) are metered with per-thread CPU time so
a scheduler preemption inside a microsecond-scale section is not billed to
instrumentation — the preempted wall time stays in comp, where the rest of
the system's noise already lives.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

import requests

from .adapter import AdapterBackend, NoSuchParameter, SteeringCommand
from .model import (
    DataElement,
    DataflowDef,
    ElementCriteria,
    classify_attributes,
    match_elements,
)
from .wire import now_micros

DEFAULT_QUEUE_CAP = 4096
DEFAULT_BLOCK_MS = 10.0
_STOP = object()


class UnknownTransformation(KeyError):
    pass


class AlreadyClosed(RuntimeError):
    pass


class QueueFull(RuntimeError):
    """Raised only under the "error" overflow policy; the default drops."""


@dataclass
class TaskHandle:
    """One open task execution; closed exactly once by task_end."""

    task_id: str
    transformation_tag: str
    iteration: int | None
    wall_start: int
    _t0: float
    prov_ms: float = 0.0
    ext_ms: float = 0.0
    s_point_ms: float = 0.0
    s_action_ms: float = 0.0
    closed: bool = False


@dataclass(frozen=True)
class TuneRecord:
    """One captured steering action, ready for the host to apply."""

    action_id: str
    dataset_tag: str
    eta: dict[str, Any]
    criteria: ElementCriteria | None
    theta: dict[str, Any]
    user: str
    related_tasks: tuple[str, ...]
    iteration_data: dict[str, Any] | None
    wall_time: int
    reason: str | None = None


class TrackerSession:
    """One instrumented workflow run (one session per process per run).

    One control thread drives the workflow and all steering checks; a
    daemon sender thread owns all network transmission. task_begin/task_end
    may additionally be called from a dispatch pool's workers (sweep mode),
    so handle bookkeeping and message sequencing take a small internal
    lock. Extractors run synchronously on the caller's context.
    """

    def __init__(
        self,
        workflow_run_id: str,
        dataflow: DataflowDef,
        server_url: str | None = None,
        user: str | None = None,
        queue_capacity: int | None = None,
        adapter_backend: AdapterBackend | None = None,
        block_ms: float = DEFAULT_BLOCK_MS,
        overflow_policy: str = "drop",
        sink: Callable[[dict[str, Any]], None] | None = None,
        batch_size: int = 256,
        send_timeout: tuple[float, float] = (2.0, 5.0),
    ) -> None:
        if overflow_policy not in ("drop", "error"):
            raise ValueError(f"unknown overflow policy {overflow_policy!r}")
        self.workflow_run_id = workflow_run_id
        self.dataflow = dataflow
        self.server_url = server_url if server_url is not None else os.environ.get("STEERD_SERVER_URL")
        self.user = user if user is not None else os.environ.get("STEERD_USER", "unknown")
        self.adapter_backend = adapter_backend
        if queue_capacity is None:
            queue_capacity = int(os.environ.get("STEERD_QUEUE_CAP", DEFAULT_QUEUE_CAP))
        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._block_ms = block_ms
        self._overflow_policy = overflow_policy
        self._sink = sink
        self._batch_size = batch_size
        self._send_timeout = send_timeout
        self._seq = 0
        self._task_counter = 0
        self._nonce = uuid.uuid4().hex[:8]
        self._lock = threading.Lock()
        self._open: dict[str, TaskHandle] = {}
        self._open_by_tag: dict[str, TaskHandle] = {}
        self._last_outputs: dict[str, list[str]] = {}
        self._extractors: dict[str, Callable[[list[DataElement]], Mapping[str, Any]]] = {}
        self.dropped_messages = 0
        self.sent_messages = 0
        self.tunes_emitted = 0
        self._closing_deadline: float | None = None
        self._sender: threading.Thread | None = None
        if self._sink is None and self.server_url:
            self._sender = threading.Thread(
                target=self._sender_loop, name="steerd-sender", daemon=True
            )
            self._sender.start()

    # -- message plumbing ---------------------------------------------------

    def _enqueue(self, kind: str, payload: dict[str, Any]) -> None:
        # One lock covers seq assignment and queue insertion so messages hit
        # the wire in client_seq order even when worker threads emit.
        with self._lock:
            self._seq += 1
            message = {"kind": kind, "client_seq": self._seq, "payload": payload}
            if self._sink is not None:
                self._sink(message)
                self.sent_messages += 1
                return
            if not self.server_url:
                return
            try:
                self._queue.put_nowait(message)
                return
            except queue.Full:
                pass
            try:
                self._queue.put(message, timeout=self._block_ms / 1000.0)
            except queue.Full:
                if self._overflow_policy == "error":
                    raise QueueFull(f"send queue full after {self._block_ms} ms") from None
                self.dropped_messages += 1

    def _sender_loop(self) -> None:
        session = requests.Session()
        url = self.server_url.rstrip("/") + "/v1/ingest"
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            batch = [item]
            while len(batch) < self._batch_size:
                try:
                    nxt = self._queue.get_nowait()
                except queue.Empty:
                    break
                if nxt is _STOP:
                    self._post_batch(session, url, batch)
                    return
                batch.append(nxt)
            self._post_batch(session, url, batch)

    def _post_batch(self, session: requests.Session, url: str, batch: list) -> None:
        body = "".join(json.dumps(m) + "\n" for m in batch).encode()
        delay = 0.1
        while True:
            deadline = self._closing_deadline
            if deadline is not None and time.monotonic() >= deadline:
                self.dropped_messages += len(batch)
                return
            try:
                response = session.post(
                    url,
                    data=body,
                    headers={"Content-Type": "application/x-ndjson"},
                    timeout=self._send_timeout,
                )
                response.raise_for_status()
                self.sent_messages += len(batch)
                return
            except requests.RequestException:
                deadline = self._closing_deadline
                if deadline is not None and time.monotonic() >= deadline:
                    self.dropped_messages += len(batch)
                    return
                time.sleep(min(delay, 1.0))
                delay *= 2

    def close(self, flush_timeout: float = 10.0) -> dict[str, int]:
        """Flush the queue (bounded) and stop the sender; returns counters."""
        if self._sender is not None:
            self._closing_deadline = time.monotonic() + flush_timeout
            self._queue.put(_STOP)
            self._sender.join(timeout=flush_timeout + self._send_timeout[1] + 2.0)
            if self._sender.is_alive():
                self.dropped_messages += self._queue.qsize()
            else:
                drained = 0
                while True:
                    try:
                        if self._queue.get_nowait() is not _STOP:
                            drained += 1
                    except queue.Empty:
                        break
                self.dropped_messages += drained
            self._sender = None
        return self.stats()

    def stats(self) -> dict[str, int]:
        return {
            "sent": self.sent_messages,
            "dropped": self.dropped_messages,
            "queued": self._queue.qsize(),
            "tunes": self.tunes_emitted,
        }

    # -- monitoring points ----------------------------------------------------

    def task_begin(
        self,
        transformation_tag: str,
        inputs: Iterable[DataElement] = (),
        iteration: int | None = None,
    ) -> TaskHandle:
        """Open a task; enqueues the begin message with its input elements."""
        t0 = time.perf_counter()
        c0 = time.thread_time()
        if transformation_tag not in self.dataflow.transformation_tags():
            raise UnknownTransformation(transformation_tag)
        transformation = self.dataflow.transformation(transformation_tag)
        self._task_counter += 1
        task_id = f"{self.workflow_run_id}-{self._nonce}-t{self._task_counter}"
        wall_start = now_micros()
        handle = TaskHandle(task_id, transformation_tag, iteration, wall_start, t0)
        payload: dict[str, Any] = {
            "task_id": task_id,
            "workflow_run_id": self.workflow_run_id,
            "transformation_tag": transformation_tag,
            "wall_start": wall_start,
            "inputs": [
                {
                    "dataset_tag": transformation.input_schemas[0] if transformation.input_schemas else "",
                    "element_id": e.element_id,
                    "values": dict(e.values),
                }
                for e in inputs
            ],
        }
        if iteration is not None:
            payload["iteration"] = iteration
        self._enqueue("task_begin", payload)
        handle.prov_ms += (time.thread_time() - c0) * 1000.0
        with self._lock:
            self._open[task_id] = handle
            self._open_by_tag[transformation_tag] = handle
        return handle

    def task_end(self, handle: TaskHandle, outputs: Iterable[DataElement] = ()) -> None:
        """Close a task: run extractors, decompose costs, enqueue the end."""
        if handle.closed:
            raise AlreadyClosed(handle.task_id)
        outputs = list(outputs)
        transformation = self.dataflow.transformation(handle.transformation_tag)
        extractor = self._extractors.get(handle.transformation_tag)
        if extractor is not None:
            t_ext = time.perf_counter()
            extracted = dict(extractor(outputs))
            handle.ext_ms += (time.perf_counter() - t_ext) * 1000.0
            if extracted:
                if outputs:
                    first = outputs[0]
                    merged = dict(first.values)
                    merged.update(extracted)
                    outputs[0] = DataElement(first.element_id, merged)
                else:
                    tag = transformation.output_schemas[0] if transformation.output_schemas else ""
                    outputs.append(DataElement(f"{handle.task_id}-ext", extracted))
        c_prep = time.thread_time()
        out_tag = transformation.output_schemas[0] if transformation.output_schemas else ""
        outputs_wire = [
            {"dataset_tag": out_tag, "element_id": e.element_id, "values": dict(e.values)}
            for e in outputs
        ]
        handle.prov_ms += (time.thread_time() - c_prep) * 1000.0
        elapsed_ms = (time.perf_counter() - handle._t0) * 1000.0
        comp_ms = max(
            0.0,
            elapsed_ms
            - handle.prov_ms
            - handle.ext_ms
            - handle.s_point_ms
            - handle.s_action_ms,
        )
        wall_end = handle.wall_start + int(round(elapsed_ms * 1000.0))
        payload = {
            "task_id": handle.task_id,
            "wall_end": wall_end,
            "outputs": outputs_wire,
            "perf": {
                "comp_ms": comp_ms,
                "prov_ms": handle.prov_ms,
                "ext_ms": handle.ext_ms,
                "s_point_ms": handle.s_point_ms,
                "s_action_ms": handle.s_action_ms,
            },
        }
        handle.closed = True
        with self._lock:
            self._open.pop(handle.task_id, None)
            if self._open_by_tag.get(handle.transformation_tag) is handle:
                del self._open_by_tag[handle.transformation_tag]
            self._last_outputs[handle.transformation_tag] = [e.element_id for e in outputs]
        self._enqueue("task_end", payload)

    def register_extractor(
        self,
        transformation_tag: str,
        extractor: Callable[[list[DataElement]], Mapping[str, Any]],
    ) -> None:
        """Attach a raw-data extractor, invoked once per task_end of the tag.

        The extractor runs synchronously; its wall time is charged to the
        task's ext cost and its returned values are merged into the task's
        first output element.
        """
        if transformation_tag not in self.dataflow.transformation_tags():
            raise UnknownTransformation(transformation_tag)
        self._extractors[transformation_tag] = extractor

    # -- steering points --------------------------------------------------------

    def _steering_transformation(self, dataset_tag: str) -> str | None:
        for t in self.dataflow.transformations:
            if t.has_steering_point and dataset_tag in t.input_schemas:
                return t.tag
        return None

    def _loop_attributes(self, dataset_tag: str) -> set[str]:
        try:
            schema = self.dataflow.schema(dataset_tag)
        except KeyError:
            return set()
        return set(classify_attributes(schema).get("L_I", ()))

    def _charge(self, dataset_tag: str, s_point: float, s_action: float) -> None:
        tag = self._steering_transformation(dataset_tag)
        handle = self._open_by_tag.get(tag) if tag else None
        if handle is not None:
            handle.s_point_ms += s_point
            handle.s_action_ms += s_action

    def steering_point_check(
        self,
        dataset_tag: str,
        element: DataElement,
        iteration_data: Mapping[str, Any] | None = None,
    ) -> list[TuneRecord]:
        """Poll for pending commands and capture each application.

        With nothing pending this is a bounded, milliseconds-scale check
        (charged to the open steering task's s_point cost). Pending commands
        are captured in issue order against the element, each yielding a
        TuneRecord whose theta holds the values the command replaces; theta
        for later commands sees earlier applications. A command naming a
        parameter the element lacks aborts the whole batch before anything
        is applied or emitted — the affected intents dangle at run close —
        and raises NoSuchParameter. Transport failures are raised, never
        swallowed. The host is responsible for actually installing eta.
        """
        if self.adapter_backend is None:
            return []
        commands = self._timed_poll(dataset_tag)
        if not commands:
            return []
        c1 = time.thread_time()
        try:
            records = self._capture_batch(dataset_tag, element, commands, iteration_data)
        finally:
            self._charge(dataset_tag, 0.0, (time.thread_time() - c1) * 1000.0)
        return records

    def _timed_poll(self, dataset_tag: str) -> list[SteeringCommand]:
        # An idle probe is steering-point cost; a poll that consumed commands
        # (including its transport I/O) belongs to the action it noticed.
        c0 = time.thread_time()
        commands: list[SteeringCommand] = []
        try:
            commands = self.adapter_backend.poll(dataset_tag)
        finally:
            cost = (time.thread_time() - c0) * 1000.0
            if commands:
                self._charge(dataset_tag, 0.0, cost)
            else:
                self._charge(dataset_tag, cost, 0.0)
        return commands

    def _capture_batch(
        self,
        dataset_tag: str,
        element: DataElement,
        commands: list[SteeringCommand],
        iteration_data: Mapping[str, Any] | None,
    ) -> list[TuneRecord]:
        element_keys = set(element.values)
        for cmd in commands:
            missing = sorted(set(cmd.eta) - element_keys)
            if missing:
                raise NoSuchParameter(missing[0])
        loop_attrs = self._loop_attributes(dataset_tag)
        records = []
        working = element
        for cmd in commands:
            theta = {k: working.values[k] for k in cmd.eta}
            d = self._iteration_snapshot(dataset_tag, cmd, loop_attrs, iteration_data)
            influenced = (
                list(self._last_outputs.get(self._steering_transformation(dataset_tag) or "", []))
                if d is not None
                else []
            )
            records.append(
                self._emit_applied(
                    cmd,
                    theta,
                    d,
                    modified_element_ids=[element.element_id],
                    influenced_element_ids=influenced,
                )
            )
            working = working.with_values(cmd.eta)
        return records

    def steering_point_check_pending(
        self,
        dataset_tag: str,
        pending: list[DataElement],
        iteration_data: Mapping[str, Any] | None = None,
    ) -> tuple[list[TuneRecord], list[DataElement]]:
        """Sweep-mode check: criteria-matched application over pending elements.

        Each command tunes exactly the still-pending elements its criteria
        match; theta comes from the first matched element, and a command
        matching nothing is still recorded (empty modified set, empty
        theta). Returns the records and the updated pending list.
        """
        if self.adapter_backend is None:
            return [], pending
        commands = self._timed_poll(dataset_tag)
        if not commands:
            return [], pending
        c1 = time.thread_time()
        try:
            schema_names = set(self.dataflow.schema(dataset_tag).attribute_names())
            for cmd in commands:
                missing = sorted(set(cmd.eta) - schema_names)
                if missing:
                    raise NoSuchParameter(missing[0])
            records = []
            working = list(pending)
            loop_attrs = self._loop_attributes(dataset_tag)
            for cmd in commands:
                criteria = cmd.criteria or ElementCriteria()
                matched = match_elements(working, criteria)
                matched_ids = {e.element_id for e in matched}
                theta = (
                    {k: matched[0].values[k] for k in cmd.eta} if matched else {}
                )
                d = (
                    self._iteration_snapshot(dataset_tag, cmd, loop_attrs, iteration_data)
                    if matched
                    else None
                )
                records.append(
                    self._emit_applied(
                        cmd,
                        theta,
                        d,
                        modified_element_ids=sorted(matched_ids),
                        influenced_element_ids=[],
                    )
                )
                working = [
                    e.with_values(cmd.eta) if e.element_id in matched_ids else e
                    for e in working
                ]
        finally:
            self._charge(dataset_tag, 0.0, (time.thread_time() - c1) * 1000.0)
        return records, working

    def _iteration_snapshot(
        self,
        dataset_tag: str,
        cmd: SteeringCommand,
        loop_attrs: set[str],
        iteration_data: Mapping[str, Any] | None,
    ) -> dict[str, Any] | None:
        if not any(k in loop_attrs for k in cmd.eta):
            return None
        if iteration_data is not None:
            return dict(iteration_data)
        tag = self._steering_transformation(dataset_tag)
        handle = self._open_by_tag.get(tag) if tag else None
        if handle is not None and handle.iteration is not None:
            return {"t_step": handle.iteration}
        return None

    def _emit_applied(
        self,
        cmd: SteeringCommand,
        theta: dict[str, Any],
        iteration_data: dict[str, Any] | None,
        modified_element_ids: list[str],
        influenced_element_ids: list[str],
    ) -> TuneRecord:
        with self._lock:
            related = tuple(sorted(self._open))
        wall_time = now_micros()
        payload: dict[str, Any] = {
            "action_id": cmd.action_id,
            "applied_at": wall_time,
            "theta": theta,
            "modified_element_ids": modified_element_ids,
            "influenced_element_ids": influenced_element_ids,
            "influenced_task_ids": list(related),
        }
        if iteration_data is not None:
            payload["iteration_data"] = iteration_data
        self._enqueue("steer_applied", payload)
        self.tunes_emitted += 1
        return TuneRecord(
            action_id=cmd.action_id,
            dataset_tag=cmd.dataset_tag,
            eta=dict(cmd.eta),
            criteria=cmd.criteria,
            theta=theta,
            user=cmd.user or self.user,
            related_tasks=related,
            iteration_data=iteration_data,
            wall_time=wall_time,
            reason=cmd.reason,
        )
