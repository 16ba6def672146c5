"""Synthetic steerable workflows with closed-form, exactly checkable dynamics.

Two modes:

* timeloop — a sedimentation-style iterative solver: setup, then a time
  loop holding the steering point, the solvers, and mesh refinement. Linear
  iterations follow a geometric residual contraction, so tuning the solver
  tolerance moves the per-iteration iteration count by an amount the closed
  form predicts exactly; the element count grows by a fixed refine rate and
  shrinks with the coarsening fraction.
* sweep — a mosaic-assembly parameter sweep: independent input elements
  processed in order through a short task chain, with a steering check
  before each dispatch so tunes touch only elements not yet processed.

Fixed config plus a fixed scripted tune schedule gives a bit-identical
quantity-of-interest series across runs.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Mapping

import requests

from . import adapter as adapter_mod
from .adapter import SteeringCommand, TransportConfig, open_backend
from .model import (
    AttributeDef,
    DataDependency,
    DataElement,
    DataflowDef,
    DatasetSchema,
    DataTransformationDef,
    ElementCriteria,
    dataflow_to_doc,
)
from .tracker import TrackerSession
from .wire import now_micros

PARAMS_DATASET = "I_Iteration_Params"
QOI_DATASET = "O_Iteration_Params"
SWEEP_DATASET = "I_List_FITS"
E_MIN = 100


class DomainError(ValueError):
    pass


class ElementOverflow(RuntimeError):
    """Mesh growth exceeded the element budget with clamping disabled."""


@dataclass
class SimParams:
    """The tunable per-iteration solver parameters (the steering target)."""

    n_time_steps: int
    flow_initial_linear_solver_tolerance: float = 1e-8
    minimum_linear_solver_tolerance: float = 1e-8
    max_linear_iterations: int = 500
    max_nonlinear_steps: int = 4
    amr_c_fraction: float = 0.01
    tmax: float = 1e30
    dt: float = 0.01
    contraction_rho: float = 0.5
    initial_residual: float = 1.0
    refine_rate: float = 0.02
    coarsen_gain: float = 1.0
    compute_floor_ms: float = 50.0

    # dataclass attribute -> dataset attribute (slash is not an identifier)
    _KEY_MAP = {"amr_c_fraction": "amr/c_fraction"}

    def validate(self) -> None:
        if self.flow_initial_linear_solver_tolerance <= 0:
            raise DomainError("flow tolerance must be positive")
        if self.minimum_linear_solver_tolerance <= 0:
            raise DomainError("minimum tolerance must be positive")
        if self.flow_initial_linear_solver_tolerance < self.minimum_linear_solver_tolerance:
            raise DomainError("flow tolerance below the minimum tolerance")
        if self.max_linear_iterations < 1 or self.max_nonlinear_steps < 1:
            raise DomainError("iteration limits must be positive")
        if not 0 < self.amr_c_fraction < 1:
            raise DomainError("amr/c_fraction must lie in (0, 1)")
        if self.n_time_steps < 1 or self.tmax <= 0 or self.dt <= 0:
            raise DomainError("time bounds must be positive")
        if not 0 < self.contraction_rho < 1:
            raise DomainError("contraction_rho must lie in (0, 1)")
        if self.initial_residual <= 0:
            raise DomainError("initial_residual must be positive")
        if self.refine_rate < 0 or self.coarsen_gain < 0 or self.compute_floor_ms < 0:
            raise DomainError("rates and durations must be non-negative")

    def to_values(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            out[self._KEY_MAP.get(f.name, f.name)] = getattr(self, f.name)
        return out

    @classmethod
    def from_values(cls, values: Mapping[str, Any]) -> "SimParams":
        reverse = {v: k for k, v in cls._KEY_MAP.items()}
        kwargs = {reverse.get(k, k): v for k, v in values.items()}
        names = {f.name for f in fields(cls)}
        unknown = set(kwargs) - names
        if unknown:
            raise DomainError(f"unknown parameter {sorted(unknown)[0]}")
        params = cls(**kwargs)
        # JSON carries no int/float distinction worth trusting
        params.n_time_steps = int(params.n_time_steps)
        params.max_linear_iterations = int(params.max_linear_iterations)
        params.max_nonlinear_steps = int(params.max_nonlinear_steps)
        params.validate()
        return params


@dataclass
class SimState:
    t_step: int = 0
    time: float = 0.0
    num_elements: int = 1000
    last_linear_iters: int = 0
    last_nonlinear_iters: int = 0


@dataclass(frozen=True)
class SweepElement:
    """One parameter combination of the mosaic sweep."""

    survey: str
    band: str
    location: str
    width: float
    height: float
    fits_dir: str

    def to_values(self) -> dict[str, Any]:
        if not self.band:
            raise DomainError("band must be nonempty")
        return {
            "survey": self.survey,
            "band": self.band,
            "location": self.location,
            "width": self.width,
            "height": self.height,
            "fits_dir": self.fits_dir,
        }


def solver_iters(
    tolerance: float, rho: float, r0: float, max_iters: int | None = None
) -> int:
    """Iterations for a geometric contraction to reach `tolerance` from r0.

    ceil(ln(r0/tolerance) / ln(1/rho)), clamped to max_iters when given;
    monotone non-increasing in tolerance.
    """
    if not 0 < tolerance < r0:
        raise DomainError(f"tolerance must lie in (0, {r0}), got {tolerance}")
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    n = math.ceil(math.log(r0 / tolerance) / math.log(1.0 / rho))
    n = max(1, n)
    if max_iters is not None:
        n = min(n, max_iters)
    return n


def _busy_compute(duration_ms: float) -> None:
    deadline = time.perf_counter() + duration_ms / 1000.0
    while time.perf_counter() < deadline:
        pass


def step(
    state: SimState,
    params: SimParams,
    e_max: int,
    overflow: str = "clamp",
) -> tuple[SimState, dict[str, Any]]:
    """Advance one iteration; returns the new state and its QoI values.

    The mesh factor is 1 + refine_rate - coarsen_gain * amr/c_fraction, so
    raising the coarsening fraction shrinks the mesh. With overflow="halt"
    an element count beyond e_max raises ElementOverflow instead of
    clamping.
    """
    per_nonlinear = solver_iters(
        params.flow_initial_linear_solver_tolerance,
        params.contraction_rho,
        params.initial_residual,
        params.max_linear_iterations,
    )
    linear_iters = per_nonlinear * params.max_nonlinear_steps
    factor = 1.0 + params.refine_rate - params.coarsen_gain * params.amr_c_fraction
    grown = round(state.num_elements * factor)
    if grown > e_max and overflow == "halt":
        raise ElementOverflow(
            f"t_step {state.t_step + 1}: {grown} elements exceed the budget of {e_max}"
        )
    num_elements = min(max(int(grown), E_MIN), e_max)
    _busy_compute(params.compute_floor_ms)
    t_step = state.t_step + 1
    sim_time = t_step * params.dt
    new_state = SimState(
        t_step=t_step,
        time=sim_time,
        num_elements=num_elements,
        last_linear_iters=linear_iters,
        last_nonlinear_iters=params.max_nonlinear_steps,
    )
    qoi = {
        "t_step": t_step,
        "time": sim_time,
        "linear_iters": linear_iters,
        "nonlinear_iters": params.max_nonlinear_steps,
        "num_elements": num_elements,
    }
    return new_state, qoi


# --- prospective definitions ---------------------------------------------

def sedimentation_dataflow() -> DataflowDef:
    """Setup pair plus a five-transformation time loop (steering on the loop)."""
    params_schema = DatasetSchema(
        PARAMS_DATASET,
        "input",
        tuple(
            AttributeDef(name, "numeric", "L_I")
            for name in (
                "n_time_steps",
                "flow_initial_linear_solver_tolerance",
                "minimum_linear_solver_tolerance",
                "max_linear_iterations",
                "max_nonlinear_steps",
                "amr/c_fraction",
                "tmax",
                "dt",
                "contraction_rho",
                "initial_residual",
                "refine_rate",
                "coarsen_gain",
                "compute_floor_ms",
            )
        ),
    )
    qoi_schema = DatasetSchema(
        QOI_DATASET,
        "output",
        (
            AttributeDef("t_step", "numeric", "L_O"),
            AttributeDef("time", "numeric", "L_O"),
            AttributeDef("linear_iters", "numeric", "C_O"),
            AttributeDef("nonlinear_iters", "numeric", "C_O"),
            AttributeDef("num_elements", "numeric", "C_O"),
        ),
    )
    mesh_in = DatasetSchema(
        "I_Mesh_Setup", "input", (AttributeDef("mesh_file", "textual", "F_I"),)
    )
    mesh_out = DatasetSchema(
        "O_Mesh_Setup", "output", (AttributeDef("mesh_ready", "boolean", "C_O"),)
    )
    solver_in = DatasetSchema(
        "I_Solver_Setup", "input", (AttributeDef("config_file", "textual", "F_I"),)
    )
    solver_out = DatasetSchema(
        "O_Solver_Setup", "output", (AttributeDef("solver_ready", "boolean", "C_O"),)
    )
    stage_out = {
        "flow_solver": DatasetSchema(
            "O_Flow_Solver", "output", (AttributeDef("flow_residual", "numeric", "C_O"),)
        ),
        "transport_solver": DatasetSchema(
            "O_Transport_Solver",
            "output",
            (AttributeDef("transport_residual", "numeric", "C_O"),),
        ),
        "mesh_refinement": DatasetSchema(
            "O_Mesh_Refinement", "output", (AttributeDef("elements", "numeric", "C_O"),)
        ),
        "write_output": DatasetSchema(
            "O_Write_Output", "output", (AttributeDef("snapshot_file", "textual", "F_O"),)
        ),
    }
    transformations = (
        DataTransformationDef("setup_mesh", ("I_Mesh_Setup",), ("O_Mesh_Setup",)),
        DataTransformationDef("setup_solver", ("I_Solver_Setup",), ("O_Solver_Setup",)),
        DataTransformationDef(
            "time_loop",
            (PARAMS_DATASET,),
            (QOI_DATASET,),
            is_loop_evaluator=True,
            has_steering_point=True,
        ),
        DataTransformationDef("flow_solver", (PARAMS_DATASET,), ("O_Flow_Solver",)),
        DataTransformationDef("transport_solver", (PARAMS_DATASET,), ("O_Transport_Solver",)),
        DataTransformationDef("mesh_refinement", (PARAMS_DATASET,), ("O_Mesh_Refinement",)),
        DataTransformationDef("write_output", (PARAMS_DATASET,), ("O_Write_Output",)),
    )
    dependencies = (
        DataDependency(frozenset(), "setup_mesh", "time_loop"),
        DataDependency(frozenset(), "setup_solver", "time_loop"),
        DataDependency(frozenset(), "time_loop", "flow_solver"),
        DataDependency(frozenset(), "flow_solver", "transport_solver"),
        DataDependency(frozenset(), "transport_solver", "mesh_refinement"),
        DataDependency(frozenset(), "mesh_refinement", "write_output"),
        DataDependency(frozenset(), "write_output", "time_loop"),
    )
    return DataflowDef(
        "sedimentation",
        transformations,
        (
            params_schema,
            qoi_schema,
            mesh_in,
            mesh_out,
            solver_in,
            solver_out,
            *stage_out.values(),
        ),
        dependencies,
        "cyclic_dependent_loop",
    )


def sweep_dataflow() -> DataflowDef:
    """Mosaic sweep: list -> projection -> select -> mosaic per element."""
    list_in = DatasetSchema(
        SWEEP_DATASET,
        "input",
        (
            AttributeDef("survey", "textual", "P_I"),
            AttributeDef("band", "textual", "P_I"),
            AttributeDef("location", "textual", "P_I"),
            AttributeDef("width", "numeric", "P_I"),
            AttributeDef("height", "numeric", "P_I"),
            AttributeDef("fits_dir", "textual", "F_I"),
        ),
    )
    list_out = DatasetSchema(
        "O_List_FITS",
        "output",
        (
            AttributeDef("file_set", "textual", "F_O"),
            AttributeDef("n_files", "numeric", "C_O"),
        ),
    )
    proj_out = DatasetSchema(
        "O_Projection",
        "output",
        (
            AttributeDef("proj_file", "textual", "F_O"),
            AttributeDef("crval1", "numeric", "V_O"),
            AttributeDef("crval2", "numeric", "V_O"),
        ),
    )
    select_out = DatasetSchema(
        "O_Select_Projections", "output", (AttributeDef("joined_file", "textual", "F_O"),)
    )
    mosaic_out = DatasetSchema(
        "O_Mosaic", "output", (AttributeDef("mosaic_jpg", "textual", "F_O"),)
    )
    transformations = (
        DataTransformationDef("list_fits", (SWEEP_DATASET,), ("O_List_FITS",), has_steering_point=True),
        DataTransformationDef("projection", (SWEEP_DATASET,), ("O_Projection",)),
        DataTransformationDef("select_projections", (SWEEP_DATASET,), ("O_Select_Projections",)),
        DataTransformationDef("create_mosaic", (SWEEP_DATASET,), ("O_Mosaic",)),
    )
    dependencies = (
        DataDependency(frozenset(), "list_fits", "projection"),
        DataDependency(frozenset(), "projection", "select_projections"),
        DataDependency(frozenset(), "select_projections", "create_mosaic"),
    )
    return DataflowDef(
        "mosaic_sweep",
        transformations,
        (list_in, list_out, proj_out, select_out, mosaic_out),
        dependencies,
        "parameter_sweep",
    )


# --- scripted tune schedules -----------------------------------------------

@dataclass
class ScheduledTune:
    """A tune submitted by the run script itself at a fixed point."""

    eta: dict[str, Any]
    at_iteration: int | None = None
    after_processed: int | None = None
    dataset_tag: str | None = None
    criteria: list | None = None
    reason: str | None = None
    user: str | None = None


@dataclass
class HarnessConfig:
    params: SimParams
    mode: str = "timeloop"
    initial_elements: int = 1000
    e_max: int | None = None
    overflow: str = "clamp"
    tune_schedule: list[ScheduledTune] = field(default_factory=list)
    sweep_elements: list[SweepElement] = field(default_factory=list)
    sweep_floor_ms: float = 1.0
    sweep_workers: int = 1
    user: str = "harness"

    def element_budget(self) -> int:
        return self.e_max if self.e_max is not None else 10 * self.initial_elements

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "HarnessConfig":
        params = SimParams.from_values(doc["params"])
        schedule = [
            ScheduledTune(
                eta=dict(t["eta"]),
                at_iteration=t.get("at_iteration"),
                after_processed=t.get("after_processed"),
                dataset_tag=t.get("dataset_tag"),
                criteria=t.get("criteria"),
                reason=t.get("reason"),
                user=t.get("user"),
            )
            for t in doc.get("tune_schedule", [])
        ]
        elements = [SweepElement(**e) for e in doc.get("sweep_elements", [])]
        return cls(
            params=params,
            mode=doc.get("mode", "timeloop"),
            initial_elements=int(doc.get("initial_elements", 1000)),
            e_max=doc.get("e_max"),
            overflow=doc.get("overflow", "clamp"),
            tune_schedule=schedule,
            sweep_elements=elements,
            sweep_floor_ms=float(doc.get("sweep_floor_ms", 1.0)),
            sweep_workers=int(doc.get("sweep_workers", 1)),
            user=doc.get("user", "harness"),
        )


def _submit_scheduled(
    tune: ScheduledTune,
    config: HarnessConfig,
    session: TrackerSession,
    front_cfg: TransportConfig,
    default_dataset: str,
) -> None:
    cmd = SteeringCommand(
        action_id=f"sched-{uuid.uuid4().hex[:12]}",
        workflow_run_id=session.workflow_run_id,
        dataset_tag=tune.dataset_tag or default_dataset,
        eta=dict(tune.eta),
        user=tune.user or config.user,
        criteria=ElementCriteria.from_wire(tune.criteria),
        reason=tune.reason,
        issued_at=now_micros(),
    )
    adapter_mod.front_submit(cmd, front_cfg, server_url=session.server_url)


def run_timeloop(
    config: HarnessConfig,
    session: TrackerSession,
    adapter_cfg: TransportConfig | None = None,
    on_iteration: Callable[[dict[str, Any]], None] | None = None,
) -> SimState:
    """Drive the time loop: begin task, steering check, apply tunes, step.

    Commands arriving mid-iteration land at the next check, so a tune's
    effect appears no later than two iterations after submission. Raises
    ElementOverflow in halt mode; transport failures propagate.
    """
    params = config.params
    params.validate()
    backend = None
    if adapter_cfg is not None:
        backend = open_backend(adapter_cfg)
        session.adapter_backend = backend
    front_cfg = backend.cfg if backend is not None else adapter_cfg
    schedule = {
        t.at_iteration: t for t in config.tune_schedule if t.at_iteration is not None
    }
    state = SimState(num_elements=config.initial_elements)
    element = DataElement(f"{PARAMS_DATASET}-e1", params.to_values())
    try:
        while state.t_step < params.n_time_steps and state.time < params.tmax:
            t = state.t_step + 1
            handle = session.task_begin("time_loop", inputs=[element], iteration=t)
            records = session.steering_point_check(
                PARAMS_DATASET,
                element,
                iteration_data={"t_step": t, "time": t * params.dt},
            )
            for record in records:
                element = element.with_values(record.eta)
            if records:
                params = SimParams.from_values(element.values)
            state, qoi = step(state, params, config.element_budget(), config.overflow)
            session.task_end(handle, outputs=[DataElement(f"o-iter-{t}", qoi)])
            if on_iteration is not None:
                on_iteration(qoi)
            scheduled = schedule.pop(t, None)
            if scheduled is not None and front_cfg is not None:
                _submit_scheduled(scheduled, config, session, front_cfg, PARAMS_DATASET)
    finally:
        if backend is not None:
            backend.close()
            session.adapter_backend = None
    return state


_SWEEP_CHAIN = ("list_fits", "projection", "select_projections", "create_mosaic")


def _sweep_outputs(stage: str, element: DataElement, index: int) -> DataElement:
    base = f"{element.element_id}-{stage}"
    values: dict[str, Any]
    if stage == "list_fits":
        values = {"file_set": f"{element.values['fits_dir']}/set-{index}.zip", "n_files": 20}
    elif stage == "projection":
        values = {
            "proj_file": f"{base}.proj",
            "crval1": float(element.values["width"]) * 15.0,
            "crval2": float(element.values["height"]) * 15.0,
        }
    elif stage == "select_projections":
        values = {"joined_file": f"{base}.tbl"}
    else:
        values = {"mosaic_jpg": f"{base}.jpg"}
    return DataElement(base, values)


def run_sweep(
    elements: list[SweepElement] | list[DataElement],
    config: HarnessConfig,
    session: TrackerSession,
    adapter_cfg: TransportConfig | None = None,
) -> list[dict[str, Any]]:
    """Process sweep elements in order with a steering check before each.

    Tunes apply only to elements whose task chains have not started; each
    element runs its own four-stage chain, sequentially by default or on a
    pool of sweep_workers. Steering checks and tune application happen only
    on the control context between dispatches, so the exactly-once
    pending-element semantics hold at any worker count. Returns the values
    each element was actually processed with, in dispatch order.
    """
    if not elements:
        raise DomainError("sweep requires at least one element")
    backend = None
    if adapter_cfg is not None:
        backend = open_backend(adapter_cfg)
        session.adapter_backend = backend
    front_cfg = backend.cfg if backend is not None else adapter_cfg
    pending: list[DataElement] = [
        e
        if isinstance(e, DataElement)
        else DataElement(f"{SWEEP_DATASET}-e{i + 1}", e.to_values())
        for i, e in enumerate(elements)
    ]
    schedule = {
        t.after_processed: t
        for t in config.tune_schedule
        if t.after_processed is not None
    }

    def process(element: DataElement, index: int) -> dict[str, Any]:
        for stage in _SWEEP_CHAIN:
            handle = session.task_begin(stage, inputs=[element], iteration=index)
            _busy_compute(config.sweep_floor_ms)
            session.task_end(handle, outputs=[_sweep_outputs(stage, element, index)])
        return {"element_id": element.element_id, "values": dict(element.values)}

    workers = max(1, config.sweep_workers)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    futures = []
    results = []
    try:
        index = 0
        while pending:
            scheduled = schedule.pop(index, None)
            if scheduled is not None and front_cfg is not None:
                _submit_scheduled(scheduled, config, session, front_cfg, SWEEP_DATASET)
            _, pending = session.steering_point_check_pending(SWEEP_DATASET, pending)
            element = pending.pop(0)
            index += 1
            if pool is None:
                results.append(process(element, index))
            else:
                futures.append(pool.submit(process, element, index))
        if pool is not None:
            results = [f.result() for f in futures]
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
        if backend is not None:
            backend.close()
            session.adapter_backend = None
    return results


# --- command line ------------------------------------------------------------

def _register_run(
    server_url: str, df: DataflowDef, run_id: str | None, transport: TransportConfig
) -> str:
    doc = dataflow_to_doc(df)
    doc["transport"] = transport.to_wire()
    if run_id:
        doc["workflow_run_id"] = run_id
    response = requests.post(server_url.rstrip("/") + "/v1/runs", json=doc, timeout=10)
    response.raise_for_status()
    return response.json()["workflow_run_id"]


def _close_run(server_url: str, run_id: str) -> None:
    requests.post(
        server_url.rstrip("/") + f"/v1/runs/{run_id}/close", timeout=10
    ).raise_for_status()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="steersim-harness", description=__doc__)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--run-id", default=None, help="use a fixed run id")
    args = parser.parse_args(argv)
    with open(args.config, encoding="utf-8") as fp:
        config = HarnessConfig.from_doc(json.load(fp))
    server_url = os.environ.get("STEERD_SERVER_URL")
    transport = TransportConfig.from_env()
    if not server_url:
        print("STEERD_SERVER_URL is not set", file=sys.stderr)
        return 2
    df = sedimentation_dataflow() if config.mode == "timeloop" else sweep_dataflow()
    run_id = _register_run(server_url, df, args.run_id, transport)
    session = TrackerSession(
        run_id, df, server_url=server_url, user=os.environ.get("STEERD_USER", config.user)
    )
    tunes_applied = 0
    final_elements = 0
    iterations = 0
    try:
        if config.mode == "timeloop":
            state = run_timeloop(config, session, transport)
            iterations = state.t_step
            final_elements = state.num_elements
        else:
            results = run_sweep(config.sweep_elements, config, session, transport)
            iterations = len(results)
            final_elements = len(results)
        tunes_applied = session.tunes_emitted
    except ElementOverflow as exc:
        print(f"halted: {exc}", file=sys.stderr)
        stats = session.close()
        _close_run(server_url, run_id)
        if stats["dropped"]:
            print(f"tracker: {stats['dropped']} messages dropped", file=sys.stderr)
        return 1
    stats = session.close()
    _close_run(server_url, run_id)
    if stats["dropped"]:
        print(f"tracker: {stats['dropped']} messages dropped", file=sys.stderr)
    print(
        json.dumps(
            {
                "iterations": iterations,
                "tunes_applied": tunes_applied,
                "final_elements": final_elements,
            }
        )
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
