"""steerd: computational-steering provenance toolkit.

Instrument an iterative workflow with monitoring and steering points, tune
its parameters while it runs (CLI or dashboard, over file / message / kv
transports), and keep every steering action as queryable provenance related
to domain, execution, and performance data — captured asynchronously with
bounded overhead.
"""

from .model import (
    AttributeDef,
    DataDependency,
    DataElement,
    DataflowDef,
    DatasetSchema,
    DataTransformationDef,
    ElementCriteria,
    classify_attributes,
    load_dataflow,
    match_elements,
    validate_dataflow,
)
from .adapter import SteeringCommand, TransportConfig, apply_tune, front_submit, open_backend
from .store import ProvStore
from .tracker import TrackerSession, TuneRecord

__all__ = [
    "AttributeDef",
    "DataDependency",
    "DataElement",
    "DataflowDef",
    "DatasetSchema",
    "DataTransformationDef",
    "ElementCriteria",
    "ProvStore",
    "SteeringCommand",
    "TrackerSession",
    "TransportConfig",
    "TuneRecord",
    "apply_tune",
    "classify_attributes",
    "front_submit",
    "load_dataflow",
    "match_elements",
    "open_backend",
    "validate_dataflow",
]

__version__ = "0.1.0"
