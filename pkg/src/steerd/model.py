"""Dataflow model for steerable workflows.

A dataflow is a set of data transformations exchanging datasets whose
attributes carry both a data type and a semantic class: input files (F_I),
extracted input values (V_I), general parameters (P_I), loop inputs (L_I),
and the output-side counterparts F_O / V_O / C_O (explicit results) /
L_O (per-iteration loop outputs). Everything in this module is an immutable
value type, safe to share across threads; validation reports violations as
data rather than raising.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

INPUT_SEMANTICS = ("F_I", "V_I", "P_I", "L_I")
OUTPUT_SEMANTICS = ("F_O", "V_O", "C_O", "L_O")
ALL_SEMANTICS = INPUT_SEMANTICS + OUTPUT_SEMANTICS
LOOP_SEMANTICS = ("L_I", "L_O")

DATA_TYPES = ("numeric", "textual", "array", "boolean")
DIRECTIONS = ("input", "output")
EXECUTION_MODELS = ("acyclic", "cyclic_dependent_loop", "parameter_sweep")
COMPARATORS = ("=", "!=", "<", "<=", ">", ">=")
_ORDERED_COMPARATORS = frozenset(("<", "<=", ">", ">="))


class UnknownAttribute(KeyError):
    """A predicate or tuning names an attribute the target does not have."""


class DataflowLoadError(ValueError):
    """A declarative dataflow document is structurally unusable."""


class CriteriaError(ValueError):
    """A predicate comparator is not applicable to the operand types."""


@dataclass(frozen=True)
class AttributeDef:
    name: str
    data_type: str
    semantics: str


@dataclass(frozen=True)
class DatasetSchema:
    tag: str
    direction: str
    attributes: tuple[AttributeDef, ...]

    def attribute(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise UnknownAttribute(name)

    def attribute_names(self) -> list[str]:
        return [a.name for a in self.attributes]


@dataclass(frozen=True)
class DataElement:
    """One element of a dataset: an ordered attribute-name -> value map."""

    element_id: str
    values: dict[str, Any] = field(default_factory=dict)

    def with_values(self, updates: Mapping[str, Any]) -> "DataElement":
        """Copy with some values replaced; the key set never changes."""
        merged = dict(self.values)
        for k, v in updates.items():
            if k not in merged:
                raise UnknownAttribute(k)
            merged[k] = v
        return DataElement(self.element_id, merged)


@dataclass(frozen=True)
class DataTransformationDef:
    tag: str
    input_schemas: tuple[str, ...]
    output_schemas: tuple[str, ...]
    is_loop_evaluator: bool = False
    has_steering_point: bool = False


@dataclass(frozen=True)
class DataDependency:
    elements: frozenset[str]
    producer: str
    consumer: str


@dataclass(frozen=True)
class DataflowDef:
    tag: str
    transformations: tuple[DataTransformationDef, ...]
    datasets: tuple[DatasetSchema, ...]
    dependencies: tuple[DataDependency, ...]
    execution_model: str = "acyclic"

    def schema(self, tag: str) -> DatasetSchema:
        for s in self.datasets:
            if s.tag == tag:
                return s
        raise KeyError(tag)

    def transformation(self, tag: str) -> DataTransformationDef:
        for t in self.transformations:
            if t.tag == tag:
                return t
        raise KeyError(tag)

    def transformation_tags(self) -> set[str]:
        return {t.tag for t in self.transformations}


@dataclass(frozen=True)
class Conjunct:
    attribute: str
    op: str
    value: Any


@dataclass(frozen=True)
class ElementCriteria:
    """Conjunction of attribute-comparator-literal triples; empty matches all."""

    conjuncts: tuple[Conjunct, ...] = ()

    @classmethod
    def from_wire(cls, doc: Iterable[Mapping[str, Any]] | None) -> "ElementCriteria":
        if not doc:
            return cls()
        conjuncts = []
        for c in doc:
            op = c["op"]
            if op not in COMPARATORS:
                raise CriteriaError(f"unknown comparator {op!r}")
            conjuncts.append(Conjunct(c["attribute"], op, c["value"]))
        return cls(tuple(conjuncts))

    def to_wire(self) -> list[dict[str, Any]]:
        return [
            {"attribute": c.attribute, "op": c.op, "value": c.value}
            for c in self.conjuncts
        ]


EMPTY_CRITERIA = ElementCriteria()


@dataclass(frozen=True)
class Violation:
    entity: str
    message: str


def value_matches_type(value: Any, data_type: str) -> bool:
    if data_type == "numeric":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if data_type == "textual":
        return isinstance(value, str)
    if data_type == "boolean":
        return isinstance(value, bool)
    if data_type == "array":
        return isinstance(value, (list, tuple)) and all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
        )
    return False


def _compare(op: str, left: Any, right: Any) -> bool:
    if op == "=":
        return _eq(left, right)
    if op == "!=":
        return not _eq(left, right)
    # Ordering applies to numerics (as doubles) and text; arrays and booleans
    # support equality only.
    if isinstance(left, bool) or isinstance(right, bool):
        raise CriteriaError(f"comparator {op!r} not applicable to booleans")
    if isinstance(left, (int, float)) and isinstance(right, (int, float)):
        lf, rf = float(left), float(right)
        return {"<": lf < rf, "<=": lf <= rf, ">": lf > rf, ">=": lf >= rf}[op]
    if isinstance(left, str) and isinstance(right, str):
        return {"<": left < right, "<=": left <= right, ">": left > right, ">=": left >= right}[op]
    raise CriteriaError(f"comparator {op!r} not applicable to {type(left).__name__}")


def _eq(left: Any, right: Any) -> bool:
    if isinstance(left, bool) != isinstance(right, bool):
        return False
    if isinstance(left, (list, tuple)) and isinstance(right, (list, tuple)):
        return len(left) == len(right) and all(_eq(a, b) for a, b in zip(left, right))
    if isinstance(left, (int, float)) and isinstance(right, (int, float)):
        return float(left) == float(right)
    return type(left) is type(right) and left == right


def element_matches(element: DataElement, criteria: ElementCriteria) -> bool:
    for c in criteria.conjuncts:
        if c.attribute not in element.values:
            raise UnknownAttribute(c.attribute)
        if not _compare(c.op, element.values[c.attribute], c.value):
            return False
    return True


def match_elements(
    elements: list[DataElement], criteria: ElementCriteria
) -> list[DataElement]:
    """Elements satisfying every conjunct; empty criteria returns all."""
    for c in criteria.conjuncts:
        for e in elements:
            if c.attribute not in e.values:
                raise UnknownAttribute(c.attribute)
    return [e for e in elements if element_matches(e, criteria)]


def classify_attributes(schema: DatasetSchema) -> dict[str, list[str]]:
    """Partition a schema's attributes by semantic class.

    Every class of the schema's direction appears as a key; classes with no
    attributes map to empty lists, so the union always equals the attribute
    set and classes are pairwise disjoint.
    """
    classes = INPUT_SEMANTICS if schema.direction == "input" else OUTPUT_SEMANTICS
    partition: dict[str, list[str]] = {c: [] for c in classes}
    for a in schema.attributes:
        partition.setdefault(a.semantics, []).append(a.name)
    return partition


def validate_dataflow(df: DataflowDef) -> list[Violation]:
    """Check every structural invariant; returns [] for a valid dataflow.

    Violations are data, not failures: the report names the offending entity
    and is deterministic regardless of definition order.
    """
    out: list[Violation] = []

    if df.execution_model not in EXECUTION_MODELS:
        out.append(Violation(df.tag, f"unknown execution model {df.execution_model!r}"))

    seen_schema_tags: set[str] = set()
    for schema in df.datasets:
        if schema.tag in seen_schema_tags:
            out.append(Violation(schema.tag, "duplicate dataset tag"))
        seen_schema_tags.add(schema.tag)
        if schema.direction not in DIRECTIONS:
            out.append(Violation(schema.tag, f"unknown direction {schema.direction!r}"))
            continue
        allowed = INPUT_SEMANTICS if schema.direction == "input" else OUTPUT_SEMANTICS
        seen_names: set[str] = set()
        for a in schema.attributes:
            if a.name in seen_names:
                out.append(Violation(schema.tag, f"duplicate attribute {a.name}"))
            seen_names.add(a.name)
            if a.data_type not in DATA_TYPES:
                out.append(
                    Violation(schema.tag, f"attribute {a.name}: unknown data type {a.data_type!r}")
                )
            if a.semantics not in ALL_SEMANTICS:
                out.append(
                    Violation(schema.tag, f"attribute {a.name}: unknown semantics {a.semantics!r}")
                )
            elif a.semantics not in allowed:
                out.append(
                    Violation(
                        schema.tag,
                        f"attribute {a.name}: semantics {a.semantics} not allowed "
                        f"in {schema.direction} dataset",
                    )
                )

    transformation_tags: set[str] = set()
    for t in df.transformations:
        if t.tag in transformation_tags:
            out.append(Violation(t.tag, "duplicate transformation tag"))
        transformation_tags.add(t.tag)
        if not t.input_schemas:
            out.append(Violation(t.tag, "transformation consumes no input dataset"))
        if not t.output_schemas:
            out.append(Violation(t.tag, "transformation produces no output dataset"))
        for tag in (*t.input_schemas, *t.output_schemas):
            if tag not in seen_schema_tags:
                out.append(Violation(t.tag, f"unresolved dataset {tag}"))

    # Loop-class attributes are only meaningful on datasets attached to a
    # loop-evaluator transformation.
    for schema in df.datasets:
        if not any(a.semantics in LOOP_SEMANTICS for a in schema.attributes):
            continue
        owners = [
            t
            for t in df.transformations
            if schema.tag in t.input_schemas or schema.tag in t.output_schemas
        ]
        if owners and not any(t.is_loop_evaluator for t in owners):
            out.append(
                Violation(
                    schema.tag,
                    "loop-class attributes require a loop-evaluator transformation",
                )
            )

    for dep in df.dependencies:
        if dep.producer == dep.consumer:
            out.append(Violation(dep.producer, "dependency producer equals consumer"))
        if dep.producer not in transformation_tags:
            out.append(Violation(dep.producer, f"unresolved producer {dep.producer}"))
        if dep.consumer not in transformation_tags:
            out.append(Violation(dep.consumer, f"unresolved consumer {dep.consumer}"))

    # The graph restricted to edges between non-loop transformations must be
    # acyclic; cycles through a loop evaluator are the iteration itself.
    loop_tags = {t.tag for t in df.transformations if t.is_loop_evaluator}
    sorter: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for tag in transformation_tags - loop_tags:
        sorter.add(tag)
    for dep in df.dependencies:
        if (
            dep.producer in transformation_tags
            and dep.consumer in transformation_tags
            and dep.producer not in loop_tags
            and dep.consumer not in loop_tags
            and dep.producer != dep.consumer
        ):
            sorter.add(dep.consumer, dep.producer)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        cycle = "->".join(exc.args[1])
        out.append(Violation(df.tag, f"cycle without loop evaluator: {cycle}"))

    return sorted(out, key=lambda v: (v.entity, v.message))


def validate_element(schema: DatasetSchema, element: DataElement) -> list[Violation]:
    """Conformance of one element against its schema."""
    out: list[Violation] = []
    names = set(schema.attribute_names())
    for name, value in element.values.items():
        if name not in names:
            out.append(Violation(element.element_id, f"unknown attribute {name}"))
            continue
        a = schema.attribute(name)
        if not value_matches_type(value, a.data_type):
            out.append(
                Violation(
                    element.element_id,
                    f"attribute {name}: value {value!r} is not {a.data_type}",
                )
            )
    return out


# --- declarative document form ------------------------------------------

def load_dataflow(doc: Mapping[str, Any]) -> DataflowDef:
    """Build a DataflowDef from its declarative (JSON) document form.

    Structural problems (unknown enum spellings, missing keys) raise
    DataflowLoadError naming the offending entity; semantic invariants are
    left to validate_dataflow.
    """
    try:
        tag = doc["dataflow_tag"]
        execution_model = doc.get("execution_model", "acyclic")
        datasets_doc = doc["datasets"]
        transformations_doc = doc["transformations"]
        dependencies_doc = doc.get("dependencies", [])
    except KeyError as exc:
        raise DataflowLoadError(f"missing top-level key {exc.args[0]!r}") from None

    if execution_model not in EXECUTION_MODELS:
        raise DataflowLoadError(f"unknown execution model {execution_model!r}")

    datasets = []
    for d in datasets_doc:
        attrs = []
        for a in d.get("attributes", []):
            name = a.get("name", "<unnamed>")
            semantics = a.get("semantics")
            if semantics not in ALL_SEMANTICS:
                raise DataflowLoadError(
                    f"attribute {name}: unknown semantics {semantics!r}"
                )
            data_type = a.get("data_type")
            if data_type not in DATA_TYPES:
                raise DataflowLoadError(
                    f"attribute {name}: unknown data type {data_type!r}"
                )
            attrs.append(AttributeDef(name, data_type, semantics))
        direction = d.get("direction")
        if direction not in DIRECTIONS:
            raise DataflowLoadError(
                f"dataset {d.get('tag', '<untagged>')}: unknown direction {direction!r}"
            )
        datasets.append(DatasetSchema(d["tag"], direction, tuple(attrs)))

    transformations = [
        DataTransformationDef(
            t["tag"],
            tuple(t.get("input_schemas", ())),
            tuple(t.get("output_schemas", ())),
            bool(t.get("is_loop_evaluator", False)),
            bool(t.get("has_steering_point", False)),
        )
        for t in transformations_doc
    ]
    dependencies = [
        DataDependency(frozenset(d.get("elements", ())), d["producer"], d["consumer"])
        for d in dependencies_doc
    ]
    return DataflowDef(
        tag,
        tuple(transformations),
        tuple(datasets),
        tuple(dependencies),
        execution_model,
    )


def dataflow_to_doc(df: DataflowDef) -> dict[str, Any]:
    """Inverse of load_dataflow, used to register runs over the wire."""
    return {
        "dataflow_tag": df.tag,
        "execution_model": df.execution_model,
        "datasets": [
            {
                "tag": s.tag,
                "direction": s.direction,
                "attributes": [
                    {"name": a.name, "data_type": a.data_type, "semantics": a.semantics}
                    for a in s.attributes
                ],
            }
            for s in df.datasets
        ],
        "transformations": [
            {
                "tag": t.tag,
                "input_schemas": list(t.input_schemas),
                "output_schemas": list(t.output_schemas),
                "is_loop_evaluator": t.is_loop_evaluator,
                "has_steering_point": t.has_steering_point,
            }
            for t in df.transformations
        ],
        "dependencies": [
            {
                "elements": sorted(d.elements),
                "producer": d.producer,
                "consumer": d.consumer,
            }
            for d in df.dependencies
        ],
    }
