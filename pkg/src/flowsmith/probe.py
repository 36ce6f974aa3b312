"""Bounded sampling and structural schema locking for tool responses.

Before any bulk processing, a tool is called with a strict pagination
limit, the raw response is captured, an observable "Fetched <n> <unit>."
line is emitted, and the response structure is inferred and locked. All
later responses are validated against the lock, which turns guessed-shape
bugs (indexing an envelope object as if it were a bare list) into typed
violations instead of crashes.

Shape algebra
-------------
Shapes are recursive descriptors over the interchange kinds ``object``,
``array``, ``string``, ``number``, ``boolean`` and ``null``. Merging two
shapes of the same kind unions object fields (a field missing on either
side becomes optional) and merges array elements; ``null`` merges into any
kind by marking it nullable; an empty array acts as the degenerate element
that validates any array. ints and floats share the ``number`` kind.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from .errors import (
    HeterogeneousRoot,
    KindConflict,
    LimitExceeded,
    NotGrounded,
    SchemaNotLocked,
    ToolError,
    ToolNotLoaded,
)
from .registry import LoadedContext

KINDS = ("object", "array", "string", "number", "boolean", "null")

GROUNDED = "GROUNDED"
SUSPECT_EMPTY = "SUSPECT_EMPTY"
FAILED = "FAILED"

MAX_PROBE_LIMIT = 5

# Payload-array detection order for metadata envelopes.
ENVELOPE_FIELD_PRIORITY = ("value", "items", "data", "results", "records")


@dataclass(frozen=True)
class FieldShape:
    shape: "ShapeDescriptor"
    optional: bool = False


@dataclass(frozen=True)
class ShapeDescriptor:
    """Structural summary of one or more observed values.

    ``fields`` (objects only) is a name-sorted tuple of pairs; ``element``
    (arrays only) is ``None`` for the empty-array degenerate.
    """

    kind: str
    fields: tuple[tuple[str, FieldShape], ...] | None = None
    element: "ShapeDescriptor | None" = None
    nullable: bool = False
    samples_seen: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.kind == "object" and self.fields is None:
            object.__setattr__(self, "fields", ())
        if self.samples_seen < 1:
            raise ValueError("samples_seen must be positive")

    @property
    def fields_map(self) -> dict[str, FieldShape]:
        return dict(self.fields or ())

    def equivalent(self, other: "ShapeDescriptor") -> bool:
        """Structural equality, ignoring sample counts."""
        if self.kind != other.kind or self.nullable != other.nullable:
            return False
        if self.kind == "object":
            ours, theirs = self.fields_map, other.fields_map
            if ours.keys() != theirs.keys():
                return False
            return all(
                fs.optional == theirs[n].optional
                and fs.shape.equivalent(theirs[n].shape)
                for n, fs in ours.items()
            )
        if self.kind == "array":
            if (self.element is None) != (other.element is None):
                return False
            return self.element is None or self.element.equivalent(other.element)
        return True

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind, "samples_seen": self.samples_seen}
        if self.nullable:
            doc["nullable"] = True
        if self.kind == "object":
            doc["fields"] = {
                name: {"shape": fs.shape.to_document(), "optional": fs.optional}
                for name, fs in (self.fields or ())
            }
        if self.kind == "array":
            doc["element"] = None if self.element is None else self.element.to_document()
        return doc

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "ShapeDescriptor":
        kind = doc["kind"]
        fields = None
        element = None
        if kind == "object":
            fields = tuple(
                sorted(
                    (name, FieldShape(cls.from_document(f["shape"]), bool(f["optional"])))
                    for name, f in doc.get("fields", {}).items()
                )
            )
        if kind == "array" and doc.get("element") is not None:
            element = cls.from_document(doc["element"])
        return cls(
            kind=kind,
            fields=fields,
            element=element,
            nullable=bool(doc.get("nullable", False)),
            samples_seen=int(doc.get("samples_seen", 1)),
        )


@dataclass(frozen=True)
class Violation:
    """First structural divergence found, in deterministic field order."""

    path: tuple[Any, ...]
    expected: str
    found: str

    def __str__(self) -> str:
        if not self.path:
            where = "root"
        else:
            where = "".join(
                f"[{p}]" if isinstance(p, int) else f".{p}" for p in self.path
            ).lstrip(".")
        return f"at {where}: expected {self.expected}, found {self.found}"


def kind_of(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, (list, tuple)):
        return "array"
    if isinstance(value, Mapping):
        return "object"
    raise TypeError(f"value of type {type(value).__name__} is not interchangeable")


def shape_of(value: Any) -> ShapeDescriptor:
    """Shape of a single value; array elements are merged left to right."""
    kind = kind_of(value)
    if kind == "object":
        fields = tuple(
            sorted((name, FieldShape(shape_of(v))) for name, v in value.items())
        )
        return ShapeDescriptor(kind="object", fields=fields)
    if kind == "array":
        element: ShapeDescriptor | None = None
        for item in value:
            item_shape = shape_of(item)
            element = item_shape if element is None else merge_shapes(element, item_shape)
        if element is not None:
            element = replace(element, samples_seen=1)
        return ShapeDescriptor(kind="array", element=element)
    return ShapeDescriptor(kind=kind)


def merge_shapes(left: ShapeDescriptor, right: ShapeDescriptor) -> ShapeDescriptor:
    """Least shape validating everything either input validates."""
    total = left.samples_seen + right.samples_seen
    if left.kind == "null" and right.kind != "null":
        return replace(right, nullable=True, samples_seen=total)
    if right.kind == "null" and left.kind != "null":
        return replace(left, nullable=True, samples_seen=total)
    if left.kind != right.kind:
        raise KindConflict(left.kind, right.kind)
    nullable = left.nullable or right.nullable
    if left.kind == "object":
        ours, theirs = left.fields_map, right.fields_map
        merged = []
        for name in sorted(ours.keys() | theirs.keys()):
            if name in ours and name in theirs:
                shape = merge_shapes(ours[name].shape, theirs[name].shape)
                optional = ours[name].optional or theirs[name].optional
            else:
                present = ours.get(name) or theirs[name]
                shape, optional = present.shape, True
            merged.append((name, FieldShape(shape, optional)))
        return ShapeDescriptor(
            kind="object", fields=tuple(merged), nullable=nullable, samples_seen=total
        )
    if left.kind == "array":
        if left.element is None:
            element = right.element
        elif right.element is None:
            element = left.element
        else:
            element = merge_shapes(left.element, right.element)
        return ShapeDescriptor(
            kind="array", element=element, nullable=nullable, samples_seen=total
        )
    return ShapeDescriptor(kind=left.kind, nullable=nullable, samples_seen=total)


def infer_shape(samples: Sequence[Any]) -> ShapeDescriptor:
    """Merge the shapes of all samples; the result validates each of them."""
    if not samples:
        raise ValueError("at least one sample is required")
    shapes = [shape_of(s) for s in samples]
    root_kinds = {s.kind for s in shapes} - {"null"}
    if len(root_kinds) > 1:
        raise HeterogeneousRoot(
            f"samples disagree on root kind: {sorted(root_kinds)}"
        )
    merged = shapes[0]
    for shape in shapes[1:]:
        merged = merge_shapes(merged, shape)
    return merged


def detect_envelope(shape: ShapeDescriptor) -> tuple[str, ...] | None:
    """Path to the payload array of a metadata envelope, if any.

    Root arrays carry their payload directly; root objects yield the
    preferred-named array field, else their unique array field.
    """
    if shape.kind != "object":
        return None
    arrays = [name for name, fs in (shape.fields or ()) if fs.shape.kind == "array"]
    for preferred in ENVELOPE_FIELD_PRIORITY:
        if preferred in arrays:
            return (preferred,)
    if len(arrays) == 1:
        return (arrays[0],)
    return None


def payload_records(value: Any) -> list[Any] | None:
    """The payload array of a response value, or None when there isn't one."""
    if isinstance(value, list):
        return value
    if isinstance(value, Mapping):
        arrays = {n: v for n, v in value.items() if isinstance(v, list)}
        for preferred in ENVELOPE_FIELD_PRIORITY:
            if preferred in arrays:
                return arrays[preferred]
        if len(arrays) == 1:
            return next(iter(arrays.values()))
    return None


def validate_against(lock: "LockedSchema | ShapeDescriptor", value: Any) -> Violation | None:
    """None when the value conforms; otherwise the first divergence.

    Fields absent from the locked shape are ignored: the lock guards the
    structure the workflow actually reads.
    """
    shape = lock.shape if isinstance(lock, LockedSchema) else lock
    return _walk(shape, value, ())


def _walk(shape: ShapeDescriptor, value: Any, path: tuple[Any, ...]) -> Violation | None:
    if value is None:
        if shape.kind == "null" or shape.nullable:
            return None
        return Violation(path, shape.kind, "null")
    try:
        actual = kind_of(value)
    except TypeError:
        return Violation(path, shape.kind, type(value).__name__)
    if actual != shape.kind:
        return Violation(path, shape.kind, actual)
    if shape.kind == "object":
        for name, fs in shape.fields or ():
            if name not in value:
                if not fs.optional:
                    return Violation(path + (name,), fs.shape.kind, "missing")
                continue
            violation = _walk(fs.shape, value[name], path + (name,))
            if violation:
                return violation
    elif shape.kind == "array" and shape.element is not None:
        for i, item in enumerate(value):
            violation = _walk(shape.element, item, path + (i,))
            if violation:
                return violation
    return None


# --- probing ------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeReport:
    tool_name: str
    raw_samples: tuple[Any, ...]
    stdout_lines: tuple[str, ...]
    verdict: str
    args_digest: str
    error: str | None = None

    def to_document(self) -> dict[str, Any]:
        return {
            "tool_name": self.tool_name,
            "raw_samples": list(self.raw_samples),
            "stdout_lines": list(self.stdout_lines),
            "verdict": self.verdict,
            "args_digest": self.args_digest,
            "error": self.error,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "ProbeReport":
        return cls(
            tool_name=doc["tool_name"],
            raw_samples=tuple(doc["raw_samples"]),
            stdout_lines=tuple(doc["stdout_lines"]),
            verdict=doc["verdict"],
            args_digest=doc["args_digest"],
            error=doc.get("error"),
        )


def args_digest(args: Mapping[str, Any]) -> str:
    canonical = json.dumps(args, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def probe_call(
    env,
    context: LoadedContext,
    tool_name: str,
    args: Mapping[str, Any],
    limit: int,
    *,
    max_limit: int = MAX_PROBE_LIMIT,
    unit: str = "records",
) -> ProbeReport:
    """Issue one strictly limited sample call and ground it on stdout.

    The call's ``top`` pagination argument, when present, is forced down to
    ``min(limit, top)``. A limit above ``max_limit`` is rejected outright:
    that is a bulk call trying to sneak past the schema lock.
    """
    if tool_name not in context:
        raise ToolNotLoaded(tool_name)
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if limit > max_limit:
        raise LimitExceeded(limit, max_limit)
    forced = dict(args)
    if "top" in forced:
        forced["top"] = min(limit, int(forced["top"]))
    digest = args_digest(forced)
    try:
        response = env.call(tool_name, forced)
    except ToolError as exc:
        return ProbeReport(
            tool_name=tool_name,
            raw_samples=(),
            stdout_lines=(),
            verdict=FAILED,
            args_digest=digest,
            error=f"{type(exc).__name__}: {exc}",
        )
    payload = payload_records(response)
    count = len(payload) if payload is not None else 1
    line = f"Fetched {count} {unit}."
    verdict = SUSPECT_EMPTY if payload is not None and count == 0 else GROUNDED
    return ProbeReport(
        tool_name=tool_name,
        raw_samples=(response,),
        stdout_lines=(line,),
        verdict=verdict,
        args_digest=digest,
    )


# --- locking ------------------------------------------------------------------


@dataclass(frozen=True)
class LockedSchema:
    tool_name: str
    shape: ShapeDescriptor
    envelope_path: tuple[str, ...] | None
    sample_count: int
    probe_args_digest: str

    def digest(self) -> str:
        doc = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()

    def extract_payload(self, value: Any) -> list[Any]:
        """Apply the envelope path; root-array locks return the value itself."""
        if self.envelope_path is None:
            return value if isinstance(value, list) else [value]
        payload = value
        for key in self.envelope_path:
            payload = payload[key]
        return payload

    def to_document(self) -> dict[str, Any]:
        return {
            "tool_name": self.tool_name,
            "shape": self.shape.to_document(),
            "envelope_path": list(self.envelope_path) if self.envelope_path else None,
            "sample_count": self.sample_count,
            "probe_args_digest": self.probe_args_digest,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "LockedSchema":
        path = doc.get("envelope_path")
        return cls(
            tool_name=doc["tool_name"],
            shape=ShapeDescriptor.from_document(doc["shape"]),
            envelope_path=tuple(path) if path else None,
            sample_count=int(doc["sample_count"]),
            probe_args_digest=doc["probe_args_digest"],
        )


class LockTable:
    """Registered locks keyed by tool name; reads are lock-free snapshots."""

    def __init__(self):
        self._locks: dict[str, LockedSchema] = {}
        self._mutex = threading.RLock()

    def lock(self, report: ProbeReport) -> LockedSchema:
        """Codify a grounded probe. Re-locking a tool merges shapes."""
        if report.verdict != GROUNDED:
            raise NotGrounded(report.verdict)
        shape = infer_shape(report.raw_samples)
        with self._mutex:
            existing = self._locks.get(report.tool_name)
            if existing is not None:
                shape = merge_shapes(existing.shape, shape)
                combined = "|".join(
                    sorted((existing.probe_args_digest, report.args_digest))
                )
                digest = hashlib.sha256(combined.encode("utf-8")).hexdigest()
                sample_count = existing.sample_count + len(report.raw_samples)
            else:
                digest = report.args_digest
                sample_count = len(report.raw_samples)
            locked = LockedSchema(
                tool_name=report.tool_name,
                shape=shape,
                envelope_path=detect_envelope(shape),
                sample_count=sample_count,
                probe_args_digest=digest,
            )
            self._locks[report.tool_name] = locked
            return locked

    def has(self, tool_name: str) -> bool:
        return tool_name in self._locks

    def get(self, tool_name: str) -> LockedSchema | None:
        return self._locks.get(tool_name)

    def require(self, tool_name: str) -> LockedSchema:
        lock = self._locks.get(tool_name)
        if lock is None:
            raise SchemaNotLocked(tool_name)
        return lock

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._locks))

    def export_document(self) -> dict[str, Any]:
        with self._mutex:
            return {
                "format_version": 1,
                "locks": {name: lock.to_document() for name, lock in sorted(self._locks.items())},
            }

    @classmethod
    def import_document(cls, doc: Mapping[str, Any]) -> "LockTable":
        table = cls()
        for name, lock_doc in doc.get("locks", {}).items():
            table._locks[name] = LockedSchema.from_document(lock_doc)
        return table


def lock_schema(table: LockTable, report: ProbeReport) -> LockedSchema:
    """Module-level spelling of :meth:`LockTable.lock`."""
    return table.lock(report)
