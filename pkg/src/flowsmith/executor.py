"""Production-grade execution of schema-locked workflows.

``run_batch`` fans tasks out across a bounded worker pool, retries
transient failures with exponential backoff on the environment's virtual
clock, validates every response against the tool's locked schema, and
durably checkpoints each completed task id before reporting it. A batch
over a tool that was never probed is refused outright.

The checkpoint store is an append-only, newline-delimited file: one
``task_id<TAB>timestamp`` record per line, flushed and fsynced per mark so
a crash between tasks never loses a completed id. A torn final record
(no trailing newline) is discarded on open; garbage anywhere else is an
error.
"""

from __future__ import annotations

import os
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .clock import VirtualClock
from .errors import (
    AlreadyExists,
    CheckpointUnavailable,
    Exhausted,
    LockViolation,
    RateLimited,
    StoreCorrupt,
    ToolError,
    TransientUnavailable,
)
from .probe import LockTable, validate_against

DEFAULT_RETRYABLE: tuple[type[ToolError], ...] = (RateLimited, TransientUnavailable)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.010
    backoff_factor: float = 2.0
    retryable: tuple[type[BaseException], ...] = DEFAULT_RETRYABLE

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_delay < 0:
            raise ValueError("base_delay must be >= 0")
        if self.backoff_factor < 1.0:
            raise ValueError("backoff_factor must be >= 1 so delays never shrink")

    def delay_for(self, failed_attempt: int) -> float:
        return self.base_delay * self.backoff_factor ** (failed_attempt - 1)

    def to_document(self) -> dict[str, Any]:
        return {
            "max_attempts": self.max_attempts,
            "base_delay": self.base_delay,
            "backoff_factor": self.backoff_factor,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "RetryPolicy":
        return cls(
            max_attempts=int(doc["max_attempts"]),
            base_delay=float(doc["base_delay"]),
            backoff_factor=float(doc["backoff_factor"]),
        )


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    tool_name: str
    args: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Success:
    value: Any
    attempts: int = 1


@dataclass(frozen=True)
class Failed:
    error: BaseException
    attempts: int


@dataclass(frozen=True)
class Skipped:
    already_checkpointed: bool = True


Outcome = Success | Failed | Skipped


@dataclass(frozen=True)
class BatchResult:
    """Per-task outcomes, exactly in input order."""

    outcomes: tuple[Outcome, ...]

    def __len__(self) -> int:
        return len(self.outcomes)

    @property
    def all_ok(self) -> bool:
        return not any(isinstance(o, Failed) for o in self.outcomes)

    def count(self, outcome_type: type) -> int:
        return sum(1 for o in self.outcomes if isinstance(o, outcome_type))

    def failures(self) -> list[Failed]:
        return [o for o in self.outcomes if isinstance(o, Failed)]


def with_retry(
    call: Callable[[], Any], policy: RetryPolicy, clock: VirtualClock
) -> tuple[Any, int]:
    """Run ``call``; retry only the policy's error classes with backoff.

    Returns ``(value, attempts_used)``. Non-retryable errors propagate
    after a single attempt; persistent retryable failure raises
    :class:`Exhausted` once the attempt budget is spent.
    """
    for attempt in range(1, policy.max_attempts + 1):
        try:
            return call(), attempt
        except policy.retryable as exc:
            if attempt == policy.max_attempts:
                raise Exhausted(exc, attempt) from exc
            clock.sleep(policy.delay_for(attempt))
    raise AssertionError("unreachable")


class CheckpointStore:
    """Durable, append-only set of processed task ids backed by one file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._mutex = threading.Lock()
        self._processed: set[str] = set()
        self._load()
        try:
            self._handle = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise CheckpointUnavailable(str(self.path), str(exc)) from exc

    def _load(self) -> None:
        if not self.path.exists():
            return
        try:
            raw = self.path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CheckpointUnavailable(str(self.path), str(exc)) from exc
        lines = raw.split("\n")
        # A missing final newline means the last record was torn mid-write.
        torn = lines[-1] != ""
        body = lines[:-1]
        for line in body:
            task_id, sep, _timestamp = line.partition("\t")
            if not sep or not task_id:
                raise StoreCorrupt(str(self.path), line)
            self._processed.add(task_id)
        if torn:
            tail = lines[-1]
            if "\n" in tail:  # pragma: no cover - split guarantees otherwise
                raise StoreCorrupt(str(self.path), tail)

    def assert_writable(self) -> None:
        if self._handle.closed:
            raise CheckpointUnavailable(str(self.path), "store is closed")

    def mark_processed(self, task_id: str) -> None:
        """Record a completed task; durable before this returns."""
        if "\t" in task_id or "\n" in task_id or not task_id:
            raise ValueError(f"bad task id {task_id!r}")
        with self._mutex:
            if task_id in self._processed:
                return
            stamp = datetime.now(timezone.utc).isoformat()
            self._handle.write(f"{task_id}\t{stamp}\n")
            self._handle.flush()
            os.fsync(self._handle.fileno())
            self._processed.add(task_id)

    def is_processed(self, task_id: str) -> bool:
        with self._mutex:
            return task_id in self._processed

    @property
    def processed(self) -> frozenset[str]:
        with self._mutex:
            return frozenset(self._processed)

    def __len__(self) -> int:
        with self._mutex:
            return len(self._processed)

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "CheckpointStore":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def mark_processed(store: CheckpointStore, task_id: str) -> None:
    store.mark_processed(task_id)


def is_processed(store: CheckpointStore, task_id: str) -> bool:
    return store.is_processed(task_id)


def run_batch(
    tasks: Sequence[TaskSpec],
    *,
    env,
    locks: LockTable,
    max_in_flight: int,
    policy: RetryPolicy | None = None,
    checkpoint: CheckpointStore | None = None,
) -> BatchResult:
    """Execute tasks with at most ``max_in_flight`` concurrently in flight.

    Checkpointed ids are skipped without touching the environment. Task
    failures (exhausted retries, non-retryable tool errors, lock
    violations) become ``Failed`` outcomes; anything else — including a
    failing checkpoint write — propagates and aborts the batch, which is
    exactly the crash the durable store protects against.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    ids = [t.task_id for t in tasks]
    if len(ids) != len(set(ids)):
        raise ValueError("task ids must be unique within a batch")
    policy = policy or RetryPolicy()
    for tool_name in sorted({t.tool_name for t in tasks}):
        locks.require(tool_name)
    if checkpoint is not None:
        checkpoint.assert_writable()
    if not tasks:
        return BatchResult(())

    clock: VirtualClock = env.clock
    queue: deque[tuple[int, TaskSpec]] = deque(enumerate(tasks))
    results: list[Outcome | None] = [None] * len(tasks)
    state_mutex = threading.Lock()
    fatal: list[BaseException] = []

    def execute(task: TaskSpec) -> Outcome:
        if checkpoint is not None and checkpoint.is_processed(task.task_id):
            return Skipped()
        try:
            value, attempts = with_retry(
                lambda: env.call(task.tool_name, dict(task.args)), policy, clock
            )
        except Exhausted as exc:
            return Failed(exc, exc.attempts)
        except ToolError as exc:
            return Failed(exc, 1)
        violation = validate_against(locks.require(task.tool_name), value)
        if violation is not None:
            return Failed(LockViolation(task.tool_name, violation), attempts)
        if checkpoint is not None:
            checkpoint.mark_processed(task.task_id)
        return Success(value, attempts)

    def worker() -> None:
        clock.adopt()
        try:
            while True:
                with state_mutex:
                    if fatal or not queue:
                        return
                    index, task = queue.popleft()
                try:
                    results[index] = execute(task)
                except BaseException as exc:  # checkpoint write failure = crash
                    with state_mutex:
                        fatal.append(exc)
                    return
        finally:
            clock.deregister()

    workers = [
        threading.Thread(target=worker, name=f"batch-worker-{i}", daemon=True)
        for i in range(min(max_in_flight, len(tasks)))
    ]
    # Count the whole pool before any worker runs, so the clock cannot
    # advance while part of the pool is still starting.
    clock.preregister(len(workers))
    started = 0
    try:
        for thread in workers:
            thread.start()
            started += 1
    finally:
        for _ in range(len(workers) - started):
            clock.deregister()
    for thread in workers:
        thread.join()
    if fatal:
        raise fatal[0]
    return BatchResult(tuple(results))  # type: ignore[arg-type]


@dataclass(frozen=True)
class FolderHandle:
    path: str
    existed: bool


def create_if_absent(env, folder_path: str) -> FolderHandle:
    """Ensure a folder path exists, creating missing components.

    Only the already-exists conflict is absorbed; every other error (for
    example an injected permission failure) propagates unchanged.
    """
    components = [c for c in folder_path.split("/") if c]
    if not components:
        raise ValueError("folder path must have at least one non-empty component")
    built = ""
    existed = False
    for component in components:
        parent = built
        built = f"{parent}/{component}" if parent else component
        try:
            env.call("onedrive__create_folder", {"name": component, "parent_path": parent})
            existed = False
        except AlreadyExists:
            existed = True
    return FolderHandle(path=built, existed=existed)
