"""Linear plan anchor: an external program counter for a workflow run.

The whole plan is rewritten on every update. A rewrite is accepted only
when it keeps at most one step in progress, never places a pending step
ahead of a completed one, and never reopens or drops a step that was
already completed. The rendered block is deterministic and parseable, so
a run can resume from nothing but the render.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .errors import MultipleInProgress, NonLinearOrder, RegressionRejected

PENDING = "pending"
IN_PROGRESS = "in_progress"
COMPLETED = "completed"
STATUSES = (PENDING, IN_PROGRESS, COMPLETED)

_MARKS = {COMPLETED: "x", IN_PROGRESS: ">", PENDING: " "}
_STATUS_BY_MARK = {mark: status for status, mark in _MARKS.items()}
_LINE_RE = re.compile(r"^\[([x> ])\] (.+)$")


@dataclass(frozen=True)
class TodoItem:
    content: str
    status: str = PENDING

    def __post_init__(self):
        if not self.content.strip():
            raise ValueError("todo content must be non-empty")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")


@dataclass(frozen=True)
class TodoList:
    items: tuple[TodoItem, ...] = ()
    revision: int = 0

    def completed_contents(self) -> frozenset[str]:
        return frozenset(i.content for i in self.items if i.status == COMPLETED)

    def statuses(self) -> tuple[str, ...]:
        return tuple(i.status for i in self.items)


def write_todos(current: TodoList, proposed: Sequence[TodoItem]) -> TodoList:
    """Full-list replacement; returns the accepted list with a bumped revision."""
    items = tuple(proposed)
    seen: set[str] = set()
    for item in items:
        if item.content in seen:
            raise ValueError(f"duplicate todo content {item.content!r}")
        seen.add(item.content)
    if sum(1 for i in items if i.status == IN_PROGRESS) > 1:
        raise MultipleInProgress()
    pending_seen = False
    for item in items:
        if item.status == PENDING:
            pending_seen = True
        elif item.status == COMPLETED and pending_seen:
            raise NonLinearOrder()
    by_content = {i.content: i for i in items}
    for content in sorted(current.completed_contents()):
        replacement = by_content.get(content)
        if replacement is None or replacement.status != COMPLETED:
            raise RegressionRejected(content)
    return TodoList(items=items, revision=current.revision + 1)


def render_anchor(todos: TodoList) -> str:
    """One line per item: status marker plus content. Empty list renders empty."""
    return "\n".join(f"[{_MARKS[i.status]}] {i.content}" for i in todos.items)


def parse_anchor(text: str) -> TodoList:
    """Rebuild a plan from its rendered block (revision restarts at zero)."""
    items = []
    for line in text.splitlines():
        if not line.strip():
            continue
        match = _LINE_RE.match(line)
        if match is None:
            raise ValueError(f"unparseable anchor line: {line!r}")
        items.append(TodoItem(content=match.group(2), status=_STATUS_BY_MARK[match.group(1)]))
    return TodoList(items=tuple(items), revision=0)


def current_step(todos: TodoList) -> TodoItem | None:
    """The in-progress item, else the first pending one, else None."""
    for item in todos.items:
        if item.status == IN_PROGRESS:
            return item
    for item in todos.items:
        if item.status == PENDING:
            return item
    return None
