"""Exception hierarchy shared across the runtime.

Tool errors model failures raised by the simulated services; the
remaining families belong to the registry, probe, anchor, executor and
pipeline layers. Everything lives here to keep the modules cycle-free.
"""

from __future__ import annotations


# --- simulated service (tool) errors ---------------------------------------


class ToolError(Exception):
    """Base class for errors raised by a tool call."""


class BadFilter(ToolError):
    """Malformed filter argument (bad timestamp, non-positive limit)."""


class NotFound(ToolError):
    """Referenced message, attachment or drive item does not exist."""


class RateLimited(ToolError):
    """Transient throttling failure; safe to retry."""


class TransientUnavailable(ToolError):
    """Transient backend failure; safe to retry."""


class AlreadyExists(ToolError):
    """Folder creation hit an existing node at the same path."""


class ParentNotFound(ToolError):
    """Folder creation referenced a missing parent folder."""


class FolderNotFound(ToolError):
    """Upload referenced a missing destination folder."""


class Conflict(ToolError):
    """Upload would overwrite an existing file with different bytes."""


class PermissionDenied(ToolError):
    """Injected authorization failure; never retried, never absorbed."""


class InvalidArgument(ToolError):
    """Structurally invalid tool argument (empty name, bad base64)."""


class UnknownTool(ToolError):
    """Call named a tool the environment does not implement."""


# --- registry ---------------------------------------------------------------


class RegistryError(Exception):
    """Base class for catalog and context errors."""


class DuplicateName(RegistryError):
    def __init__(self, name: str):
        super().__init__(f"duplicate tool name in catalog: {name!r}")
        self.name = name


class EmptyDescription(RegistryError):
    def __init__(self, name: str):
        super().__init__(f"tool {name!r} has an empty description")
        self.name = name


class UnknownApp(RegistryError):
    def __init__(self, app_id: str):
        super().__init__(f"no app {app_id!r} in catalog")
        self.app_id = app_id


class UnknownFunction(RegistryError):
    def __init__(self, name: str):
        super().__init__(f"no function {name!r} in catalog")
        self.name = name


class ContextBudgetExceeded(RegistryError):
    def __init__(self, schema_bytes: int, budget_bytes: int):
        super().__init__(
            f"loading would grow context to {schema_bytes} bytes "
            f"(budget {budget_bytes})"
        )
        self.schema_bytes = schema_bytes
        self.budget_bytes = budget_bytes


# --- probe ------------------------------------------------------------------


class ProbeError(Exception):
    """Base class for probe-phase errors."""


class ToolNotLoaded(ProbeError):
    def __init__(self, name: str):
        super().__init__(f"tool {name!r} is not loaded; discover and load it first")
        self.name = name


class LimitExceeded(ProbeError):
    """A bulk-sized call was attempted through the probe path."""

    def __init__(self, limit: int, max_limit: int):
        super().__init__(f"probe limit {limit} exceeds maximum {max_limit}")
        self.limit = limit
        self.max_limit = max_limit


class HeterogeneousRoot(ProbeError):
    """Samples disagree on the root kind; the tool is too unstable to lock."""


class KindConflict(ProbeError):
    def __init__(self, left: str, right: str):
        super().__init__(f"cannot merge shapes of kind {left!r} and {right!r}")
        self.left = left
        self.right = right


class NotGrounded(ProbeError):
    """Schema locking refused because the probe verdict was not GROUNDED."""

    def __init__(self, verdict: str):
        super().__init__(f"refusing to lock schema from a {verdict} probe")
        self.verdict = verdict


class SchemaNotLocked(ProbeError):
    def __init__(self, tool_name: str):
        super().__init__(f"no locked schema for {tool_name!r}; probe it before bulk use")
        self.tool_name = tool_name


# --- anchor -----------------------------------------------------------------


class AnchorError(Exception):
    """Base class for plan-anchor rejections."""


class RegressionRejected(AnchorError):
    """A completed step was reopened or deleted by a rewrite."""

    def __init__(self, content: str):
        super().__init__(f"completed step may not regress: {content!r}")
        self.content = content


class MultipleInProgress(AnchorError):
    def __init__(self):
        super().__init__("at most one step may be in_progress")


class NonLinearOrder(AnchorError):
    def __init__(self):
        super().__init__("a pending step precedes a completed step")


# --- executor ---------------------------------------------------------------


class ExecutorError(Exception):
    """Base class for batch-execution machinery errors."""


class CheckpointUnavailable(ExecutorError):
    def __init__(self, path: str, reason: str = ""):
        detail = f": {reason}" if reason else ""
        super().__init__(f"checkpoint store at {path!r} is unavailable{detail}")
        self.path = path


class StoreCorrupt(ExecutorError):
    def __init__(self, path: str, line: str):
        super().__init__(f"unparseable checkpoint record in {path!r}: {line!r}")
        self.path = path
        self.line = line


class Exhausted(ExecutorError):
    """All retry attempts failed."""

    def __init__(self, last_error: BaseException, attempts: int):
        super().__init__(f"gave up after {attempts} attempts: {last_error!r}")
        self.last_error = last_error
        self.attempts = attempts


class LockViolation(ExecutorError):
    """A task response did not conform to the tool's locked schema."""

    def __init__(self, tool_name: str, violation):
        super().__init__(f"response from {tool_name!r} violates its lock: {violation}")
        self.tool_name = tool_name
        self.violation = violation


# --- pipeline ---------------------------------------------------------------


class PipelineError(Exception):
    """Base class for phase-tagged pipeline failures."""

    phase = "pipeline"


class DiscoveryFailed(PipelineError):
    phase = "discovery"


class ProbeRefused(PipelineError):
    phase = "probe"


class PlanRejected(PipelineError):
    phase = "plan"


class StepOutOfOrder(PlanRejected):
    """A step was driven while its todo item was not the current step."""


class ExecutionFailed(PipelineError):
    phase = "execution"


class LockMismatch(PipelineError):
    """Replay aborted: the environment's responses violate a recorded lock."""

    phase = "replay"


class MalformedAddress(ValueError):
    """Sender address is not a syntactically valid email address."""


class DisallowedExtension(ValueError):
    """Attachment extension is outside the configured allowlist."""
