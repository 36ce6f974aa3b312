"""Four-phase workflow orchestration.

A run moves strictly through discovery (search the catalog, choose
tools), verification (probe and lock response schemas), decomposition
(anchor a linear plan), and execution (validated, checkpointed batches).
A pluggable planner drives the choices; the shipped
:class:`ScriptedPlanner` is table-driven and fully deterministic, so the
whole mechanism is testable without any model in the loop.

A successful run is frozen into a :class:`SkillArtifact`: a declarative
document carrying the chosen tools, their locked schemas, the completed
plan, the step actions with every parameter pinned, and the run
parameters. Replaying an artifact performs no discovery and no probing;
it executes from the recorded locks and aborts with ``LockMismatch`` if
the environment stops honoring them.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence, runtime_checkable

from datetime import datetime, timezone

from .anchor import (
    COMPLETED,
    IN_PROGRESS,
    PENDING,
    TodoItem,
    TodoList,
    current_step,
    render_anchor,
    write_todos,
)
from .clock import VirtualClock
from .errors import (
    AnchorError,
    DiscoveryFailed,
    DisallowedExtension,
    ExecutionFailed,
    LockMismatch,
    LockViolation,
    MalformedAddress,
    PipelineError,
    PlanRejected,
    ProbeRefused,
    RegistryError,
    StepOutOfOrder,
)
from .executor import (
    BatchResult,
    CheckpointStore,
    Failed,
    RetryPolicy,
    Skipped,
    TaskSpec,
    create_if_absent,
    run_batch,
)
from .probe import (
    GROUNDED,
    LockTable,
    ProbeReport,
    probe_call,
    validate_against,
)
from .registry import (
    CapabilityQuery,
    CoverageReport,
    DEFAULT_CONTEXT_BUDGET,
    LoadedContext,
    Registry,
    broaden_query,
    load_functions,
    refine_search,
)

DEFAULT_EXTENSIONS = ("pdf", "xlsx")
DEFAULT_BLOCKLIST = ("agentr.dev",)
FOLDER_TEMPLATE = "Email Attachments {month}/{company}"

STEP_KINDS = ("fetch_filter", "extract_route", "ensure_folders", "upload_batch")

_REQUIRED_PARAMS = {
    "fetch_filter": ("window_days", "has_attachments", "top"),
    "extract_route": ("extension_allowlist", "domain_blocklist", "company_rule", "naming_rule"),
    "ensure_folders": ("folder_template",),
    "upload_batch": ("max_in_flight",),
}

MEMORY_PROMPT = (
    "Add a durable memory of processed item ids (a checkpoint log) so "
    "reruns skip already-archived attachments and avoid duplicates?"
)

ARTIFACT_FORMAT_VERSION = 1


# --- routing rules -------------------------------------------------------------

# Registrable suffixes for second-level-domain extraction. Small and
# embedded on purpose: no network lookups, fully deterministic.
PUBLIC_SUFFIXES = frozenset(
    {
        "com", "org", "net", "dev", "io", "ai", "co", "app", "edu", "gov",
        "mil", "info", "biz",
        "co.uk", "org.uk", "ac.uk", "gov.uk",
        "com.au", "net.au", "org.au",
        "co.jp", "co.in", "com.br", "co.nz", "co.za",
    }
)

_WORD_SPLIT_RE = re.compile(r"[-_]+")


def extract_company(sender_address: str) -> str:
    """Company name from a sender address: the registrable second-level
    domain label, split on hyphens/underscores, title-cased."""
    address = (sender_address or "").strip()
    if address.count("@") != 1 or " " in address:
        raise MalformedAddress(f"not an email address: {sender_address!r}")
    local, _, domain = address.partition("@")
    domain = domain.strip(".").lower()
    if not local or not domain:
        raise MalformedAddress(f"not an email address: {sender_address!r}")
    labels = domain.split(".")
    if any(not label for label in labels):
        raise MalformedAddress(f"bad domain in {sender_address!r}")
    if len(labels) == 1:
        sld = labels[0]
    else:
        sld = labels[-2]
        for take in (2, 1):
            if len(labels) > take and ".".join(labels[-take:]) in PUBLIC_SUFFIXES:
                sld = labels[-(take + 1)]
                break
    words = [w for w in _WORD_SPLIT_RE.split(sld) if w]
    if not words:
        raise MalformedAddress(f"empty company label in {sender_address!r}")
    return " ".join(w.capitalize() for w in words)


def name_document(
    message,
    filename: str,
    existing: Iterable[str] = (),
    allowlist: Sequence[str] = DEFAULT_EXTENSIONS,
) -> str:
    """``<received date>_<sanitized stem>.<extension>`` with collision suffixes.

    ``message`` may be a mail message or its ISO received timestamp.
    Sanitization keeps alphanumerics, spaces, dots, dashes and underscores.
    """
    received = getattr(message, "received_at", message)
    stem, sep, ext = filename.rpartition(".")
    if not sep:
        raise DisallowedExtension(f"no extension on {filename!r}")
    if ext.lower() not in {e.lower().lstrip(".") for e in allowlist}:
        raise DisallowedExtension(ext)
    safe = "".join(ch for ch in stem if ch.isalnum() or ch in " ._-").strip()
    if not safe:
        safe = "attachment"
    base = f"{received[:10]}_{safe}"
    taken = set(existing)
    candidate = f"{base}.{ext}"
    n = 2
    while candidate in taken:
        candidate = f"{base}_{n}.{ext}"
        n += 1
    return candidate


COMPANY_RULES = {"domain-words-v1": extract_company}
NAMING_RULES = {"dated-stem-v1": name_document}


# --- plan step actions -----------------------------------------------------------


@dataclass(frozen=True)
class StepAction:
    """One executable unit of the plan; every parameter pinned up front."""

    kind: str
    params: Mapping[str, Any]

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown step kind {self.kind!r}")
        missing = [
            name
            for name in _REQUIRED_PARAMS[self.kind]
            if self.params.get(name) is None
        ]
        if missing:
            raise ValueError(f"{self.kind} is missing parameters: {missing}")
        object.__setattr__(self, "params", dict(self.params))

    def to_document(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "StepAction":
        return cls(kind=doc["kind"], params=dict(doc["params"]))


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _iso(timestamp: float) -> str:
    return datetime.fromtimestamp(timestamp, tz=timezone.utc).isoformat()


# --- run configuration ------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    window_days: int = 15
    extensions: tuple[str, ...] = DEFAULT_EXTENSIONS
    blocklist: tuple[str, ...] = DEFAULT_BLOCKLIST
    fetch_top: int = 50
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    accept_memory: bool = False
    checkpoint_path: str | None = None
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    search_budget: int = 2
    k: int = 5
    folder_template: str = FOLDER_TEMPLATE
    company_rule: str = "domain-words-v1"
    naming_rule: str = "dated-stem-v1"

    def to_document(self) -> dict[str, Any]:
        return {
            "window_days": self.window_days,
            "extensions": list(self.extensions),
            "blocklist": list(self.blocklist),
            "fetch_top": self.fetch_top,
            "max_in_flight": self.max_in_flight,
            "retry": self.retry.to_document(),
            "accept_memory": self.accept_memory,
            "checkpoint_path": self.checkpoint_path,
            "context_budget": self.context_budget,
            "search_budget": self.search_budget,
            "k": self.k,
            "folder_template": self.folder_template,
            "company_rule": self.company_rule,
            "naming_rule": self.naming_rule,
        }


@dataclass(frozen=True)
class MemoryDecision:
    accepted: bool
    checkpoint_path: str | None
    prompt: str = MEMORY_PROMPT


def propose_memory(config: RunConfig, transcript: "RunTranscript | None" = None) -> MemoryDecision:
    """Emit the mandatory persistence proposal; the answer comes from config."""
    if config.accept_memory and not config.checkpoint_path:
        raise ValueError("accepting the memory proposal requires a checkpoint path")
    decision = MemoryDecision(
        accepted=config.accept_memory,
        checkpoint_path=config.checkpoint_path if config.accept_memory else None,
    )
    if transcript is not None:
        transcript.record(
            "memory_proposal",
            prompt=decision.prompt,
            accepted=decision.accepted,
            checkpoint_path=decision.checkpoint_path,
        )
    return decision


# --- transcript --------------------------------------------------------------------


def _attach_transcript(error: PipelineError, transcript: "RunTranscript") -> PipelineError:
    error.transcript = transcript  # partial log survives the failure
    return error


class RunTranscript:
    """Ordered, JSON-lines-serializable event log of one run."""

    def __init__(self, clock: VirtualClock | None = None, events: list[dict] | None = None):
        self._clock = clock
        self.events: list[dict[str, Any]] = events or []

    def record(self, event: str, **payload: Any) -> None:
        entry: dict[str, Any] = {"event": event}
        if self._clock is not None:
            entry["t"] = round(self._clock.now(), 6)
        entry.update(_jsonable(payload))
        self.events.append(entry)

    def of_kind(self, event: str) -> list[dict[str, Any]]:
        return [e for e in self.events if e["event"] == event]

    def all_stdout(self) -> list[str]:
        lines: list[str] = []
        for e in self.events:
            lines.extend(e.get("stdout", ()))
        return lines

    def contains_line(self, line: str) -> bool:
        return line in self.all_stdout()

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n"
            for e in self.events
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "RunTranscript":
        events = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(events=events)


# --- planner contract ---------------------------------------------------------------


@runtime_checkable
class PlannerInterface(Protocol):
    """Behavioral contract for run drivers.

    A planner only ever sees the anchor render plus the latest phase
    outputs — never a full conversation history — so a context flush
    cannot change its decisions.
    """

    def propose_capability_queries(self, goal: str) -> Sequence[CapabilityQuery]:
        ...

    def choose_tools(self, report: CoverageReport) -> Sequence[str]:
        ...

    def propose_plan(self, tools: Sequence[str]) -> Sequence[TodoItem]:
        ...

    def derive_step_action(
        self, item: TodoItem, locks: LockTable, anchor_render: str
    ) -> tuple[StepAction, ...]:
        ...

    def review_probe(self, report: ProbeReport) -> str:
        ...


class ScriptedPlanner:
    """Deterministic, table-driven planner for the archival scenario."""

    CAPABILITIES = (
        CapabilityQuery("fetch emails download attachment", "outlook"),
        CapabilityQuery("create folder upload file list items", "onedrive"),
    )
    # Fallback query per (capability, round) if the first search comes back
    # empty; anything else falls through to synonym broadening.
    BROADENED_QUERIES = {
        ("fetch emails download attachment", 2): "list messages get emails",
    }
    _WANTED = (
        ("outlook__list_emails", "outlook__download_attachment"),
        ("onedrive__create_folder", "onedrive__upload_file"),
    )

    def __init__(self, config: RunConfig, month_name: str):
        self.config = config
        self.month_name = month_name

    @classmethod
    def for_environment(cls, config: RunConfig, env) -> "ScriptedPlanner":
        return cls(config, env.clock.now_datetime().strftime("%B"))

    def propose_capability_queries(self, goal: str) -> Sequence[CapabilityQuery]:
        return self.CAPABILITIES

    def broadener(self, text: str, round_no: int) -> str:
        return self.BROADENED_QUERIES.get((text, round_no)) or broaden_query(text, round_no)

    def choose_tools(self, report: CoverageReport) -> Sequence[str]:
        chosen: list[str] = []
        for capability, wanted in zip(self.CAPABILITIES, self._WANTED):
            entry = report.entry(capability.text)
            available = {r.name for r in entry.winning_results}
            missing = [name for name in wanted if name not in available]
            if missing:
                raise DiscoveryFailed(
                    f"search for {capability.text!r} did not surface {missing}"
                )
            chosen.extend(wanted)
        return chosen

    def propose_plan(self, tools: Sequence[str]) -> Sequence[TodoItem]:
        extensions = ", ".join(f".{e}" for e in self.config.extensions)
        return (
            TodoItem("Load functions for Outlook and OneDrive", IN_PROGRESS),
            TodoItem(
                f"Fetch Outlook emails (past {self.config.window_days} days) "
                f"and filter for ({extensions})",
                PENDING,
            ),
            TodoItem(
                "Process sample: Download, extract Company Name, determine Document Name",
                PENDING,
            ),
            TodoItem(
                f"Create 'Email Attachments {self.month_name}/{{Company Name}}' "
                "folders and upload",
                PENDING,
            ),
        )

    def derive_step_action(
        self, item: TodoItem, locks: LockTable, anchor_render: str
    ) -> tuple[StepAction, ...]:
        cfg = self.config
        if item.content.startswith("Load functions"):
            return ()
        if item.content.startswith("Fetch Outlook emails"):
            return (
                StepAction(
                    "fetch_filter",
                    {
                        "window_days": cfg.window_days,
                        "has_attachments": True,
                        "top": cfg.fetch_top,
                    },
                ),
            )
        if item.content.startswith("Process sample"):
            return (
                StepAction(
                    "extract_route",
                    {
                        "extension_allowlist": list(cfg.extensions),
                        "domain_blocklist": list(cfg.blocklist),
                        "company_rule": cfg.company_rule,
                        "naming_rule": cfg.naming_rule,
                    },
                ),
            )
        if item.content.startswith("Create"):
            return (
                StepAction("ensure_folders", {"folder_template": cfg.folder_template}),
                StepAction("upload_batch", {"max_in_flight": cfg.max_in_flight}),
            )
        raise PlanRejected(f"scripted planner has no actions for {item.content!r}")

    def review_probe(self, report: ProbeReport) -> str:
        return "proceed" if report.verdict == GROUNDED else "revise"


# --- run state and the step runner ----------------------------------------------------


@dataclass(frozen=True)
class WorkItem:
    task_id: str
    message_id: str
    attachment_id: str
    filename: str
    received_at: str
    sender_address: str
    company: str
    folder: str
    document: str


class StepRunner:
    """Executes plan steps; refuses any step that is not the anchor's current one."""

    def __init__(
        self,
        registry: Registry,
        env,
        planner: PlannerInterface,
        config: RunConfig,
        transcript: RunTranscript,
        locks: LockTable,
        tools: tuple[str, ...],
        checkpoint: CheckpointStore | None,
    ):
        self.registry = registry
        self.env = env
        self.planner = planner
        self.config = config
        self.transcript = transcript
        self.locks = locks
        self.tools = tools
        self.checkpoint = checkpoint
        self.loaded = LoadedContext(budget_bytes=config.context_budget)
        self.records: list[dict[str, Any]] = []
        self.worklist: list[WorkItem] = []
        self.executed_actions: list[StepAction] = []
        self.month_name = env.clock.now_datetime().strftime("%B")

    # -- gate ---------------------------------------------------------------

    def execute_step(self, item: TodoItem, todos: TodoList) -> None:
        """Run the actions of one plan step. The anchor is the gatekeeper."""
        current = current_step(todos)
        if current is None or current.content != item.content:
            raise StepOutOfOrder(
                f"step {item.content!r} is not the current step "
                f"(current: {current.content if current else None!r})"
            )
        if todos.items and item.content == todos.items[0].content:
            self._do_load()
            return
        actions = self.planner.derive_step_action(item, self.locks, render_anchor(todos))
        for action in actions:
            self.transcript.record("step_start", kind=action.kind, todo=item.content)
            self._run_action(action)
            self.transcript.record("step_done", kind=action.kind, todo=item.content)
            self.executed_actions.append(action)

    def _do_load(self) -> None:
        try:
            self.loaded = load_functions(self.registry, self.loaded, self.tools)
        except RegistryError as exc:
            raise DiscoveryFailed(str(exc)) from exc
        self.transcript.record(
            "load",
            names=list(self.loaded.loaded),
            schema_bytes=self.loaded.schema_bytes,
            budget_bytes=self.loaded.budget_bytes,
        )

    # -- probing helper -------------------------------------------------------

    def _probe_and_lock(
        self, tool_name: str, args: Mapping[str, Any], limit: int, max_limit: int, unit: str
    ):
        report = probe_call(
            self.env, self.loaded, tool_name, args, limit, max_limit=max_limit, unit=unit
        )
        self.transcript.record(
            "probe",
            tool=tool_name,
            limit=limit,
            stdout=list(report.stdout_lines),
            verdict=report.verdict,
            error=report.error,
        )
        review = self.planner.review_probe(report)
        if report.verdict != GROUNDED or review != "proceed":
            raise ProbeRefused(
                f"probe of {tool_name} refused (verdict {report.verdict}, review {review})"
            )
        lock = self.locks.lock(report)
        self.transcript.record(
            "schema_locked",
            tool=tool_name,
            envelope_path=list(lock.envelope_path) if lock.envelope_path else None,
            samples=lock.sample_count,
        )
        return report, lock

    # -- actions ---------------------------------------------------------------

    def _run_action(self, action: StepAction) -> None:
        handler = {
            "fetch_filter": self._action_fetch_filter,
            "extract_route": self._action_extract_route,
            "ensure_folders": self._action_ensure_folders,
            "upload_batch": self._action_upload_batch,
        }[action.kind]
        handler(action.params)

    def _action_fetch_filter(self, params: Mapping[str, Any]) -> None:
        window_start = self.env.clock.now() - int(params["window_days"]) * 86400
        received_after = _iso(window_start)
        top = int(params["top"])
        args = {
            "filter": {
                "received_after": received_after,
                "has_attachments": bool(params["has_attachments"]),
            },
            "top": top,
        }
        # The sampled fetch doubles as the bulk fetch at fixture scale, so
        # the probe cap is widened to the step's own page size.
        report, lock = self._probe_and_lock(
            "outlook__list_emails",
            args,
            limit=top,
            max_limit=top,
            unit="emails with attachments",
        )
        self.records = list(lock.extract_payload(report.raw_samples[0]))

    def _action_extract_route(self, params: Mapping[str, Any]) -> None:
        allow = tuple(str(e).lower().lstrip(".") for e in params["extension_allowlist"])
        block = tuple(str(d).lower() for d in params["domain_blocklist"])
        company_rule = COMPANY_RULES[params["company_rule"]]
        naming_rule = NAMING_RULES[params["naming_rule"]]

        items: list[WorkItem] = []
        taken: dict[str, set[str]] = {}
        for record in self.records:
            sender = record["sender_address"]
            domain = sender.rsplit("@", 1)[-1].lower()
            if any(domain == b or domain.endswith("." + b) for b in block):
                continue
            company = company_rule(sender)
            folder = self.config.folder_template.format(
                month=self.month_name, company=company
            )
            for attachment in record["attachments"]:
                filename = attachment["filename"]
                ext = filename.rpartition(".")[2].lower()
                if ext not in allow:
                    continue
                existing = taken.setdefault(folder, set())
                document = naming_rule(record["received_at"], filename, existing, allow)
                existing.add(document)
                items.append(
                    WorkItem(
                        task_id=f"{record['message_id']}/{attachment['attachment_id']}",
                        message_id=record["message_id"],
                        attachment_id=attachment["attachment_id"],
                        filename=filename,
                        received_at=record["received_at"],
                        sender_address=sender,
                        company=company,
                        folder=folder,
                        document=document,
                    )
                )
        self.worklist = items

        if items:
            sample = items[0]
            report, _ = self._probe_and_lock(
                "outlook__download_attachment",
                {"message_id": sample.message_id, "attachment_id": sample.attachment_id},
                limit=1,
                max_limit=5,
                unit="attachment sample",
            )
            self.transcript.record(
                "sample",
                task_id=sample.task_id,
                company=sample.company,
                document=sample.document,
            )
        self.transcript.record(
            "worklist",
            count=len(items),
            items=[
                {"task_id": w.task_id, "folder": w.folder, "document": w.document}
                for w in items
            ],
        )

    def _action_ensure_folders(self, params: Mapping[str, Any]) -> None:
        folders: list[str] = []
        for item in self.worklist:
            if item.folder not in folders:
                folders.append(item.folder)
        created = []
        for folder in folders:
            handle = create_if_absent(self.env, folder)
            created.append({"path": handle.path, "existed": handle.existed})
        self.transcript.record("folders", folders=created)

    def _action_upload_batch(self, params: Mapping[str, Any]) -> None:
        if not self.worklist:
            self.transcript.record("batch", tool="onedrive__upload_file", count=0, outcomes=[])
            return
        max_in_flight = int(params["max_in_flight"])

        downloads = [
            TaskSpec(
                w.task_id,
                "outlook__download_attachment",
                {"message_id": w.message_id, "attachment_id": w.attachment_id},
            )
            for w in self.worklist
        ]
        download_result = run_batch(
            downloads,
            env=self.env,
            locks=self.locks,
            max_in_flight=max_in_flight,
            policy=self.config.retry,
        )
        self._record_batch("outlook__download_attachment", download_result)
        self._raise_on_failures("outlook__download_attachment", download_result)

        download_lock = self.locks.require("outlook__download_attachment")
        content: dict[str, str] = {}
        for w, outcome in zip(self.worklist, download_result.outcomes):
            payload = download_lock.extract_payload(outcome.value)
            content[w.task_id] = payload[0]["content_b64"]

        if not self.locks.has("onedrive__upload_file"):
            first = self.worklist[0]
            self._probe_and_lock(
                "onedrive__upload_file",
                {
                    "folder_path": first.folder,
                    "filename": first.document,
                    "content_b64": content[first.task_id],
                },
                limit=1,
                max_limit=5,
                unit="upload confirmation",
            )

        uploads = [
            TaskSpec(
                w.task_id,
                "onedrive__upload_file",
                {
                    "folder_path": w.folder,
                    "filename": w.document,
                    "content_b64": content[w.task_id],
                },
            )
            for w in self.worklist
        ]
        upload_result = run_batch(
            uploads,
            env=self.env,
            locks=self.locks,
            max_in_flight=max_in_flight,
            policy=self.config.retry,
            checkpoint=self.checkpoint,
        )
        self._record_batch("onedrive__upload_file", upload_result)
        self._raise_on_failures("onedrive__upload_file", upload_result)

    def _record_batch(self, tool: str, result: BatchResult) -> None:
        outcomes = []
        for outcome in result.outcomes:
            if isinstance(outcome, Failed):
                outcomes.append(["failed", type(outcome.error).__name__, outcome.attempts])
            elif hasattr(outcome, "value"):
                outcomes.append(["success", outcome.attempts])
            else:
                outcomes.append(["skipped"])
        self.transcript.record("batch", tool=tool, count=len(result), outcomes=outcomes)

    @staticmethod
    def _raise_on_failures(tool: str, result: BatchResult) -> None:
        failures = result.failures()
        if failures:
            first = failures[0]
            raise ExecutionFailed(
                f"{len(failures)} of {len(result)} {tool} tasks failed; "
                f"first error: {first.error!r}"
            )


# --- the pipeline entry points ------------------------------------------------------


@dataclass
class PipelineResult:
    artifact: "SkillArtifact"
    transcript: RunTranscript
    world: Any


def advance_plan(todos: TodoList) -> TodoList:
    """Mark the current step completed and promote the next pending step."""
    current = current_step(todos)
    if current is None:
        return todos
    items = [
        TodoItem(i.content, COMPLETED if i.content == current.content else i.status)
        for i in todos.items
    ]
    for index, item in enumerate(items):
        if item.status == PENDING:
            items[index] = TodoItem(item.content, IN_PROGRESS)
            break
    return write_todos(todos, items)


def run_pipeline(
    goal: str,
    registry: Registry,
    env,
    planner: PlannerInterface,
    config: RunConfig | None = None,
) -> PipelineResult:
    """Drive discovery, verification, decomposition and execution in order."""
    config = config or RunConfig()
    transcript = RunTranscript(clock=env.clock)
    locks = LockTable()
    transcript.record("run_start", goal=goal, config=config.to_document())

    try:
        # Discovery: search -> evaluate -> refine, then choose tools.
        try:
            capabilities = tuple(planner.propose_capability_queries(goal))
            report = refine_search(
                registry,
                capabilities,
                config.search_budget,
                k=config.k,
                broadener=getattr(planner, "broadener", None),
            )
            _log_search_rounds(transcript, report, config.k)
            tools = tuple(planner.choose_tools(report))
        except PipelineError:
            raise
        except RegistryError as exc:
            raise DiscoveryFailed(str(exc)) from exc
        transcript.record("tools_chosen", names=list(tools))

        # Decomposition: anchor the full plan before executing anything.
        try:
            todos = write_todos(TodoList(), planner.propose_plan(tools))
        except AnchorError as exc:
            raise PlanRejected(str(exc)) from exc
        _log_anchor(transcript, todos)

        # The persistence proposal is mandatory: after planning, before execution.
        decision = propose_memory(config, transcript)
        checkpoint = (
            CheckpointStore(decision.checkpoint_path) if decision.accepted else None
        )

        runner = StepRunner(
            registry, env, planner, config, transcript, locks, tools, checkpoint
        )
        try:
            while (item := current_step(todos)) is not None:
                runner.execute_step(item, todos)
                try:
                    todos = advance_plan(todos)
                except AnchorError as exc:
                    raise PlanRejected(str(exc)) from exc
                _log_anchor(transcript, todos)
        finally:
            if checkpoint is not None:
                checkpoint.close()
    except PipelineError as exc:
        raise _attach_transcript(exc, transcript)

    artifact = SkillArtifact.from_run(goal, tools, locks, todos, runner.executed_actions, config)
    transcript.record(
        "run_done",
        uploaded=sum(1 for w in runner.worklist),
        folders=len({w.folder for w in runner.worklist}),
    )
    return PipelineResult(artifact=artifact, transcript=transcript, world=env)


def _log_search_rounds(transcript: RunTranscript, report: CoverageReport, k: int) -> None:
    max_rounds = max((len(e.rounds) for e in report.entries), default=0)
    for round_no in range(1, max_rounds + 1):
        requests = []
        results = []
        for entry in report.entries:
            if len(entry.rounds) < round_no:
                continue
            round_record = entry.rounds[round_no - 1]
            requests.append(
                {"query": round_record.query, "app_id": entry.app_id, "k": k}
            )
            results.append(
                [{"name": r.name, "score": r.score} for r in round_record.results]
            )
        transcript.record("search", round=round_no, requests=requests, results=results)


def _log_anchor(transcript: RunTranscript, todos: TodoList) -> None:
    transcript.record(
        "anchor",
        revision=todos.revision,
        items=[[i.status, i.content] for i in todos.items],
        render=render_anchor(todos),
    )


# --- the frozen skill ------------------------------------------------------------------


@dataclass(frozen=True)
class SkillArtifact:
    """Replayable product of a successful run."""

    goal: str
    tools: tuple[tuple[str, str | None], ...]
    locks: dict[str, Any]
    plan: tuple[tuple[str, str], ...]
    steps: tuple[StepAction, ...]
    run: dict[str, Any]
    format_version: int = ARTIFACT_FORMAT_VERSION

    @classmethod
    def from_run(
        cls,
        goal: str,
        tools: Sequence[str],
        locks: LockTable,
        todos: TodoList,
        actions: Sequence[StepAction],
        config: RunConfig,
    ) -> "SkillArtifact":
        return cls(
            goal=goal,
            tools=tuple(
                (name, locks.get(name).digest() if locks.has(name) else None)
                for name in tools
            ),
            locks=locks.export_document()["locks"],
            plan=tuple((i.content, i.status) for i in todos.items),
            steps=tuple(actions),
            run={
                "max_in_flight": config.max_in_flight,
                "retry": config.retry.to_document(),
                "checkpoint_path": config.checkpoint_path if config.accept_memory else None,
                "folder_template": config.folder_template,
            },
        )

    def to_document(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "goal": self.goal,
            "tools": [{"name": n, "lock_digest": d} for n, d in self.tools],
            "locks": self.locks,
            "plan": [{"content": c, "status": s} for c, s in self.plan],
            "steps": [a.to_document() for a in self.steps],
            "run": self.run,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "SkillArtifact":
        return cls(
            goal=doc["goal"],
            tools=tuple((t["name"], t.get("lock_digest")) for t in doc["tools"]),
            locks=dict(doc["locks"]),
            plan=tuple((p["content"], p["status"]) for p in doc["plan"]),
            steps=tuple(StepAction.from_document(s) for s in doc["steps"]),
            run=dict(doc["run"]),
            format_version=int(doc.get("format_version", ARTIFACT_FORMAT_VERSION)),
        )

    def validate_complete(self) -> None:
        """Reject emission of artifacts whose plan or locks are unfinished."""
        if any(status != COMPLETED for _, status in self.plan):
            raise ValueError("artifact plan has uncompleted steps")
        kinds = {a.kind for a in self.steps}
        if "fetch_filter" in kinds and "outlook__list_emails" not in self.locks:
            raise ValueError("artifact is missing the lock for outlook__list_emails")
        # The transfer locks travel as a pair; both absent means the run's
        # worklist was empty and replay will transfer nothing either.
        transfer = ("outlook__download_attachment", "onedrive__upload_file")
        if "upload_batch" in kinds:
            present = [t for t in transfer if t in self.locks]
            if len(present) == 1:
                raise ValueError(f"artifact has only half the transfer locks: {present}")


def emit_skill(artifact: SkillArtifact, path: str | Path) -> Path:
    artifact.validate_complete()
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(
        json.dumps(artifact.to_document(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return target


def replay_skill(
    path: str | Path, env, *, checkpoint: CheckpointStore | None = None
) -> PipelineResult:
    """Execute a frozen skill with no discovery and no probing.

    Every response is validated against the recorded locks; any divergence
    aborts with :class:`LockMismatch` rather than guessing at the new shape.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    artifact = SkillArtifact.from_document(doc)
    locks = LockTable.import_document({"locks": artifact.locks})
    transcript = RunTranscript(clock=env.clock)
    transcript.record("replay_start", goal=artifact.goal, skill=str(path))
    try:
        return _replay_steps(artifact, env, locks, transcript, checkpoint)
    except PipelineError as exc:
        raise _attach_transcript(exc, transcript)


def _replay_steps(
    artifact: "SkillArtifact",
    env,
    locks: LockTable,
    transcript: RunTranscript,
    checkpoint: CheckpointStore | None,
) -> "PipelineResult":
    month_name = env.clock.now_datetime().strftime("%B")

    records: list[dict[str, Any]] = []
    worklist: list[WorkItem] = []
    retry = RetryPolicy.from_document(artifact.run["retry"])
    max_in_flight = int(artifact.run["max_in_flight"])

    for action in artifact.steps:
        transcript.record("step_start", kind=action.kind, todo=None)
        params = action.params
        if action.kind == "fetch_filter":
            window_start = env.clock.now() - int(params["window_days"]) * 86400
            args = {
                "filter": {
                    "received_after": _iso(window_start),
                    "has_attachments": bool(params["has_attachments"]),
                },
                "top": int(params["top"]),
            }
            lock = locks.require("outlook__list_emails")
            response = env.call("outlook__list_emails", args)
            violation = validate_against(lock, response)
            if violation is not None:
                transcript.record(
                    "lock_violation", tool="outlook__list_emails", violation=str(violation)
                )
                raise LockMismatch(f"outlook__list_emails: {violation}")
            records = list(lock.extract_payload(response))
        elif action.kind == "extract_route":
            allow = tuple(str(e).lower().lstrip(".") for e in params["extension_allowlist"])
            block = tuple(str(d).lower() for d in params["domain_blocklist"])
            company_rule = COMPANY_RULES[params["company_rule"]]
            naming_rule = NAMING_RULES[params["naming_rule"]]
            template = artifact.run.get("folder_template", FOLDER_TEMPLATE)
            taken: dict[str, set[str]] = {}
            worklist = []
            for record in records:
                sender = record["sender_address"]
                domain = sender.rsplit("@", 1)[-1].lower()
                if any(domain == b or domain.endswith("." + b) for b in block):
                    continue
                company = company_rule(sender)
                folder = template.format(month=month_name, company=company)
                for attachment in record["attachments"]:
                    filename = attachment["filename"]
                    if filename.rpartition(".")[2].lower() not in allow:
                        continue
                    existing = taken.setdefault(folder, set())
                    document = naming_rule(record["received_at"], filename, existing, allow)
                    existing.add(document)
                    worklist.append(
                        WorkItem(
                            task_id=f"{record['message_id']}/{attachment['attachment_id']}",
                            message_id=record["message_id"],
                            attachment_id=attachment["attachment_id"],
                            filename=filename,
                            received_at=record["received_at"],
                            sender_address=sender,
                            company=company,
                            folder=folder,
                            document=document,
                        )
                    )
            transcript.record("worklist", count=len(worklist))
        elif action.kind == "ensure_folders":
            seen: list[str] = []
            for item in worklist:
                if item.folder not in seen:
                    seen.append(item.folder)
                    create_if_absent(env, item.folder)
            transcript.record("folders", folders=seen)
        elif action.kind == "upload_batch":
            if worklist:
                _replay_transfer(
                    env, locks, worklist, retry, max_in_flight, checkpoint, transcript
                )
        transcript.record("step_done", kind=action.kind, todo=None)

    transcript.record("replay_done", uploaded=len(worklist))
    return PipelineResult(artifact=artifact, transcript=transcript, world=env)


def _replay_transfer(
    env,
    locks: LockTable,
    worklist: Sequence[WorkItem],
    retry: RetryPolicy,
    max_in_flight: int,
    checkpoint: CheckpointStore | None,
    transcript: RunTranscript,
) -> None:
    downloads = [
        TaskSpec(
            w.task_id,
            "outlook__download_attachment",
            {"message_id": w.message_id, "attachment_id": w.attachment_id},
        )
        for w in worklist
    ]
    download_result = run_batch(
        downloads, env=env, locks=locks, max_in_flight=max_in_flight, policy=retry
    )
    _replay_check(download_result, "outlook__download_attachment", transcript)
    download_lock = locks.require("outlook__download_attachment")
    content = {
        w.task_id: download_lock.extract_payload(outcome.value)[0]["content_b64"]
        for w, outcome in zip(worklist, download_result.outcomes)
        if hasattr(outcome, "value")
    }
    uploads = [
        TaskSpec(
            w.task_id,
            "onedrive__upload_file",
            {
                "folder_path": w.folder,
                "filename": w.document,
                "content_b64": content[w.task_id],
            },
        )
        for w in worklist
    ]
    upload_result = run_batch(
        uploads,
        env=env,
        locks=locks,
        max_in_flight=max_in_flight,
        policy=retry,
        checkpoint=checkpoint,
    )
    _replay_check(upload_result, "onedrive__upload_file", transcript)
    transcript.record(
        "batch",
        tool="onedrive__upload_file",
        count=len(upload_result),
        skipped=upload_result.count(Skipped),
    )


def _replay_check(result: BatchResult, tool: str, transcript: RunTranscript) -> None:
    for outcome in result.failures():
        if isinstance(outcome.error, LockViolation):
            transcript.record(
                "lock_violation", tool=tool, violation=str(outcome.error.violation)
            )
            raise LockMismatch(f"{tool}: {outcome.error.violation}")
    if not result.all_ok:
        raise ExecutionFailed(f"replay batch over {tool} failed")
