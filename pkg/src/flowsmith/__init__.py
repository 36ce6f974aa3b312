"""Workflow synthesis runtime: discover, probe, anchor, execute, replay."""

from . import errors
from .anchor import (
    COMPLETED,
    IN_PROGRESS,
    PENDING,
    TodoItem,
    TodoList,
    current_step,
    parse_anchor,
    render_anchor,
    write_todos,
)
from .catalogs import default_catalog, staged_refine_catalog, synthetic_catalog
from .clock import VirtualClock
from .executor import (
    BatchResult,
    CheckpointStore,
    Failed,
    FolderHandle,
    RetryPolicy,
    Skipped,
    Success,
    TaskSpec,
    create_if_absent,
    run_batch,
    with_retry,
)
from .mockenv import (
    Attachment,
    FaultRule,
    FaultSchedule,
    MailMessage,
    WorldState,
    build_fixture,
)
from .pipeline import (
    MemoryDecision,
    PlannerInterface,
    PipelineResult,
    RunConfig,
    RunTranscript,
    ScriptedPlanner,
    SkillArtifact,
    StepAction,
    emit_skill,
    extract_company,
    name_document,
    propose_memory,
    replay_skill,
    run_pipeline,
)
from .probe import (
    FAILED,
    GROUNDED,
    SUSPECT_EMPTY,
    LockedSchema,
    LockTable,
    ProbeReport,
    ShapeDescriptor,
    Violation,
    detect_envelope,
    infer_shape,
    lock_schema,
    merge_shapes,
    probe_call,
    validate_against,
)
from .registry import (
    CapabilityQuery,
    CoverageReport,
    LoadedContext,
    Registry,
    SearchRequest,
    SearchResult,
    ToolSchema,
    index_catalog,
    list_apps,
    load_functions,
    refine_search,
    search_functions,
)

__version__ = "0.1.0"
