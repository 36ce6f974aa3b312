"""Operator entry points.

Subcommands: ``run`` (full pipeline), ``replay`` (execute a frozen
skill), ``search`` (query the catalog), ``probe`` (sample one tool) and
``inspect`` (summarize a transcript). Every failure class maps to one
documented exit code; ``--structured`` switches output to JSON that
round-trips into the originating types.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from .catalogs import default_catalog
from .errors import (
    DiscoveryFailed,
    ExecutionFailed,
    LockMismatch,
    PipelineError,
    PlanRejected,
    ProbeRefused,
    ProbeError,
    RegistryError,
    StoreCorrupt,
    ToolError,
)
from .mockenv import WorldState, build_fixture
from .pipeline import (
    RunConfig,
    ScriptedPlanner,
    emit_skill,
    replay_skill,
    run_pipeline,
)
from .probe import probe_call
from .registry import (
    LoadedContext,
    Registry,
    SearchRequest,
    ToolSchema,
    index_catalog,
    load_functions,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DISCOVERY = 3
EXIT_PROBE = 4
EXIT_PLAN = 5
EXIT_EXECUTION = 6
EXIT_LOCK_MISMATCH = 7
EXIT_INPUT = 8

DEFAULT_GOAL = (
    "Scan the last 15 days of mailbox emails for PDF or XLSX attachments, "
    "filter out internal senders, and archive the rest into per-company "
    "drive folders"
)

PHASE_EXIT_CODES = {
    DiscoveryFailed: EXIT_DISCOVERY,
    ProbeRefused: EXIT_PROBE,
    PlanRejected: EXIT_PLAN,
    ExecutionFailed: EXIT_EXECUTION,
    LockMismatch: EXIT_LOCK_MISMATCH,
}


def exit_code_for(error: PipelineError) -> int:
    for cls, code in PHASE_EXIT_CODES.items():
        if isinstance(error, cls):
            return code
    return EXIT_EXECUTION


def _load_registry(path: str | None) -> Registry:
    if path is None:
        return index_catalog(default_catalog())
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return index_catalog([ToolSchema.from_document(t) for t in doc])


def _load_world(fixture: str | None, seed: int) -> WorldState:
    if fixture is None:
        return build_fixture(seed)
    doc = json.loads(Path(fixture).read_text(encoding="utf-8"))
    return WorldState.from_document(doc)


def _print_json(payload: Any) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


def cmd_run(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = args.checkpoint
    if args.memory and checkpoint_path is None:
        checkpoint_path = str(out_dir / "checkpoint.log")
    config = RunConfig(
        window_days=args.window_days,
        fetch_top=args.top,
        max_in_flight=args.max_in_flight,
        accept_memory=args.memory,
        checkpoint_path=checkpoint_path,
    )
    try:
        registry = _load_registry(args.catalog)
        env = _load_world(args.fixture, args.seed)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_INPUT
    planner = ScriptedPlanner.for_environment(config, env)
    transcript_path = out_dir / "transcript.jsonl"
    try:
        result = run_pipeline(args.goal, registry, env, planner, config)
    except PipelineError as exc:
        partial = getattr(exc, "transcript", None)
        if partial is not None:
            partial.write(transcript_path)
        print(f"error [{exc.phase}]: {exc}", file=sys.stderr)
        return exit_code_for(exc)

    result.transcript.write(transcript_path)
    skill_path = out_dir / "skill.json"
    emit_skill(result.artifact, skill_path)
    (out_dir / "final_state.json").write_text(
        json.dumps(env.to_document(), sort_keys=True, indent=2), encoding="utf-8"
    )
    if args.structured:
        _print_json(
            {
                "skill": str(skill_path),
                "transcript": str(transcript_path),
                "drive_paths": list(env.drive_paths()),
                "stdout": result.transcript.all_stdout(),
            }
        )
    else:
        for line in result.transcript.all_stdout():
            print(line)
        print(f"skill: {skill_path}")
        print(f"transcript: {transcript_path}")
        print(f"drive files: {sum(1 for _, kind, _ in env.drive_snapshot() if kind == 'file')}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        env = _load_world(args.fixture, args.seed)
        skill_path = Path(args.skill)
        if not skill_path.exists():
            raise OSError(f"no skill file at {skill_path}")
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_INPUT
    transcript_path = out_dir / "replay_transcript.jsonl"
    try:
        result = replay_skill(skill_path, env)
    except PipelineError as exc:
        partial = getattr(exc, "transcript", None)
        if partial is not None:
            partial.write(transcript_path)
        print(f"error [{exc.phase}]: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    result.transcript.write(transcript_path)
    if args.structured:
        _print_json(
            {
                "transcript": str(transcript_path),
                "drive_paths": list(env.drive_paths()),
            }
        )
    else:
        print(f"replayed: {args.skill}")
        print(f"transcript: {transcript_path}")
    return EXIT_OK


def cmd_search(args: argparse.Namespace) -> int:
    try:
        registry = _load_registry(args.catalog)
        request = SearchRequest(query=args.query, app_id=args.app, k=args.k)
        results = registry.search_one(request)
    except (OSError, ValueError, KeyError, RegistryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.structured:
        _print_json([r.to_document() for r in results])
    else:
        for rank, result in enumerate(results, start=1):
            print(f"{rank:>2}. {result.name:<36} {result.score:.4f}  {result.snippet}")
        if not results:
            print("(no matches)")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    try:
        registry = _load_registry(args.catalog)
        env = _load_world(args.fixture, args.seed)
        probe_args = json.loads(args.args) if args.args else _default_probe_args(
            args.tool, env, args.limit
        )
        loaded = load_functions(registry, LoadedContext(), [args.tool])
    except (OSError, ValueError, KeyError, RegistryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        report = probe_call(
            env, loaded, args.tool, probe_args, args.limit, max_limit=args.limit
        )
    except (ProbeError, ToolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROBE
    if args.structured:
        _print_json(report.to_document())
    else:
        print(f"tool: {report.tool_name}")
        print(f"verdict: {report.verdict}")
        for line in report.stdout_lines:
            print(line)
        if report.error:
            print(f"error: {report.error}")
        for sample in report.raw_samples:
            print(json.dumps(sample, sort_keys=True, indent=2))
    return EXIT_OK if report.verdict == "GROUNDED" else EXIT_PROBE


def _default_probe_args(tool: str, env: WorldState, limit: int) -> dict[str, Any]:
    if tool in ("outlook__list_emails", "outlook__count_emails"):
        received_after = env.clock.now() - 15 * 86400
        from .pipeline import _iso

        return {
            "filter": {"received_after": _iso(received_after), "has_attachments": True},
            "top": limit,
        }
    if tool == "outlook__search_emails":
        return {"query": "report", "top": limit}
    if tool in ("onedrive__list_items", "outlook__list_mail_folders"):
        return {"folder_path": ""}
    return {}


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        from .pipeline import RunTranscript

        text = Path(args.transcript).read_text(encoding="utf-8")
        transcript = RunTranscript.from_jsonl(text)
    except (OSError, ValueError, StoreCorrupt) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.structured:
        _print_json(transcript.events)
        return EXIT_OK
    counts: dict[str, int] = {}
    for event in transcript.events:
        counts[event["event"]] = counts.get(event["event"], 0) + 1
    print(f"events: {len(transcript.events)}")
    for kind in sorted(counts):
        print(f"  {kind}: {counts[kind]}")
    for line in transcript.all_stdout():
        print(f"stdout: {line}")
    anchors = transcript.of_kind("anchor")
    if anchors:
        print("final plan:")
        print(anchors[-1].get("render", ""))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsmith",
        description="Synthesize, run and replay multi-service workflows "
        "against the simulated mailbox + drive.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--catalog", help="tool catalog JSON (default: built-in)")
        p.add_argument("--fixture", help="environment fixture JSON (default: seeded)")
        p.add_argument("--seed", type=int, default=0, help="fixture seed (default 0)")
        p.add_argument(
            "--structured", action="store_true", help="emit machine-readable JSON"
        )

    run = sub.add_parser("run", help="run the full pipeline")
    common(run)
    run.add_argument("--goal", default=DEFAULT_GOAL)
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument(
        "--memory",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="accept the checkpoint-memory proposal",
    )
    run.add_argument("--checkpoint", help="checkpoint file (with --memory)")
    run.add_argument("--max-in-flight", type=int, default=4)
    run.add_argument("--window-days", type=int, default=15)
    run.add_argument("--top", type=int, default=50)
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="replay a frozen skill")
    replay.add_argument("skill", help="skill artifact path")
    common(replay)
    replay.add_argument("--out", default="out", help="output directory")
    replay.set_defaults(func=cmd_replay)

    search = sub.add_parser("search", help="search the tool catalog")
    search.add_argument("query")
    common(search)
    search.add_argument("--app", help="restrict to one app id")
    search.add_argument("--k", type=int, default=5)
    search.set_defaults(func=cmd_search)

    probe = sub.add_parser("probe", help="probe one tool with a strict limit")
    probe.add_argument("tool")
    common(probe)
    probe.add_argument("--limit", type=int, default=1)
    probe.add_argument("--args", help="JSON object of tool arguments")
    probe.set_defaults(func=cmd_probe)

    inspect = sub.add_parser("inspect", help="summarize a transcript file")
    inspect.add_argument("transcript")
    inspect.add_argument(
        "--structured", action="store_true", help="emit machine-readable JSON"
    )
    inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
