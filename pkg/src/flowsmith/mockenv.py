"""Deterministic in-process simulation of a mailbox and a drive.

Every tool answers with a metadata envelope (``{"@odata.context": ...,
"value": [...]}``) like the enterprise APIs it stands in for. State is
mutated only through :meth:`WorldState.call`, which also maintains
per-tool call counters, an in-flight gauge, a configurable simulated
latency on the virtual clock, and a deterministic fault schedule. No
sockets, no wall-clock time.
"""

from __future__ import annotations

import base64
import binascii
import fnmatch
import random
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable, Mapping, Sequence

from .clock import VirtualClock
from .errors import (
    AlreadyExists,
    BadFilter,
    Conflict,
    FolderNotFound,
    InvalidArgument,
    NotFound,
    ParentNotFound,
    ToolError,
    UnknownTool,
)

ODATA_MESSAGES = "sim://outlook/$metadata#messages"
ODATA_ATTACHMENTS = "sim://outlook/$metadata#attachments"
ODATA_FOLDERS = "sim://onedrive/$metadata#folders"
ODATA_FILES = "sim://onedrive/$metadata#files"

# Noon, mid-December; the folder-naming examples depend on a December clock.
FIXTURE_EPOCH = datetime(2024, 12, 15, 12, 0, 0, tzinfo=timezone.utc)

DEFAULT_LATENCY = 0.01


def parse_iso(value: str) -> datetime:
    try:
        parsed = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except (ValueError, AttributeError, TypeError) as exc:
        raise BadFilter(f"not an ISO-8601 timestamp: {value!r}") from exc
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed


@dataclass(frozen=True)
class Attachment:
    attachment_id: str
    filename: str
    content: bytes


@dataclass(frozen=True)
class MailMessage:
    message_id: str
    sender_address: str
    subject: str
    received_at: str
    attachments: tuple[Attachment, ...] = ()

    def __post_init__(self):
        parse_iso(self.received_at)

    @property
    def received_dt(self) -> datetime:
        return parse_iso(self.received_at)

    @property
    def sender_domain(self) -> str:
        return self.sender_address.rsplit("@", 1)[-1].lower()


@dataclass(frozen=True)
class DriveNode:
    path: str
    kind: str  # "folder" | "file"
    content: bytes | None = None


@dataclass(frozen=True)
class FaultRule:
    tool_pattern: str
    every_nth: int
    error: type[ToolError]

    def __post_init__(self):
        if self.every_nth < 1:
            raise ValueError("every_nth must be >= 1")


class FaultSchedule:
    """Deterministic injected failures: rule fires on every nth call to a tool."""

    def __init__(self, rules: Sequence[FaultRule] = ()):
        self.rules = tuple(rules)

    def check(self, tool_name: str, call_index: int) -> type[ToolError] | None:
        for rule in self.rules:
            if fnmatch.fnmatchcase(tool_name, rule.tool_pattern):
                if call_index % rule.every_nth == 0:
                    return rule.error
        return None


class WorldState:
    """Simulated mailbox + drive behind a single tool-call interface."""

    def __init__(
        self,
        mailbox: Sequence[MailMessage] = (),
        *,
        start_time: datetime = FIXTURE_EPOCH,
        faults: FaultSchedule | None = None,
        latency: float = 0.0,
    ):
        ids = [m.message_id for m in mailbox]
        if len(ids) != len(set(ids)):
            raise ValueError("message ids must be unique")
        self._mailbox = tuple(mailbox)
        self._drive: dict[str, DriveNode] = {}
        self.clock = VirtualClock(start=start_time.timestamp())
        self.faults = faults or FaultSchedule()
        self.latency = latency
        self._mutex = threading.RLock()
        self._counters: dict[str, int] = {}
        self._in_flight = 0
        self._max_in_flight_seen = 0
        self._tools: dict[str, Callable[[Mapping[str, Any]], Any]] = {
            "outlook__list_emails": self._list_emails,
            "outlook__download_attachment": self._download_attachment,
            "outlook__get_email": self._get_email,
            "outlook__search_emails": self._search_emails,
            "outlook__list_mail_folders": self._list_mail_folders,
            "outlook__count_emails": self._count_emails,
            "onedrive__create_folder": self._create_folder,
            "onedrive__upload_file": self._upload_file,
            "onedrive__list_items": self._list_items,
            "onedrive__download_file": self._download_file,
            "onedrive__get_item": self._get_item,
            "onedrive__delete_item": self._delete_item,
        }

    # -- instrumentation -------------------------------------------------

    @property
    def mailbox(self) -> tuple[MailMessage, ...]:
        return self._mailbox

    def counters(self) -> dict[str, int]:
        with self._mutex:
            return dict(self._counters)

    def call_total(self) -> int:
        with self._mutex:
            return sum(self._counters.values())

    @property
    def max_in_flight_seen(self) -> int:
        with self._mutex:
            return self._max_in_flight_seen

    def reset_gauges(self) -> None:
        with self._mutex:
            self._max_in_flight_seen = 0

    def drive_snapshot(self) -> tuple[tuple[str, str, str | None], ...]:
        """Canonical, order-independent view of the drive for equality checks."""
        with self._mutex:
            return tuple(
                (
                    node.path,
                    node.kind,
                    base64.b64encode(node.content).decode("ascii")
                    if node.content is not None
                    else None,
                )
                for node in sorted(self._drive.values(), key=lambda n: n.path)
            )

    def drive_paths(self) -> tuple[str, ...]:
        with self._mutex:
            return tuple(sorted(self._drive))

    # -- the single dispatch point ---------------------------------------

    def call(self, tool_name: str, args: Mapping[str, Any]) -> Any:
        with self._mutex:
            self._counters[tool_name] = self._counters.get(tool_name, 0) + 1
            call_index = self._counters[tool_name]
            fault = self.faults.check(tool_name, call_index)
            self._in_flight += 1
            self._max_in_flight_seen = max(self._max_in_flight_seen, self._in_flight)
        try:
            if self.latency > 0:
                self.clock.sleep(self.latency)
            if fault is not None:
                raise fault(f"injected fault on call #{call_index} to {tool_name}")
            handler = self._tools.get(tool_name)
            if handler is None:
                raise UnknownTool(tool_name)
            with self._mutex:
                return handler(args)
        finally:
            with self._mutex:
                self._in_flight -= 1

    # -- mailbox tools -----------------------------------------------------

    def _matching_messages(self, filt: Mapping[str, Any]) -> list[MailMessage]:
        received_after = filt.get("received_after")
        after_dt = parse_iso(received_after) if received_after is not None else None
        has_attachments = bool(filt.get("has_attachments", False))
        selected = [
            m
            for m in self._mailbox
            # Boundary is inclusive: received_at == received_after matches.
            if (after_dt is None or m.received_dt >= after_dt)
            and (not has_attachments or m.attachments)
        ]
        selected.sort(key=lambda m: (m.received_dt, m.message_id), reverse=True)
        return selected

    @staticmethod
    def _message_record(message: MailMessage) -> dict[str, Any]:
        return {
            "message_id": message.message_id,
            "sender_address": message.sender_address,
            "subject": message.subject,
            "received_at": message.received_at,
            "attachments": [
                {"attachment_id": a.attachment_id, "filename": a.filename}
                for a in message.attachments
            ],
        }

    def _list_emails(self, args: Mapping[str, Any]) -> dict[str, Any]:
        top = args.get("top")
        if not isinstance(top, int) or isinstance(top, bool) or top < 1:
            raise BadFilter(f"top must be a positive integer, got {top!r}")
        selected = self._matching_messages(args.get("filter") or {})
        return {
            "@odata.context": ODATA_MESSAGES,
            "value": [self._message_record(m) for m in selected[:top]],
        }

    def _count_emails(self, args: Mapping[str, Any]) -> dict[str, Any]:
        selected = self._matching_messages(args.get("filter") or {})
        return {"@odata.context": ODATA_MESSAGES, "value": [{"count": len(selected)}]}

    def _find_message(self, message_id: Any) -> MailMessage:
        for message in self._mailbox:
            if message.message_id == message_id:
                return message
        raise NotFound(f"no message {message_id!r}")

    def _get_email(self, args: Mapping[str, Any]) -> dict[str, Any]:
        message = self._find_message(args.get("message_id"))
        return {"@odata.context": ODATA_MESSAGES, "value": [self._message_record(message)]}

    def _search_emails(self, args: Mapping[str, Any]) -> dict[str, Any]:
        query = args.get("query")
        if not query or not isinstance(query, str):
            raise InvalidArgument("query must be a non-empty string")
        top = args.get("top", 10)
        hits = [
            self._message_record(m)
            for m in self._mailbox
            if query.lower() in m.subject.lower()
        ]
        return {"@odata.context": ODATA_MESSAGES, "value": hits[:top]}

    def _list_mail_folders(self, args: Mapping[str, Any]) -> dict[str, Any]:
        return {
            "@odata.context": ODATA_MESSAGES,
            "value": [{"name": n} for n in ("Archive", "Inbox", "Sent")],
        }

    def _download_attachment(self, args: Mapping[str, Any]) -> dict[str, Any]:
        message = self._find_message(args.get("message_id"))
        attachment_id = args.get("attachment_id")
        for attachment in message.attachments:
            if attachment.attachment_id == attachment_id:
                return {
                    "@odata.context": ODATA_ATTACHMENTS,
                    "value": [
                        {
                            "attachment_id": attachment.attachment_id,
                            "filename": attachment.filename,
                            "content_b64": base64.b64encode(attachment.content).decode("ascii"),
                        }
                    ],
                }
        raise NotFound(f"no attachment {attachment_id!r} on {message.message_id}")

    # -- drive tools ---------------------------------------------------------

    def _folder_exists(self, path: str) -> bool:
        if path == "":
            return True
        node = self._drive.get(path)
        return node is not None and node.kind == "folder"

    def _create_folder(self, args: Mapping[str, Any]) -> dict[str, Any]:
        name = args.get("name")
        if not name or not isinstance(name, str) or "/" in name:
            raise InvalidArgument(f"bad folder name {name!r}")
        parent = args.get("parent_path", "") or ""
        if not self._folder_exists(parent):
            raise ParentNotFound(f"no parent folder {parent!r}")
        path = f"{parent}/{name}" if parent else name
        if path in self._drive:
            raise AlreadyExists(f"node already exists at {path!r}")
        self._drive[path] = DriveNode(path=path, kind="folder")
        return {"@odata.context": ODATA_FOLDERS, "value": [{"path": path}]}

    def _upload_file(self, args: Mapping[str, Any]) -> dict[str, Any]:
        folder = args.get("folder_path", "") or ""
        filename = args.get("filename")
        if not filename or not isinstance(filename, str) or "/" in filename:
            raise InvalidArgument(f"bad filename {filename!r}")
        if not self._folder_exists(folder):
            raise FolderNotFound(f"no folder {folder!r}")
        try:
            content = base64.b64decode(args.get("content_b64", ""), validate=True)
        except (binascii.Error, TypeError) as exc:
            raise InvalidArgument("content_b64 is not valid base64") from exc
        path = f"{folder}/{filename}" if folder else filename
        existing = self._drive.get(path)
        if existing is not None:
            if existing.kind != "file" or existing.content != content:
                raise Conflict(f"different node already stored at {path!r}")
            existed = True  # identical re-upload is a no-op success
        else:
            self._drive[path] = DriveNode(path=path, kind="file", content=content)
            existed = False
        return {
            "@odata.context": ODATA_FILES,
            "value": [{"path": path, "size": len(content), "existed": existed}],
        }

    def _list_items(self, args: Mapping[str, Any]) -> dict[str, Any]:
        folder = args.get("folder_path", "") or ""
        if not self._folder_exists(folder):
            raise FolderNotFound(f"no folder {folder!r}")
        prefix = f"{folder}/" if folder else ""
        children = [
            {"name": node.path[len(prefix):], "kind": node.kind}
            for node in self._drive.values()
            if node.path.startswith(prefix)
            and "/" not in node.path[len(prefix):]
            and node.path != folder
        ]
        children.sort(key=lambda c: c["name"])
        return {"@odata.context": ODATA_FILES, "value": children}

    def _download_file(self, args: Mapping[str, Any]) -> dict[str, Any]:
        node = self._drive.get(args.get("path", ""))
        if node is None or node.kind != "file":
            raise NotFound(f"no file at {args.get('path')!r}")
        return {
            "@odata.context": ODATA_FILES,
            "value": [
                {
                    "path": node.path,
                    "content_b64": base64.b64encode(node.content or b"").decode("ascii"),
                }
            ],
        }

    def _get_item(self, args: Mapping[str, Any]) -> dict[str, Any]:
        node = self._drive.get(args.get("path", ""))
        if node is None:
            raise NotFound(f"no item at {args.get('path')!r}")
        record: dict[str, Any] = {"path": node.path, "kind": node.kind}
        if node.kind == "file":
            record["size"] = len(node.content or b"")
        return {"@odata.context": ODATA_FILES, "value": [record]}

    def _delete_item(self, args: Mapping[str, Any]) -> dict[str, Any]:
        path = args.get("path", "")
        if path == "":
            raise InvalidArgument("cannot delete the drive root")
        if path not in self._drive:
            raise NotFound(f"no item at {path!r}")
        removed = [p for p in self._drive if p == path or p.startswith(path + "/")]
        for p in removed:
            del self._drive[p]
        return {"@odata.context": ODATA_FILES, "value": [{"path": path, "removed": len(removed)}]}

    # -- serialization --------------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        return {
            "format_version": 1,
            "clock": self.clock.now_iso(),
            "latency": self.latency,
            "mailbox": [
                {
                    "message_id": m.message_id,
                    "sender_address": m.sender_address,
                    "subject": m.subject,
                    "received_at": m.received_at,
                    "attachments": [
                        {
                            "attachment_id": a.attachment_id,
                            "filename": a.filename,
                            "content_b64": base64.b64encode(a.content).decode("ascii"),
                        }
                        for a in m.attachments
                    ],
                }
                for m in self._mailbox
            ],
            "drive": [
                {
                    "path": node.path,
                    "kind": node.kind,
                    "content_b64": base64.b64encode(node.content).decode("ascii")
                    if node.content is not None
                    else None,
                }
                for node in sorted(self._drive.values(), key=lambda n: n.path)
            ],
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any], *, latency: float | None = None) -> "WorldState":
        mailbox = tuple(
            MailMessage(
                message_id=m["message_id"],
                sender_address=m["sender_address"],
                subject=m["subject"],
                received_at=m["received_at"],
                attachments=tuple(
                    Attachment(
                        attachment_id=a["attachment_id"],
                        filename=a["filename"],
                        content=base64.b64decode(a["content_b64"]),
                    )
                    for a in m.get("attachments", [])
                ),
            )
            for m in doc.get("mailbox", [])
        )
        world = cls(
            mailbox,
            start_time=parse_iso(doc["clock"]),
            latency=doc.get("latency", DEFAULT_LATENCY) if latency is None else latency,
        )
        for node in doc.get("drive", []):
            content = node.get("content_b64")
            world._drive[node["path"]] = DriveNode(
                path=node["path"],
                kind=node["kind"],
                content=base64.b64decode(content) if content is not None else None,
            )
        return world


# --- the canonical fixture -----------------------------------------------------


_COMPANY_POOL = (
    ("acme-corp.com", "jane"),
    ("globex.com", "peter"),
    ("initech.io", "sam"),
    ("umbrella-labs.net", "ravi"),
    ("stark-industries.com", "maya"),
    ("wayne-enterprises.org", "li"),
    ("hooli.ai", "nadia"),
    ("tyrell.co.uk", "rachael"),
)

_DOC_TEMPLATES = (
    ("Invoice #{n}", "pdf"),
    ("Q4 Report", "xlsx"),
    ("Statement {n}", "xlsx"),
    ("Contract Draft", "pdf"),
    ("Budget 2025", "xlsx"),
    ("Purchase Order {n}", "pdf"),
    ("Timesheet", "xlsx"),
)


def _iso_at(days_back: int, hour_offset: int) -> str:
    moment = FIXTURE_EPOCH.timestamp() - days_back * 86400 - hour_offset * 3600
    return datetime.fromtimestamp(moment, tz=timezone.utc).isoformat()


def build_fixture(seed: int = 0, *, latency: float = DEFAULT_LATENCY) -> WorldState:
    """Mailbox fixture for the archival scenario, deterministic in ``seed``.

    Exactly seven messages sit inside the fifteen-day window with
    attachments, all from external senders and each carrying exactly one
    pdf/xlsx document (one also carries a png rider). Internal senders,
    older traffic and a png-only message are present but fall outside the
    window-plus-attachments filter.
    """
    rng = random.Random(seed)
    domains = rng.sample(_COMPANY_POOL, 5)
    senders = [domains[i] for i in (0, 0, 1, 1, 2, 3, 4)]
    rng.shuffle(senders)
    recent_days = sorted(rng.sample(range(1, 15), 7))
    templates = list(_DOC_TEMPLATES)
    rng.shuffle(templates)
    png_rider_slot = rng.randrange(7)

    messages: list[MailMessage] = []
    for i in range(7):
        domain, person = senders[i]
        stem_template, ext = templates[i]
        stem = stem_template.format(n=rng.randrange(10, 99))
        attachments = [
            Attachment("a1", f"{stem}.{ext}", rng.randbytes(rng.randrange(40, 160)))
        ]
        if i == png_rider_slot:
            attachments.append(Attachment("a2", "logo.png", rng.randbytes(64)))
        messages.append(
            MailMessage(
                message_id=f"m{i + 1:02d}",
                sender_address=f"{person}@{domain}",
                subject=f"{stem} from {domain.split('.')[0]}",
                received_at=_iso_at(recent_days[i], rng.randrange(0, 10)),
                attachments=tuple(attachments),
            )
        )

    messages.append(
        MailMessage(
            message_id="m08",
            sender_address="alice@agentr.dev",
            subject="Standup notes",
            received_at=_iso_at(3, 11),
        )
    )
    messages.append(
        MailMessage(
            message_id="m09",
            sender_address="bot@agentr.dev",
            subject="Weekly internal metrics",
            received_at=_iso_at(20, rng.randrange(0, 10)),
            attachments=(
                Attachment("a1", "internal-metrics.pdf", rng.randbytes(80)),
            ),
        )
    )
    old_domain, old_person = rng.choice(_COMPANY_POOL)
    messages.append(
        MailMessage(
            message_id="m10",
            sender_address=f"{old_person}@{old_domain}",
            subject="Archived quarterly figures",
            received_at=_iso_at(rng.randrange(16, 40), rng.randrange(0, 10)),
            attachments=(Attachment("a1", "Old Figures.xlsx", rng.randbytes(96)),),
        )
    )
    messages.append(
        MailMessage(
            message_id="m11",
            sender_address=f"{old_person}@{old_domain}",
            subject="Last year's contract",
            received_at=_iso_at(rng.randrange(41, 60), rng.randrange(0, 10)),
            attachments=(Attachment("a1", "Signed Contract.pdf", rng.randbytes(96)),),
        )
    )
    png_domain, png_person = rng.choice(_COMPANY_POOL)
    messages.append(
        MailMessage(
            message_id="m12",
            sender_address=f"{png_person}@{png_domain}",
            subject="Screenshot as discussed",
            received_at=_iso_at(rng.randrange(16, 30), rng.randrange(0, 10)),
            attachments=(Attachment("a1", "screenshot.png", rng.randbytes(64)),),
        )
    )

    return WorldState(messages, start_time=FIXTURE_EPOCH, latency=latency)
