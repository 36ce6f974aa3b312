"""Built-in tool catalogs.

``default_catalog`` describes the twelve tools the simulated environment
implements (six mailbox, six drive). ``synthetic_catalog`` pads it with
deterministic filler apps for scale tests, and ``staged_refine_catalog``
is a small corpus whose wording forces the broadening loop to a second
round before "fetch emails" matches anything.
"""

from __future__ import annotations

import random

from .registry import ParameterSpec, ToolSchema


def _p(name: str, kind: str, required: bool = False, description: str = "") -> ParameterSpec:
    return ParameterSpec(name=name, kind=kind, required=required, description=description)


def default_catalog() -> list[ToolSchema]:
    return [
        ToolSchema(
            app_id="outlook",
            name="outlook__list_emails",
            description=(
                "List emails from the mailbox, filtered by received date and "
                "attachment presence, newest first, up to a top limit. Each "
                "record carries sender, subject and attachment metadata."
            ),
            params=(
                _p("filter", "object", description="received_after timestamp and has_attachments flag"),
                _p("top", "integer", required=True, description="maximum records to return"),
            ),
            returns_hint="envelope object with a value array of message records",
        ),
        ToolSchema(
            app_id="outlook",
            name="outlook__download_attachment",
            description=(
                "Download one attachment from an email message by message id "
                "and attachment id; returns the filename and base64 content."
            ),
            params=(
                _p("message_id", "string", required=True),
                _p("attachment_id", "string", required=True),
            ),
            returns_hint="envelope object with a single-record value array",
        ),
        ToolSchema(
            app_id="outlook",
            name="outlook__get_email",
            description="Fetch a single email message by its message id.",
            params=(_p("message_id", "string", required=True),),
        ),
        ToolSchema(
            app_id="outlook",
            name="outlook__search_emails",
            description="Search emails whose subject contains the given keywords.",
            params=(
                _p("query", "string", required=True),
                _p("top", "integer", description="maximum records to return"),
            ),
        ),
        ToolSchema(
            app_id="outlook",
            name="outlook__list_mail_folders",
            description="List the mail folders available in the mailbox.",
        ),
        ToolSchema(
            app_id="outlook",
            name="outlook__count_emails",
            description="Count emails matching a received-date and attachment filter.",
            params=(_p("filter", "object"),),
        ),
        ToolSchema(
            app_id="onedrive",
            name="onedrive__create_folder",
            description=(
                "Create a folder with the given name under a parent path; "
                "fails if a node already exists at the target path."
            ),
            params=(
                _p("name", "string", required=True),
                _p("parent_path", "string", description="empty string for the drive root"),
            ),
        ),
        ToolSchema(
            app_id="onedrive",
            name="onedrive__upload_file",
            description=(
                "Upload a file into an existing folder from base64 content; "
                "re-uploading identical bytes is a no-op."
            ),
            params=(
                _p("folder_path", "string", required=True),
                _p("filename", "string", required=True),
                _p("content_b64", "string", required=True),
            ),
        ),
        ToolSchema(
            app_id="onedrive",
            name="onedrive__list_items",
            description="List the immediate children (files and folders) of a folder path.",
            params=(_p("folder_path", "string", required=True),),
        ),
        ToolSchema(
            app_id="onedrive",
            name="onedrive__download_file",
            description="Download a stored file's base64 content by its full path.",
            params=(_p("path", "string", required=True),),
        ),
        ToolSchema(
            app_id="onedrive",
            name="onedrive__get_item",
            description="Get metadata for a file or folder at a path.",
            params=(_p("path", "string", required=True),),
        ),
        ToolSchema(
            app_id="onedrive",
            name="onedrive__delete_item",
            description="Delete a file or folder (and its children) at a path.",
            params=(_p("path", "string", required=True),),
        ),
    ]


_FILLER_APPS = (
    "calendar", "crm", "chat", "billing", "hr", "wiki",
    "tickets", "analytics", "inventory", "payroll", "travel", "signage",
)
_FILLER_VERBS = (
    "schedule", "cancel", "assign", "resolve", "tag", "summarize",
    "route", "merge", "approve", "reject", "archive", "publish",
    "update", "close", "open", "review", "escalate", "export",
)
_FILLER_NOUNS = (
    "meeting", "contact", "deal", "thread", "invoice", "shift",
    "page", "ticket", "metric", "asset", "booking", "banner",
    "expense", "policy", "sprint", "lead", "survey", "badge",
)


def synthetic_catalog(size: int = 200, seed: int = 7) -> list[ToolSchema]:
    """The default catalog padded with deterministic filler tools."""
    base = default_catalog()
    if size < len(base):
        raise ValueError(f"size must be >= {len(base)}")
    rng = random.Random(seed)
    tools = list(base)
    used = {t.name for t in tools}
    while len(tools) < size:
        app = rng.choice(_FILLER_APPS)
        verb = rng.choice(_FILLER_VERBS)
        noun = rng.choice(_FILLER_NOUNS)
        name = f"{app}__{verb}_{noun}"
        if name in used:
            continue
        used.add(name)
        qualifier = rng.choice(("active", "archived", "shared", "recent", "pinned"))
        tools.append(
            ToolSchema(
                app_id=app,
                name=name,
                description=f"{verb.capitalize()} a {qualifier} {noun} in the {app} workspace.",
                params=(_p(f"{noun}_id", "string", required=True),),
            )
        )
    return tools


def staged_refine_catalog() -> list[ToolSchema]:
    """Corpus for exercising the broadening loop.

    No description mentions "fetch" or "emails", so that capability only
    resolves once the second round adds "list messages"; "download
    attachment" matches immediately. The vocabulary also avoids "file",
    "document" and "item" so fully unmatched capabilities stay unmatched
    across every broadened round.
    """
    return [
        ToolSchema(
            app_id="mail",
            name="mail__list_messages",
            description="List messages from the inbox, newest first, up to a top limit.",
            params=(_p("top", "integer", required=True),),
        ),
        ToolSchema(
            app_id="mail",
            name="mail__download_attachment",
            description="Download an attachment from a message by its identifier.",
            params=(
                _p("message_id", "string", required=True),
                _p("attachment_id", "string", required=True),
            ),
        ),
        ToolSchema(
            app_id="mail",
            name="mail__send_message",
            description="Send a new message to one or more recipients.",
            params=(_p("to", "array", required=True), _p("body", "string", required=True)),
        ),
        ToolSchema(
            app_id="notes",
            name="notes__create_note",
            description="Create a note with a title and body text.",
            params=(_p("title", "string", required=True), _p("body", "string")),
        ),
        ToolSchema(
            app_id="notes",
            name="notes__list_notes",
            description="List notes, optionally bounded by a top limit.",
            params=(_p("top", "integer"),),
        ),
    ]
