import base64
import json

import pytest

from flowsmith import (
    Attachment,
    FaultRule,
    FaultSchedule,
    MailMessage,
    WorldState,
    build_fixture,
)
from flowsmith.errors import (
    AlreadyExists,
    BadFilter,
    Conflict,
    FolderNotFound,
    InvalidArgument,
    NotFound,
    ParentNotFound,
    RateLimited,
    UnknownTool,
)
from flowsmith.mockenv import FIXTURE_EPOCH, parse_iso

from conftest import fifteen_day_filter

ALLOWED = ("pdf", "xlsx")


def _ext(filename):
    return filename.rpartition(".")[2].lower()


# --- fixture constraints -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_fixture_satisfies_scenario_constraints(seed):
    env = build_fixture(seed)
    window_start = env.clock.now() - 15 * 86400
    recent_with_attachments = [
        m
        for m in env.mailbox
        if m.received_dt.timestamp() >= window_start and m.attachments
    ]
    assert len(recent_with_attachments) == 7
    for message in recent_with_attachments:
        assert message.sender_domain != "agentr.dev"
        assert sum(1 for a in message.attachments if _ext(a.filename) in ALLOWED) == 1

    internal = [m for m in env.mailbox if m.sender_domain == "agentr.dev"]
    assert len(internal) >= 2
    older = [m for m in env.mailbox if m.received_dt.timestamp() < window_start]
    assert len(older) >= 2
    png_only = [
        m
        for m in env.mailbox
        if m.attachments and all(_ext(a.filename) not in ALLOWED for a in m.attachments)
    ]
    assert len(png_only) >= 1
    companies = {m.sender_domain for m in recent_with_attachments}
    assert len(companies) >= 2


def test_fixture_deterministic_in_seed():
    assert build_fixture(5).to_document() == build_fixture(5).to_document()
    assert build_fixture(1).to_document() != build_fixture(2).to_document()


def test_fixture_clock_starts_at_epoch():
    env = build_fixture(0)
    assert env.clock.now() == FIXTURE_EPOCH.timestamp()
    assert env.clock.now_datetime().strftime("%B") == "December"


# --- mailbox tools ------------------------------------------------------------------


def test_list_emails_seven_on_fixture(world):
    response = world.call("outlook__list_emails", fifteen_day_filter(world))
    assert set(response) == {"@odata.context", "value"}
    assert len(response["value"]) == 7
    received = [r["received_at"] for r in response["value"]]
    assert received == sorted(received, reverse=True)  # newest first


def test_list_emails_pagination(world):
    response = world.call("outlook__list_emails", fifteen_day_filter(world, top=1))
    assert len(response["value"]) == 1


def test_list_emails_future_window_is_empty(world):
    from flowsmith.pipeline import _iso

    args = {
        "filter": {"received_after": _iso(world.clock.now() + 60), "has_attachments": True},
        "top": 10,
    }
    assert world.call("outlook__list_emails", args)["value"] == []


def test_list_emails_boundary_is_inclusive():
    at_boundary = "2024-11-30T12:00:00+00:00"
    env = WorldState(
        (
            MailMessage("m1", "a@b.com", "x", at_boundary, (Attachment("a1", "f.pdf", b"x"),)),
        ),
        start_time=FIXTURE_EPOCH,
    )
    response = env.call(
        "outlook__list_emails",
        {"filter": {"received_after": at_boundary, "has_attachments": True}, "top": 5},
    )
    assert [r["message_id"] for r in response["value"]] == ["m1"]


def test_list_emails_bad_timestamp(world):
    with pytest.raises(BadFilter):
        world.call(
            "outlook__list_emails",
            {"filter": {"received_after": "12/01/2024"}, "top": 5},
        )
    with pytest.raises(BadFilter):
        world.call("outlook__list_emails", {"filter": {}, "top": 0})


def test_download_round_trips_bytes(world):
    message = next(m for m in world.mailbox if m.attachments)
    attachment = message.attachments[0]
    response = world.call(
        "outlook__download_attachment",
        {"message_id": message.message_id, "attachment_id": attachment.attachment_id},
    )
    [record] = response["value"]
    assert base64.b64decode(record["content_b64"]) == attachment.content
    assert record["filename"] == attachment.filename


def test_download_unknown_ids(world):
    with pytest.raises(NotFound):
        world.call(
            "outlook__download_attachment",
            {"message_id": "mX", "attachment_id": "a1"},
        )
    with pytest.raises(NotFound):
        world.call(
            "outlook__download_attachment",
            {"message_id": world.mailbox[0].message_id, "attachment_id": "zz"},
        )


def test_every_tool_answers_with_an_envelope(world):
    create_if = {"name": "Probe", "parent_path": ""}
    message = next(m for m in world.mailbox if m.attachments)
    calls = {
        "outlook__list_emails": fifteen_day_filter(world, top=2),
        "outlook__download_attachment": {
            "message_id": message.message_id,
            "attachment_id": message.attachments[0].attachment_id,
        },
        "outlook__get_email": {"message_id": message.message_id},
        "outlook__search_emails": {"query": "a"},
        "outlook__list_mail_folders": {},
        "outlook__count_emails": {"filter": {}},
        "onedrive__create_folder": create_if,
        "onedrive__upload_file": {
            "folder_path": "Probe",
            "filename": "f.bin",
            "content_b64": base64.b64encode(b"abc").decode(),
        },
        "onedrive__list_items": {"folder_path": ""},
        "onedrive__download_file": {"path": "Probe/f.bin"},
        "onedrive__get_item": {"path": "Probe"},
        "onedrive__delete_item": {"path": "Probe"},
    }
    for tool, args in calls.items():
        response = world.call(tool, args)
        assert isinstance(response, dict), tool
        assert isinstance(response.get("@odata.context"), str), tool
        assert isinstance(response.get("value"), list), tool


# --- drive tools -----------------------------------------------------------------------


def test_create_folder_lifecycle():
    env = WorldState(())
    env.call("onedrive__create_folder", {"name": "A", "parent_path": ""})
    with pytest.raises(AlreadyExists):
        env.call("onedrive__create_folder", {"name": "A", "parent_path": ""})
    with pytest.raises(ParentNotFound):
        env.call("onedrive__create_folder", {"name": "C", "parent_path": "Missing"})
    env.call("onedrive__create_folder", {"name": "B", "parent_path": "A"})
    assert env.drive_paths() == ("A", "A/B")


def test_upload_identity_and_conflict():
    env = WorldState(())
    env.call("onedrive__create_folder", {"name": "A", "parent_path": ""})
    payload = base64.b64encode(b"same bytes").decode()
    args = {"folder_path": "A", "filename": "f.pdf", "content_b64": payload}
    first = env.call("onedrive__upload_file", args)
    snapshot = env.drive_snapshot()
    second = env.call("onedrive__upload_file", args)  # identical: no-op success
    assert env.drive_snapshot() == snapshot
    assert first["value"][0]["existed"] is False
    assert second["value"][0]["existed"] is True
    different = dict(args, content_b64=base64.b64encode(b"other").decode())
    with pytest.raises(Conflict):
        env.call("onedrive__upload_file", different)


def test_upload_requires_folder():
    env = WorldState(())
    with pytest.raises(FolderNotFound):
        env.call(
            "onedrive__upload_file",
            {"folder_path": "Nope", "filename": "f.pdf", "content_b64": ""},
        )


def test_upload_rejects_bad_base64():
    env = WorldState(())
    with pytest.raises(InvalidArgument):
        env.call(
            "onedrive__upload_file",
            {"folder_path": "", "filename": "f.pdf", "content_b64": "!!not-base64!!"},
        )


def test_unknown_tool():
    with pytest.raises(UnknownTool):
        WorldState(()).call("outlook__teleport", {})


# --- instrumentation ----------------------------------------------------------------------


def test_fault_schedule_fires_exactly_on_nth():
    env = WorldState(
        (),
        faults=FaultSchedule(
            [FaultRule("outlook__download_attachment", 5, RateLimited)]
        ),
    )
    outcomes = []
    for _ in range(10):
        try:
            env.call("outlook__download_attachment", {"message_id": "x", "attachment_id": "y"})
            outcomes.append("ok")
        except RateLimited:
            outcomes.append("limited")
        except NotFound:
            outcomes.append("ok")  # fault did not fire; lookup failed as usual
    assert [i + 1 for i, o in enumerate(outcomes) if o == "limited"] == [5, 10]


def test_counters_track_every_attempt():
    env = WorldState((), faults=FaultSchedule([FaultRule("*", 2, RateLimited)]))
    for _ in range(4):
        try:
            env.call("outlook__list_mail_folders", {})
        except RateLimited:
            pass
    assert env.counters() == {"outlook__list_mail_folders": 4}


def test_fault_determinism_same_sequence():
    def firing_pattern():
        env = WorldState(
            (), faults=FaultSchedule([FaultRule("outlook__*", 3, RateLimited)])
        )
        fired = []
        for i in range(9):
            try:
                env.call("outlook__list_mail_folders", {})
                fired.append(False)
            except RateLimited:
                fired.append(True)
        return fired

    assert firing_pattern() == firing_pattern()


# --- serialization --------------------------------------------------------------------------


def test_world_document_round_trip(world):
    world.call("onedrive__create_folder", {"name": "Keep", "parent_path": ""})
    doc = world.to_document()
    json.dumps(doc)  # must be pure interchange data
    clone = WorldState.from_document(doc)
    assert clone.drive_snapshot() == world.drive_snapshot()
    assert clone.to_document() == doc
    assert clone.clock.now() == pytest.approx(world.clock.now())


def test_message_requires_parseable_timestamp():
    with pytest.raises(BadFilter):
        MailMessage("m1", "a@b.com", "s", "not-a-date")
    assert parse_iso("2024-12-01T00:00:00Z").tzinfo is not None
