import pytest
from hypothesis import given, settings, strategies as st

from flowsmith import (
    CheckpointStore,
    Failed,
    FaultRule,
    FaultSchedule,
    LockTable,
    RetryPolicy,
    Skipped,
    Success,
    TaskSpec,
    WorldState,
    build_fixture,
    create_if_absent,
    run_batch,
    with_retry,
)
from flowsmith.errors import (
    CheckpointUnavailable,
    Exhausted,
    PermissionDenied,
    RateLimited,
    SchemaNotLocked,
    StoreCorrupt,
)
from flowsmith.probe import GROUNDED, ProbeReport


class SimulatedCrash(Exception):
    pass


class CrashingStore(CheckpointStore):
    """Raises instead of writing once ``crash_after`` marks have landed."""

    def __init__(self, path, crash_after):
        super().__init__(path)
        self.crash_after = crash_after
        self._marks = 0

    def mark_processed(self, task_id):
        if self._marks >= self.crash_after:
            raise SimulatedCrash(f"process died before mark #{self._marks + 1}")
        super().mark_processed(task_id)
        self._marks += 1


def lock_from_call(table, env, tool, args):
    response = env.call(tool, dict(args))
    report = ProbeReport(tool, (response,), ("sample",), GROUNDED, "test")
    return table.lock(report)


def folder_tool_setup(latency=0.01):
    """Environment plus a lock for a trivially repeatable read-only tool."""
    env = WorldState((), latency=latency)
    locks = LockTable()
    lock_from_call(locks, env, "outlook__list_mail_folders", {})
    env.reset_gauges()
    return env, locks


def uniform_tasks(n):
    return [TaskSpec(f"t{i:03d}", "outlook__list_mail_folders", {}) for i in range(n)]


# --- with_retry -------------------------------------------------------------------


def test_retry_defeats_every_fifth_rate_limit():
    env = WorldState(
        (),
        faults=FaultSchedule([FaultRule("outlook__list_mail_folders", 5, RateLimited)]),
        latency=0.0,
    )
    policy = RetryPolicy(max_attempts=3, base_delay=0.010, backoff_factor=2.0)

    # oracle: replay the deterministic fault schedule by hand
    expected_attempts = []
    call_no = 0
    for _ in range(100):
        attempts = 0
        while True:
            call_no += 1
            attempts += 1
            if call_no % 5 != 0:
                break
        expected_attempts.append(attempts)

    actual_attempts = []
    for _ in range(100):
        _, attempts = with_retry(
            lambda: env.call("outlook__list_mail_folders", {}), policy, env.clock
        )
        actual_attempts.append(attempts)
    assert actual_attempts == expected_attempts
    assert max(actual_attempts) <= 3


def test_non_retryable_error_attempts_once():
    env = WorldState(
        (),
        faults=FaultSchedule([FaultRule("*", 1, PermissionDenied)]),
    )
    calls = []

    def call():
        calls.append(1)
        return env.call("outlook__list_mail_folders", {})

    with pytest.raises(PermissionDenied):
        with_retry(call, RetryPolicy(max_attempts=5), env.clock)
    assert len(calls) == 1


def test_exhausted_after_geometric_delays():
    env = WorldState((), faults=FaultSchedule([FaultRule("*", 1, RateLimited)]))
    policy = RetryPolicy(max_attempts=3, base_delay=0.010, backoff_factor=2.0)
    start = env.clock.now()
    with pytest.raises(Exhausted) as excinfo:
        with_retry(lambda: env.call("outlook__list_mail_folders", {}), policy, env.clock)
    assert excinfo.value.attempts == 3
    # delays 10 ms and 20 ms between the three attempts
    assert env.clock.now() - start == pytest.approx(0.030, abs=1e-6)


def test_policy_invariants():
    with pytest.raises(ValueError):
        RetryPolicy(max_attempts=0)
    with pytest.raises(ValueError):
        RetryPolicy(backoff_factor=0.5)


# --- checkpoint store ------------------------------------------------------------------


def test_mark_survives_reopen(tmp_path):
    path = tmp_path / "checkpoint.log"
    with CheckpointStore(path) as store:
        store.mark_processed("m1/a1")
    reopened = CheckpointStore(path)
    assert reopened.is_processed("m1/a1")
    assert not reopened.is_processed("m1/a2")


def test_fresh_store_is_empty(tmp_path):
    store = CheckpointStore(tmp_path / "fresh.log")
    assert not store.is_processed("anything")
    assert len(store) == 0


def test_clean_truncation_keeps_prefix(tmp_path):
    path = tmp_path / "checkpoint.log"
    with CheckpointStore(path) as store:
        for i in range(7):
            store.mark_processed(f"task-{i}")
    raw = path.read_bytes()
    third_newline = [i for i, b in enumerate(raw) if b == ord("\n")][2]
    path.write_bytes(raw[: third_newline + 1])
    reopened = CheckpointStore(path)
    assert len(reopened) == 3
    assert reopened.processed == {"task-0", "task-1", "task-2"}


def test_torn_tail_record_is_dropped(tmp_path):
    path = tmp_path / "checkpoint.log"
    path.write_text("done\t2024-12-15T00:00:00+00:00\npartial-reco", encoding="utf-8")
    store = CheckpointStore(path)
    assert store.processed == {"done"}


def test_interior_garbage_is_corruption(tmp_path):
    path = tmp_path / "checkpoint.log"
    path.write_text("no tab separator here\nok\t2024\n", encoding="utf-8")
    with pytest.raises(StoreCorrupt):
        CheckpointStore(path)


def test_task_id_charset_enforced(tmp_path):
    store = CheckpointStore(tmp_path / "c.log")
    with pytest.raises(ValueError):
        store.mark_processed("bad\tid")
    with pytest.raises(ValueError):
        store.mark_processed("bad\nid")


def test_unwritable_store_path(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("file, not a directory")
    with pytest.raises(CheckpointUnavailable):
        CheckpointStore(blocker / "checkpoint.log")


# --- run_batch ---------------------------------------------------------------------------


def test_concurrency_shrinks_virtual_wall_time():
    env1, locks1 = folder_tool_setup()
    start = env1.clock.now()
    run_batch(uniform_tasks(100), env=env1, locks=locks1, max_in_flight=1)
    sequential = env1.clock.now() - start

    env16, locks16 = folder_tool_setup()
    start = env16.clock.now()
    result = run_batch(uniform_tasks(100), env=env16, locks=locks16, max_in_flight=16)
    fanned = env16.clock.now() - start

    assert result.all_ok
    assert sequential == pytest.approx(1.0, abs=1e-4)
    assert fanned >= (100 // 16 + 1) * 0.010 - 1e-6
    assert fanned <= sequential / 2


def test_wall_time_monotone_in_fanout():
    elapsed = []
    for m in (1, 2, 4, 8, 16):
        env, locks = folder_tool_setup()
        start = env.clock.now()
        run_batch(uniform_tasks(60), env=env, locks=locks, max_in_flight=m)
        elapsed.append(env.clock.now() - start)
    assert all(a >= b - 1e-9 for a, b in zip(elapsed, elapsed[1:]))


def test_sequential_batch_preserves_input_order():
    env = build_fixture(0, latency=0.0)
    locks = LockTable()
    lock_from_call(locks, env, "outlook__get_email", {"message_id": "m01"})
    ids = [m.message_id for m in env.mailbox]
    tasks = [TaskSpec(i, "outlook__get_email", {"message_id": i}) for i in ids]
    result = run_batch(tasks, env=env, locks=locks, max_in_flight=1)
    answered = [o.value["value"][0]["message_id"] for o in result.outcomes]
    assert answered == ids


@settings(max_examples=15, deadline=None)
@given(
    m=st.integers(min_value=1, max_value=24),
    n=st.integers(min_value=1, max_value=60),
)
def test_gauge_never_exceeds_fanout_and_order_holds(m, n):
    env, locks = folder_tool_setup()
    tasks = uniform_tasks(n)
    result = run_batch(tasks, env=env, locks=locks, max_in_flight=m)
    assert env.max_in_flight_seen <= m
    assert len(result) == n
    assert result.all_ok


def test_rerun_with_checkpoint_skips_everything(tmp_path):
    env, locks = folder_tool_setup(latency=0.0)
    tasks = uniform_tasks(12)
    with CheckpointStore(tmp_path / "c.log") as store:
        first = run_batch(tasks, env=env, locks=locks, max_in_flight=4, checkpoint=store)
    assert first.count(Success) == 12
    calls_before = env.call_total()
    with CheckpointStore(tmp_path / "c.log") as store:
        second = run_batch(tasks, env=env, locks=locks, max_in_flight=4, checkpoint=store)
    assert all(isinstance(o, Skipped) for o in second.outcomes)
    assert env.call_total() == calls_before  # zero environment calls


def test_unlocked_tool_is_refused():
    env = WorldState(())
    with pytest.raises(SchemaNotLocked):
        run_batch(
            [TaskSpec("t1", "outlook__list_mail_folders", {})],
            env=env,
            locks=LockTable(),
            max_in_flight=2,
        )


def test_duplicate_task_ids_rejected():
    env, locks = folder_tool_setup()
    tasks = [TaskSpec("same", "outlook__list_mail_folders", {})] * 2
    with pytest.raises(ValueError):
        run_batch(tasks, env=env, locks=locks, max_in_flight=1)


def test_empty_batch():
    env, locks = folder_tool_setup()
    assert len(run_batch([], env=env, locks=locks, max_in_flight=3)) == 0


def test_batch_records_failures_in_place():
    env = WorldState(
        (),
        faults=FaultSchedule([FaultRule("outlook__list_mail_folders", 2, PermissionDenied)]),
    )
    locks = LockTable()
    lock_from_call(locks, env, "outlook__list_mail_folders", {})  # call #1
    result = run_batch(
        uniform_tasks(3), env=env, locks=locks, max_in_flight=1,
    )
    kinds = [type(o) for o in result.outcomes]
    assert kinds == [Failed, Success, Failed]
    assert isinstance(result.outcomes[0].error, PermissionDenied)


def test_crash_midway_then_resume_is_exactly_once(tmp_path):
    env, locks = folder_tool_setup(latency=0.0)
    tasks = uniform_tasks(7)
    path = tmp_path / "c.log"
    store = CrashingStore(path, crash_after=3)
    with pytest.raises(SimulatedCrash):
        run_batch(tasks, env=env, locks=locks, max_in_flight=1, checkpoint=store)
    store.close()
    with CheckpointStore(path) as resumed:
        assert len(resumed) == 3
        result = run_batch(tasks, env=env, locks=locks, max_in_flight=1, checkpoint=resumed)
    assert result.count(Skipped) == 3
    assert result.count(Success) == 4


# --- create_if_absent ---------------------------------------------------------------------


def test_create_twice_reports_existing():
    env = WorldState(())
    first = create_if_absent(env, "Email Attachments December/Acme")
    second = create_if_absent(env, "Email Attachments December/Acme")
    assert not first.existed
    assert second.existed
    assert second.path == "Email Attachments December/Acme"
    assert env.drive_snapshot() == (
        ("Email Attachments December", "folder", None),
        ("Email Attachments December/Acme", "folder", None),
    )


def test_create_on_fresh_drive():
    env = WorldState(())
    assert not create_if_absent(env, "Reports").existed


def test_permission_fault_propagates():
    env = WorldState(
        (),
        faults=FaultSchedule([FaultRule("onedrive__create_folder", 1, PermissionDenied)]),
    )
    with pytest.raises(PermissionDenied):
        create_if_absent(env, "Reports")


def test_empty_path_rejected():
    with pytest.raises(ValueError):
        create_if_absent(WorldState(()), "///")
