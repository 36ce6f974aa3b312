import random

import pytest
from hypothesis import given, settings, strategies as st

from flowsmith import (
    FAILED,
    GROUNDED,
    SUSPECT_EMPTY,
    LoadedContext,
    LockTable,
    ShapeDescriptor,
    WorldState,
    build_fixture,
    detect_envelope,
    infer_shape,
    load_functions,
    lock_schema,
    merge_shapes,
    probe_call,
    validate_against,
)
from flowsmith.errors import (
    HeterogeneousRoot,
    KindConflict,
    LimitExceeded,
    NotGrounded,
    SchemaNotLocked,
    ToolNotLoaded,
)
from flowsmith.probe import ProbeReport, shape_of

from conftest import fifteen_day_filter, probe_list_emails


# --- shape inference -----------------------------------------------------------


def test_infer_odata_envelope_shape():
    shape = infer_shape([{"@odata.context": "meta", "value": [{"id": "m1"}]}])
    assert shape.kind == "object"
    fields = shape.fields_map
    assert fields["@odata.context"].shape.kind == "string"
    value = fields["value"].shape
    assert value.kind == "array"
    assert value.element.kind == "object"
    assert value.element.fields_map["id"].shape.kind == "string"


def test_infer_stable_required_field():
    shape = infer_shape([{"a": 1}, {"a": 2}])
    field = shape.fields_map["a"]
    assert field.shape.kind == "number"
    assert not field.optional


def test_infer_disjoint_fields_become_optional():
    samples = [{"a": 1}, {"b": "x"}]
    shape = infer_shape(samples)
    assert shape.fields_map["a"].optional
    assert shape.fields_map["b"].optional
    for sample in samples:  # oracle: the merged shape validates both inputs
        assert validate_against(shape, sample) is None


def test_infer_rejects_heterogeneous_roots():
    with pytest.raises(HeterogeneousRoot):
        infer_shape([{"a": 1}, [1, 2]])
    with pytest.raises(HeterogeneousRoot):
        infer_shape(["text", 4])


def test_infer_requires_samples():
    with pytest.raises(ValueError):
        infer_shape([])


def test_nested_kind_conflict_surfaces():
    with pytest.raises(KindConflict):
        infer_shape([{"a": 1}, {"a": "text"}])


def test_null_merges_as_nullable():
    shape = infer_shape([{"a": None}, {"a": "x"}])
    field = shape.fields_map["a"]
    assert field.shape.kind == "string"
    assert field.shape.nullable
    assert validate_against(shape, {"a": None}) is None
    assert validate_against(shape, {"a": "y"}) is None


# --- merge algebra ---------------------------------------------------------------


def test_merge_idempotent():
    shape = infer_shape([{"a": 1, "b": [{"c": True}]}])
    merged = merge_shapes(shape, shape)
    assert merged.equivalent(shape)
    assert merged.samples_seen == 2 * shape.samples_seen


def test_merge_widens_field_optionality():
    left = shape_of({"a": 1})
    right = shape_of({"a": 2, "b": 3})
    merged = merge_shapes(left, right)
    assert not merged.fields_map["a"].optional
    assert merged.fields_map["b"].optional
    for value in ({"a": 1}, {"a": 2, "b": 3}):
        assert validate_against(merged, value) is None


def test_merge_kind_conflict():
    with pytest.raises(KindConflict):
        merge_shapes(shape_of([1, 2]), shape_of({"a": 1}))


def test_empty_array_is_degenerate():
    merged = merge_shapes(shape_of([]), shape_of(["x"]))
    assert merged.element.kind == "string"
    assert validate_against(shape_of([]), ["anything", 3, {"v": 1}]) is None


_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-100, max_value=100),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.text(max_size=6),
)


def _values_from_template(template, rng):
    """Concrete value following a rough structural template."""
    kind, payload = template
    if kind == "scalar":
        return payload
    if kind == "array":
        return [_values_from_template(payload, rng) for _ in range(rng.randint(0, 3))]
    made = {}
    for name, (optional, sub) in payload.items():
        if optional and rng.random() < 0.4:
            continue
        made[name] = _values_from_template(sub, rng)
    return made


_templates = st.recursive(
    st.tuples(st.just("scalar"), _scalars),
    lambda children: st.one_of(
        st.tuples(st.just("array"), children),
        st.tuples(
            st.just("object"),
            st.dictionaries(
                st.sampled_from(["a", "b", "c", "d"]),
                st.tuples(st.booleans(), children),
                max_size=3,
            ),
        ),
    ),
    max_leaves=6,
)


@settings(max_examples=150, deadline=None)
@given(template=_templates, seed=st.integers(min_value=0, max_value=10**6))
def test_merge_soundness_over_randomized_values(template, seed):
    rng = random.Random(seed)
    samples = [_values_from_template(template, rng) for _ in range(4)]
    shape = infer_shape(samples)
    for sample in samples:
        assert validate_against(shape, sample) is None


@settings(max_examples=80, deadline=None)
@given(template=_templates, seed=st.integers(min_value=0, max_value=10**6))
def test_merge_commutes_structurally(template, seed):
    rng = random.Random(seed)
    left = shape_of(_values_from_template(template, rng))
    right = shape_of(_values_from_template(template, rng))
    assert merge_shapes(left, right).equivalent(merge_shapes(right, left))


# --- envelope detection -------------------------------------------------------------


def test_envelope_for_odata_shape():
    shape = infer_shape([{"@odata.context": "x", "value": [{"id": "m1"}]}])
    assert detect_envelope(shape) == ("value",)


def test_root_array_has_no_envelope():
    assert detect_envelope(shape_of([{"id": 1}])) is None


def test_priority_picks_value_over_other_arrays():
    shape = shape_of({"value": [{"id": 1}], "errors": ["boom"]})
    assert detect_envelope(shape) == ("value",)


def test_unique_array_field_wins_without_priority_name():
    shape = shape_of({"meta": "x", "rows": [1, 2]})
    assert detect_envelope(shape) == ("rows",)


def test_no_array_field_no_envelope():
    assert detect_envelope(shape_of({"a": 1})) is None
    assert detect_envelope(shape_of({"a": [1], "b": [2]})) is None


# --- probe_call ------------------------------------------------------------------------


def test_probe_fixture_prints_seven(world, registry, loaded_core):
    report = probe_list_emails(world, loaded_core)
    assert "Fetched 7 emails with attachments." in report.stdout_lines
    assert report.verdict == GROUNDED


def test_probe_empty_mailbox_is_suspect(registry, loaded_core):
    empty = WorldState(())
    report = probe_list_emails(empty, loaded_core)
    assert report.verdict == SUSPECT_EMPTY
    assert "Fetched 0 emails with attachments." in report.stdout_lines


def test_probe_limit_one_caps_payload(world, loaded_core):
    args = fifteen_day_filter(world, top=50)
    report = probe_call(world, loaded_core, "outlook__list_emails", args, limit=1)
    payload = report.raw_samples[0]["value"]
    # oracle: the mock itself has more matching records than the cap
    full = world.call("outlook__list_emails", fifteen_day_filter(world, top=50))
    assert len(full["value"]) > 1
    assert len(payload) == 1


def test_probe_requires_loaded_tool(world):
    with pytest.raises(ToolNotLoaded):
        probe_call(world, LoadedContext(), "outlook__list_emails", {}, limit=1)


def test_probe_rejects_bulk_limits(world, loaded_core):
    with pytest.raises(LimitExceeded):
        probe_call(
            world, loaded_core, "outlook__list_emails",
            fifteen_day_filter(world), limit=7,
        )


def test_probe_failure_verdict(world, loaded_core):
    report = probe_call(
        world,
        loaded_core,
        "outlook__download_attachment",
        {"message_id": "missing", "attachment_id": "a1"},
        limit=1,
    )
    assert report.verdict == FAILED
    assert "NotFound" in report.error


# --- locking -----------------------------------------------------------------------------


def test_lock_grounded_probe(world, loaded_core):
    table = LockTable()
    lock = lock_schema(table, probe_list_emails(world, loaded_core))
    assert lock.envelope_path == ("value",)
    assert table.require("outlook__list_emails") is lock


def test_lock_refuses_suspect_empty(registry, loaded_core):
    table = LockTable()
    report = probe_list_emails(WorldState(()), loaded_core)
    with pytest.raises(NotGrounded):
        table.lock(report)


def test_relock_merges_with_merge_oracle(world, loaded_core):
    table = LockTable()
    first = probe_list_emails(world, loaded_core, top=2)
    second = probe_list_emails(world, loaded_core, top=5)
    lock1 = table.lock(first)
    lock2 = table.lock(second)
    assert lock2.sample_count == lock1.sample_count + 1
    expected = merge_shapes(infer_shape(first.raw_samples), infer_shape(second.raw_samples))
    assert lock2.shape.equivalent(expected)


def test_lock_table_round_trips_documents(world, loaded_core):
    table = LockTable()
    table.lock(probe_list_emails(world, loaded_core))
    clone = LockTable.import_document(table.export_document())
    assert clone.names() == table.names()
    original = table.require("outlook__list_emails")
    restored = clone.require("outlook__list_emails")
    assert restored.shape.equivalent(original.shape)
    assert restored.digest() == original.digest()


def test_require_missing_lock():
    with pytest.raises(SchemaNotLocked):
        LockTable().require("outlook__list_emails")


# --- validation ---------------------------------------------------------------------------


@pytest.fixture
def outlook_lock(world, loaded_core):
    table = LockTable()
    return table.lock(probe_list_emails(world, loaded_core))


def test_valid_response_passes(world, loaded_core, outlook_lock):
    response = world.call("outlook__list_emails", fifteen_day_filter(world))
    assert validate_against(outlook_lock, response) is None


def test_bare_array_is_root_violation(outlook_lock):
    violation = validate_against(outlook_lock, [{"message_id": "m1"}])
    assert violation is not None
    assert violation.path == ()
    assert violation.expected == "object"
    assert violation.found == "array"


def test_mutated_payload_reports_element_path(world, outlook_lock):
    response = world.call("outlook__list_emails", fifteen_day_filter(world))
    response["value"][0] = "not a record"
    violation = validate_against(outlook_lock, response)
    assert violation.path == ("value", 0)
    assert violation.expected == "object"
    assert violation.found == "string"


def test_missing_required_field_reported(outlook_lock):
    violation = validate_against(outlook_lock, {"value": []})
    assert violation.path == ("@odata.context",)
    assert violation.found == "missing"


def test_probe_report_document_round_trip(world, loaded_core):
    report = probe_list_emails(world, loaded_core)
    clone = ProbeReport.from_document(report.to_document())
    assert clone == report
