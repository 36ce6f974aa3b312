import pytest

from flowsmith import (
    LoadedContext,
    LockTable,
    build_fixture,
    default_catalog,
    index_catalog,
    load_functions,
    probe_call,
)

CORE_TOOLS = (
    "outlook__list_emails",
    "outlook__download_attachment",
    "onedrive__create_folder",
    "onedrive__upload_file",
)


@pytest.fixture
def registry():
    return index_catalog(default_catalog())


@pytest.fixture
def world():
    return build_fixture(0)


@pytest.fixture
def loaded_core(registry):
    return load_functions(registry, LoadedContext(), CORE_TOOLS)


def fifteen_day_filter(env, top=50):
    from flowsmith.pipeline import _iso

    return {
        "filter": {
            "received_after": _iso(env.clock.now() - 15 * 86400),
            "has_attachments": True,
        },
        "top": top,
    }


def probe_list_emails(env, loaded, top=50):
    """Probe the mail listing at full page size (the sampled fetch)."""
    return probe_call(
        env,
        loaded,
        "outlook__list_emails",
        fifteen_day_filter(env, top),
        limit=top,
        max_limit=top,
        unit="emails with attachments",
    )


def locked_table_for(env, loaded):
    """Lock table covering the listing tool, built from a live probe."""
    table = LockTable()
    table.lock(probe_list_emails(env, loaded))
    return table
