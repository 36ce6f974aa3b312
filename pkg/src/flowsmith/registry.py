"""Tool catalog indexing and the discovery meta-tools.

A planner never receives the full catalog. It lists app names, issues
semantic searches (``search_functions``), and injects only the schemas it
needs (``load_functions``) into a byte-budgeted context. Ranking is plain
TF-IDF cosine over lowercased alphanumeric tokens of ``name + description``:
deterministic, dependency-free, and adequate for catalogs up to ~10k tools.
``refine_search`` wraps the search in a broadening loop driven by a fixed
synonym table, recording every query it issues.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import (
    ContextBudgetExceeded,
    DuplicateName,
    EmptyDescription,
    UnknownApp,
    UnknownFunction,
)

NAME_SEPARATOR = "__"
PARAM_KINDS = ("string", "integer", "boolean", "object", "array")
DEFAULT_K = 5
DEFAULT_CONTEXT_BUDGET = 16384
SNIPPET_LENGTH = 120

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Round r of the refine loop appends the first r-1 synonyms of each query
# token. Shipped table; deliberately small and static.
SYNONYMS: Mapping[str, tuple[str, ...]] = {
    "fetch": ("list", "get"),
    "emails": ("messages", "mail"),
    "get": ("fetch", "read"),
    "list": ("enumerate", "show"),
    "download": ("get", "export"),
    "create": ("make", "add"),
    "upload": ("put", "store"),
    "folder": ("directory", "collection"),
    "file": ("document", "item"),
    "delete": ("remove", "erase"),
    "search": ("find", "lookup"),
}


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str
    required: bool = False
    description: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValueError("parameter name must be non-empty")
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")

    def to_document(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "required": self.required,
            "description": self.description,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "ParameterSpec":
        return cls(
            name=doc["name"],
            kind=doc["kind"],
            required=bool(doc.get("required", False)),
            description=doc.get("description", ""),
        )


@dataclass(frozen=True)
class ToolSchema:
    """Identity, description and parameter declarations of one capability."""

    app_id: str
    name: str
    description: str
    params: tuple[ParameterSpec, ...] = ()
    returns_hint: str | None = None

    def __post_init__(self):
        if not self.app_id:
            raise ValueError("app_id must be non-empty")
        if not self.name.startswith(self.app_id + NAME_SEPARATOR):
            raise ValueError(
                f"tool name {self.name!r} must start with "
                f"{self.app_id + NAME_SEPARATOR!r}"
            )
        object.__setattr__(self, "params", tuple(self.params))

    def to_document(self) -> dict[str, Any]:
        return {
            "app_id": self.app_id,
            "name": self.name,
            "description": self.description,
            "params": [p.to_document() for p in self.params],
            "returns_hint": self.returns_hint,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "ToolSchema":
        return cls(
            app_id=doc["app_id"],
            name=doc["name"],
            description=doc["description"],
            params=tuple(ParameterSpec.from_document(p) for p in doc.get("params", [])),
            returns_hint=doc.get("returns_hint"),
        )

    def serialized_size(self) -> int:
        doc = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return len(doc.encode("utf-8"))


@dataclass(frozen=True)
class SearchRequest:
    query: str
    app_id: str | None = None
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not tokenize(self.query):
            raise ValueError("query must contain at least one token")

    def to_document(self) -> dict[str, Any]:
        return {"query": self.query, "app_id": self.app_id, "k": self.k}


@dataclass(frozen=True)
class SearchResult:
    name: str
    score: float
    snippet: str

    def to_document(self) -> dict[str, Any]:
        return {"name": self.name, "score": self.score, "snippet": self.snippet}

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "SearchResult":
        return cls(name=doc["name"], score=float(doc["score"]), snippet=doc["snippet"])


@dataclass(frozen=True)
class LoadedContext:
    """Names whose schemas occupy the active context, with byte accounting."""

    loaded: tuple[str, ...] = ()
    schema_bytes: int = 0
    budget_bytes: int = DEFAULT_CONTEXT_BUDGET

    def __contains__(self, name: str) -> bool:
        return name in self.loaded


class Registry:
    """Immutable search index over a validated tool catalog."""

    def __init__(self, schemas: Iterable[ToolSchema]):
        ordered = sorted(schemas, key=lambda s: s.name)
        self._schemas: dict[str, ToolSchema] = {}
        for schema in ordered:
            if schema.name in self._schemas:
                raise DuplicateName(schema.name)
            if not schema.description.strip():
                raise EmptyDescription(schema.name)
            self._schemas[schema.name] = schema
        self._apps = tuple(sorted({s.app_id for s in ordered}))
        self._doc_tf: dict[str, dict[str, int]] = {
            s.name: _term_counts(tokenize(s.name + " " + s.description))
            for s in ordered
        }
        df: dict[str, int] = {}
        for counts in self._doc_tf.values():
            for token in counts:
                df[token] = df.get(token, 0) + 1
        n = len(ordered)
        self._idf = {t: math.log((1 + n) / (1 + d)) + 1.0 for t, d in df.items()}
        self._default_idf = math.log(1 + n) + 1.0 if n else 1.0
        self._doc_norm = {
            name: _norm({t: c * self._idf[t] for t, c in counts.items()})
            for name, counts in self._doc_tf.items()
        }

    def __len__(self) -> int:
        return len(self._schemas)

    def __contains__(self, name: str) -> bool:
        return name in self._schemas

    @property
    def apps(self) -> tuple[str, ...]:
        return self._apps

    def names(self) -> tuple[str, ...]:
        return tuple(self._schemas)

    def get(self, name: str) -> ToolSchema:
        try:
            return self._schemas[name]
        except KeyError:
            raise UnknownFunction(name) from None

    def score(self, query: str, name: str) -> float:
        """Cosine similarity of one catalog entry against a query."""
        weights = self._query_weights(query)
        return self._cosine(weights, _norm(weights), name)

    def search_one(self, request: SearchRequest) -> list[SearchResult]:
        if request.app_id is not None and request.app_id not in self._apps:
            raise UnknownApp(request.app_id)
        weights = self._query_weights(request.query)
        qnorm = _norm(weights)
        scored: list[tuple[float, str]] = []
        for name, schema in self._schemas.items():
            if request.app_id is not None and schema.app_id != request.app_id:
                continue
            s = self._cosine(weights, qnorm, name)
            if s > 0.0:
                scored.append((s, name))
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        return [
            SearchResult(name, score, self._schemas[name].description[:SNIPPET_LENGTH])
            for score, name in scored[: request.k]
        ]

    def _query_weights(self, query: str) -> dict[str, float]:
        counts = _term_counts(tokenize(query))
        return {
            t: c * self._idf.get(t, self._default_idf) for t, c in counts.items()
        }

    def _cosine(self, weights: dict[str, float], qnorm: float, name: str) -> float:
        counts = self._doc_tf[name]
        dot = 0.0
        for token in sorted(weights):
            if token in counts:
                dot += weights[token] * counts[token] * self._idf[token]
        if dot == 0.0 or qnorm == 0.0:
            return 0.0
        raw = dot / (qnorm * self._doc_norm[name])
        return min(1.0, max(0.0, raw))


def _term_counts(tokens: Iterable[str]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for token in tokens:
        counts[token] = counts.get(token, 0) + 1
    return counts


def _norm(weights: Mapping[str, float]) -> float:
    return math.sqrt(sum(weights[t] ** 2 for t in sorted(weights)))


# --- operations --------------------------------------------------------------


def index_catalog(schemas: Iterable[ToolSchema]) -> Registry:
    """Validate and index a catalog; search results are order-independent."""
    return Registry(schemas)


def list_apps(registry: Registry) -> list[str]:
    """Sorted distinct app ids; no function names or schemas leak."""
    return list(registry.apps)


def search_functions(
    registry: Registry, requests: Sequence[SearchRequest]
) -> list[tuple[SearchRequest, list[SearchResult]]]:
    """Answer a batch of scoped semantic searches independently."""
    return [(req, registry.search_one(req)) for req in requests]


def load_functions(
    registry: Registry, context: LoadedContext, names: Sequence[str]
) -> LoadedContext:
    """Cumulatively inject schemas into the context; re-loads are no-ops."""
    fresh: list[str] = []
    for name in names:
        registry.get(name)  # raises UnknownFunction
        if name not in context.loaded and name not in fresh:
            fresh.append(name)
    added = sum(registry.get(n).serialized_size() for n in fresh)
    total = context.schema_bytes + added
    if total > context.budget_bytes:
        raise ContextBudgetExceeded(total, context.budget_bytes)
    return replace(
        context, loaded=context.loaded + tuple(fresh), schema_bytes=total
    )


# --- the broadening search loop ----------------------------------------------


@dataclass(frozen=True)
class CapabilityQuery:
    """One desired capability, optionally scoped to an app."""

    text: str
    app_id: str | None = None


@dataclass(frozen=True)
class SearchRound:
    round_no: int
    query: str
    results: tuple[SearchResult, ...]


@dataclass(frozen=True)
class CapabilityCoverage:
    capability: str
    app_id: str | None
    resolved: bool
    matched: str | None
    winning_query: str | None
    rounds: tuple[SearchRound, ...]

    @property
    def queries(self) -> tuple[str, ...]:
        return tuple(r.query for r in self.rounds)

    @property
    def winning_results(self) -> tuple[SearchResult, ...]:
        for r in self.rounds:
            if r.results:
                return r.results
        return ()


@dataclass(frozen=True)
class CoverageReport:
    entries: tuple[CapabilityCoverage, ...]
    budget: int

    @property
    def all_resolved(self) -> bool:
        return all(e.resolved for e in self.entries)

    @property
    def queries_issued(self) -> tuple[str, ...]:
        return tuple(q for e in self.entries for q in e.queries)

    def entry(self, capability: str) -> CapabilityCoverage:
        for e in self.entries:
            if e.capability == capability:
                return e
        raise KeyError(capability)


def broaden_query(
    text: str, round_no: int, synonyms: Mapping[str, tuple[str, ...]] = SYNONYMS
) -> str:
    """Original tokens plus the first ``round_no - 1`` synonyms of each."""
    tokens = tokenize(text)
    extras: list[str] = []
    for token in tokens:
        for syn in synonyms.get(token, ())[: round_no - 1]:
            if syn not in tokens and syn not in extras:
                extras.append(syn)
    return " ".join(tokens + extras)


def refine_search(
    registry: Registry,
    goal_capabilities: Sequence[CapabilityQuery | str],
    budget: int,
    *,
    k: int = DEFAULT_K,
    synonyms: Mapping[str, tuple[str, ...]] = SYNONYMS,
    broadener: Callable[[str, int], str] | None = None,
) -> CoverageReport:
    """Search, evaluate, and re-query unresolved capabilities with broadened
    terms until each is matched or the round budget runs out.

    ``broadener(text, round_no)`` overrides the synonym-table broadening;
    a planner may supply its own query table this way.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1 round")
    caps = [
        c if isinstance(c, CapabilityQuery) else CapabilityQuery(c)
        for c in goal_capabilities
    ]
    if not caps:
        raise ValueError("at least one capability is required")
    if broadener is None:
        broadener = lambda text, round_no: broaden_query(text, round_no, synonyms)

    rounds: dict[int, list[SearchRound]] = {i: [] for i in range(len(caps))}
    matched: dict[int, tuple[str, str, int]] = {}
    for round_no in range(1, budget + 1):
        unresolved = [i for i in range(len(caps)) if i not in matched]
        if not unresolved:
            break
        requests = [
            SearchRequest(broadener(caps[i].text, round_no), caps[i].app_id, k)
            for i in unresolved
        ]
        for i, (request, results) in zip(
            unresolved, search_functions(registry, requests)
        ):
            rounds[i].append(SearchRound(round_no, request.query, tuple(results)))
            if results:
                matched[i] = (results[0].name, request.query, round_no)

    entries = []
    for i, cap in enumerate(caps):
        hit = matched.get(i)
        entries.append(
            CapabilityCoverage(
                capability=cap.text,
                app_id=cap.app_id,
                resolved=hit is not None,
                matched=hit[0] if hit else None,
                winning_query=hit[1] if hit else None,
                rounds=tuple(rounds[i]),
            )
        )
    return CoverageReport(entries=tuple(entries), budget=budget)
