"""Temporal stress event graph generation, parsing, and validation.

The validator reports every violation it can attribute cleanly, one error
per root defect: edges inside a causal cycle are reported once as the
cycle rather than additionally as temporal violations, and edges whose
endpoints cannot be resolved (dangling, duplicated, or malformed ids) are
excluded from the temporal check. This keeps single-defect graphs mapped
to single error categories.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .domain import EVENT_ID_PATTERN, EventNode, StressEventGraph, StudentProfile, event_id_index
from .errors import GenerationExhausted, ParseError
from .rng import derive_int
from .textutil import extract_json_payload

if TYPE_CHECKING:
    from .backends import Backend, GenerationRequest

logger = logging.getLogger(__name__)

ERROR_CATEGORIES = (
    "WeekOutOfRange",
    "StressOutOfRange",
    "EventCountOutOfRange",
    "DanglingCause",
    "SelfCause",
    "CausalCycle",
    "TemporalViolation",
    "DuplicateId",
    "BadIdPattern",
)

DEFAULT_MIN_EVENTS = 10
DEFAULT_MAX_EVENTS = 15


@dataclass(frozen=True)
class GraphValidationError:
    category: str
    offending_ids: tuple[str, ...]
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"category": self.category, "offending_ids": list(self.offending_ids), "detail": self.detail}


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

EVENT_SYSTEM_PROMPT = "You are a campus life simulator."

EVENT_PROMPT_TEMPLATE = """Based on the provided [Student Profile], please generate a temporal stress event graph for a semester ({weeks} weeks) as a JSON list.
[Student Profile]:
{persona}
[Required Event Domains]:
{domain_lines}
[Output Requirements]:
1. Output a JSON list containing {min_events}-{max_events} key events.
2. Each event must include the following fields:
   - "id": event ID (e.g., "E1", "E2")
   - "week": occurrence week (1-{weeks}, integer)
   - "domain": event domain (select from the above five domains)
   - "event_content": specific description of the event (first-person or third-person is acceptable; include concrete details)
   - "psychological_impact": description of psychological impact (e.g., "anxiety," "self-doubt")
   - "stress_level": stress value (1-10, integer)
   - "caused_by": [list of previous event IDs] (construct a causal chain; if none, use an empty list)
3. The events must reflect the [Core Conflict] in the profile.
4. Events should be logically coherent, and stress should gradually accumulate or erupt as the semester progresses.
5. Return the JSON list directly and do not include Markdown formatting marks."""

_DEFAULT_DOMAIN_EXAMPLES = {
    "学业压力": "e.g., failing a course, exams, papers",
    "人际关系": "e.g., dormitory conflicts, isolation, romantic relationship issues",
    "职业发展": "e.g., internship, job search, uncertainty about postgraduate entrance exams",
    "家庭与经济": "e.g., insufficient living expenses, family changes",
    "身心健康": "e.g., insomnia, eating problems, anxiety attacks",
}


def render_persona(profile: StudentProfile) -> str:
    """Profile block passed to the event generator.

    Deliberately limited to name, basic background, family and social
    background, and the core conflict; the full personality text stays out
    to keep the generation context focused.
    """
    return (
        f"姓名：{profile.name}\n"
        f"基本背景：{profile.demographics.rendered()}\n"
        f"家庭与社会支持：{profile.background}\n"
        f"核心心理冲突：{profile.core_conflict}"
    )


def render_event_prompt(
    profile: StudentProfile,
    weeks: int = 16,
    min_events: int = DEFAULT_MIN_EVENTS,
    max_events: int = DEFAULT_MAX_EVENTS,
    domains: tuple[str, ...] | None = None,
    domain_examples: dict[str, str] | None = None,
    seed: int = 0,
    temperature: float = 0.9,
    max_length: int = 4096,
) -> "GenerationRequest":
    from .backends import GenerationRequest

    domain_list = domains or tuple(_DEFAULT_DOMAIN_EXAMPLES)
    examples = domain_examples or _DEFAULT_DOMAIN_EXAMPLES
    domain_lines = "\n".join(
        f"{i + 1}. {d} - {examples.get(d, 'e.g., common campus stressors')}"
        for i, d in enumerate(domain_list)
    )
    user_prompt = EVENT_PROMPT_TEMPLATE.format(
        weeks=weeks,
        persona=render_persona(profile),
        domain_lines=domain_lines,
        min_events=min_events,
        max_events=max_events,
    )
    return GenerationRequest(
        system_prompt=EVENT_SYSTEM_PROMPT,
        user_prompt=user_prompt,
        temperature=temperature,
        seed=seed,
        max_length=max_length,
        kind_tag="event_graph",
    )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_NODE_FIELDS = ("id", "week", "domain", "event_content", "psychological_impact", "stress_level")


def _as_int(value: Any, label: str) -> int:
    if isinstance(value, bool):
        raise ParseError(f"non-integer {label}: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().lstrip("-").isdigit():
        return int(value.strip())
    raise ParseError(f"non-integer {label}: {value!r}")


def parse_event_graph(raw: str, student_id: str, semester_weeks: int = 16) -> StressEventGraph:
    """Tolerant parse of a generator reply into a sorted event graph.

    Accepts either a bare JSON list or an object with an ``events`` field,
    with or without surrounding code fences. Nodes are sorted by
    (week, id index); structural problems beyond field shape are left to
    validate_event_graph.
    """
    try:
        data = json.loads(extract_json_payload(raw))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"event graph reply is not valid JSON: {exc}") from None
    if isinstance(data, dict):
        data = data.get("events")
    if not isinstance(data, list):
        raise ParseError("event graph reply must be a JSON list or an object with an 'events' field")

    nodes = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ParseError(f"event {i} is not a JSON object")
        for name in _NODE_FIELDS:
            if name not in item or item[name] in (None, ""):
                raise ParseError(f"event {i} missing {name}")
        caused_by = item.get("caused_by", [])
        if not isinstance(caused_by, list):
            raise ParseError(f"event {i} caused_by must be a list")
        nodes.append(
            EventNode(
                id=str(item["id"]),
                week=_as_int(item["week"], "week"),
                domain=str(item["domain"]),
                event_content=str(item["event_content"]),
                psychological_impact=str(item["psychological_impact"]),
                stress_level=_as_int(item["stress_level"], "stress_level"),
                caused_by=tuple(str(c) for c in caused_by),
            )
        )
    return StressEventGraph.from_nodes(student_id, nodes, semester_weeks=semester_weeks)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_event_graph(
    graph: StressEventGraph,
    min_events: int = DEFAULT_MIN_EVENTS,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> list[GraphValidationError]:
    """Exhaustive structural validation; empty list iff the graph is clean."""
    errors: list[GraphValidationError] = []
    nodes = graph.nodes

    if not (min_events <= len(nodes) <= max_events):
        errors.append(
            GraphValidationError(
                "EventCountOutOfRange", (), f"{len(nodes)} events, expected {min_events}-{max_events}"
            )
        )

    by_id: dict[str, list[EventNode]] = {}
    for node in nodes:
        by_id.setdefault(node.id, []).append(node)
    ambiguous = {nid for nid, group in by_id.items() if len(group) > 1}
    malformed = {n.id for n in nodes if not EVENT_ID_PATTERN.match(n.id)}

    for nid in sorted(ambiguous):
        errors.append(GraphValidationError("DuplicateId", (nid,), f"{len(by_id[nid])} nodes share id"))
    for nid in sorted(malformed):
        errors.append(GraphValidationError("BadIdPattern", (nid,), "expected E<positive integer>"))

    for node in nodes:
        if not (1 <= node.week <= graph.semester_weeks):
            errors.append(
                GraphValidationError(
                    "WeekOutOfRange", (node.id,), f"week {node.week} outside 1-{graph.semester_weeks}"
                )
            )
        if not (1 <= node.stress_level <= 10):
            errors.append(
                GraphValidationError("StressOutOfRange", (node.id,), f"stress_level {node.stress_level}")
            )
        seen: set[str] = set()
        for cause in node.caused_by:
            if cause == node.id:
                errors.append(GraphValidationError("SelfCause", (node.id,)))
            elif cause in seen:
                errors.append(
                    GraphValidationError("DuplicateId", (cause,), f"repeated in caused_by of {node.id}")
                )
            elif cause not in by_id:
                errors.append(
                    GraphValidationError("DanglingCause", (node.id, cause), f"{cause} does not exist")
                )
            seen.add(cause)

    # Cycle detection over resolvable, non-self, unambiguous edges.
    adjacency: dict[str, list[str]] = {n.id: [] for n in nodes}
    for node in nodes:
        if node.id in ambiguous:
            continue
        for cause in node.caused_by:
            if cause != node.id and cause in by_id and cause not in ambiguous:
                adjacency[cause].append(node.id)
    cyclic_ids = _cycle_members(adjacency)
    if cyclic_ids:
        for component in cyclic_ids:
            errors.append(GraphValidationError("CausalCycle", tuple(sorted(component))))
    in_cycle = set().union(*cyclic_ids) if cyclic_ids else set()

    # Temporal rule on the remaining well-formed edges: cause strictly earlier
    # in (week, id index) order. Tie-break needs both id indexes.
    for node in nodes:
        if node.id in ambiguous:
            continue
        for cause in node.caused_by:
            if cause == node.id or cause not in by_id or cause in ambiguous:
                continue
            if cause in in_cycle and node.id in in_cycle:
                continue
            cause_node = by_id[cause][0]
            if cause_node.week > node.week:
                errors.append(
                    GraphValidationError(
                        "TemporalViolation",
                        (cause, node.id),
                        f"{cause} (week {cause_node.week}) after {node.id} (week {node.week})",
                    )
                )
            elif cause_node.week == node.week:
                ci, ni = event_id_index(cause), event_id_index(node.id)
                if ci is not None and ni is not None and ci >= ni:
                    errors.append(
                        GraphValidationError(
                            "TemporalViolation", (cause, node.id), f"same week, {cause} not before {node.id}"
                        )
                    )
    return errors


def _cycle_members(adjacency: dict[str, list[str]]) -> list[set[str]]:
    """Strongly connected components of size > 1 (iterative Tarjan)."""
    index: dict[str, int] = {}
    lowlink: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    components: list[set[str]] = []

    for root in adjacency:
        if root in index:
            continue
        work: list[tuple[str, int]] = [(root, 0)]
        while work:
            node, child_i = work.pop()
            if child_i == 0:
                index[node] = lowlink[node] = counter[0]
                counter[0] += 1
                stack.append(node)
                on_stack.add(node)
            recurse = False
            children = adjacency[node]
            for i in range(child_i, len(children)):
                child = children[i]
                if child not in index:
                    work.append((node, i + 1))
                    work.append((child, 0))
                    recurse = True
                    break
                if child in on_stack:
                    lowlink[node] = min(lowlink[node], index[child])
            if recurse:
                continue
            if lowlink[node] == index[node]:
                component = set()
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.add(member)
                    if member == node:
                        break
                if len(component) > 1:
                    components.append(component)
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
    return components


def stress_trend(graph: StressEventGraph) -> float:
    """Rank correlation between week and stress level, as a diagnostic.

    A positive sign indicates stress accumulating across the semester. The
    value is logged by build_graph and never enforced.
    """
    weeks = [float(n.week) for n in graph.nodes]
    stress = [float(n.stress_level) for n in graph.nodes]
    if len(weeks) < 2:
        return 0.0
    rw, rs = _avg_ranks(weeks), _avg_ranks(stress)
    mean_w = sum(rw) / len(rw)
    mean_s = sum(rs) / len(rs)
    num = sum((a - mean_w) * (b - mean_s) for a, b in zip(rw, rs))
    den = math.sqrt(sum((a - mean_w) ** 2 for a in rw) * sum((b - mean_s) ** 2 for b in rs))
    return num / den if den else 0.0


def _avg_ranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# Generation loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphConfig:
    min_events: int = DEFAULT_MIN_EVENTS
    max_events: int = DEFAULT_MAX_EVENTS
    semester_weeks: int = 16
    attempt_budget: int = 3

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GraphConfig":
        return cls(**{f: data[f] for f in cls.__dataclass_fields__ if f in data})


def build_graph(
    profile: StudentProfile,
    backend: "Backend",
    config: GraphConfig,
    seed: int,
    domains: tuple[str, ...] | None = None,
    domain_examples: dict[str, str] | None = None,
    plausibility_judge: "Backend | None" = None,
    plausibility_cutoff: float = 3.0,
) -> tuple[StressEventGraph, str]:
    """Render/generate/parse/validate loop with regeneration on failure.

    Mechanical validation always runs; when a plausibility judge is
    supplied (off by default), graphs scoring below the cutoff on the 0-5
    scale are also regenerated. Returns the clean graph and the prompt
    digest of the successful attempt; raises GenerationExhausted once the
    budget is spent.
    """
    failures: list[str] = []
    for attempt in range(config.attempt_budget):
        request = render_event_prompt(
            profile,
            weeks=config.semester_weeks,
            min_events=config.min_events,
            max_events=config.max_events,
            domains=domains,
            domain_examples=domain_examples,
            seed=derive_int(seed, "event_graph", attempt),
        )
        raw = backend.generate(request)
        try:
            graph = parse_event_graph(raw, profile.student_id, semester_weeks=config.semester_weeks)
        except ParseError as exc:
            failures.append(str(exc))
            logger.warning("graph parse failed for %s (attempt %d): %s", profile.student_id, attempt + 1, exc)
            continue
        errors = validate_event_graph(graph, min_events=config.min_events, max_events=config.max_events)
        if errors:
            failures.append("; ".join(e.category for e in errors))
            logger.warning(
                "graph invalid for %s (attempt %d): %s",
                profile.student_id,
                attempt + 1,
                failures[-1],
            )
            continue
        if plausibility_judge is not None:
            score = judge_graph_plausibility(profile, graph, plausibility_judge)
            if score < plausibility_cutoff:
                failures.append(f"plausibility {score:g} < {plausibility_cutoff:g}")
                logger.warning("graph implausible for %s (attempt %d): %s", profile.student_id, attempt + 1, failures[-1])
                continue
        logger.info("graph for %s: %d events, stress trend %+.2f", profile.student_id, len(graph.nodes), stress_trend(graph))
        return graph, request.digest()
    raise GenerationExhausted(
        f"event graph generation failed for {profile.student_id}: {' | '.join(failures)}"
    )


def judge_graph_plausibility(
    profile: StudentProfile, graph: StressEventGraph, judge: "Backend"
) -> float:
    """Ask a judge backend how plausible the event development is (0-5)."""
    from .backends import GenerationRequest

    chain = "\n".join(
        f"{n.id} 第{n.week}周 [{n.domain}] {n.event_content}（{n.psychological_impact}，压力{n.stress_level}）"
        for n in graph.nodes
    )
    request = GenerationRequest(
        system_prompt="You are a strict rater of synthetic campus stress-event timelines.",
        user_prompt=(
            "Rate how developmentally plausible and psychologically continuous this semester "
            "event chain is for the given student.\n"
            f"[Student Profile]\n{render_persona(profile)}\n"
            f"[Event Chain]\n{chain}\n"
            'Return a JSON object exactly of the form {"Plausibility": <0-5>}.'
        ),
        temperature=0.0,
        seed=derive_int("plausibility", profile.student_id),
        max_length=128,
        kind_tag="judge",
    )
    raw = judge.generate(request)
    try:
        data = json.loads(raw[raw.find("{") : raw.rfind("}") + 1])
        return float(data["Plausibility"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"plausibility judge reply unusable: {exc}") from None
