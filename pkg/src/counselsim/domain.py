"""Shared domain types, serialization, and structural validators.

Everything downstream (generation, simulation, QC, analytics, benchmarks)
works on the types defined here. Instances are frozen after construction
so they can be shared freely between concurrent workers; all validators
are pure functions that return findings instead of raising.

Canonical on-disk encoding is UTF-8 JSON, one trajectory per directory
(see storage.py for the layout).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable

if TYPE_CHECKING:
    from .profiles import AttributeSpace

ROLE_STUDENT = "student"
ROLE_COUNSELOR = "counselor"

EVENT_ID_PATTERN = re.compile(r"^E[1-9][0-9]*$")

# Plausibility band for generated ages, inclusive.
DEFAULT_AGE_MIN = 17
DEFAULT_AGE_MAX = 30

PROFILE_DIMENSIONS = ("demographics", "personality", "background", "core_conflict")


def event_id_index(event_id: str) -> int | None:
    """Numeric index of a well-formed event id (``E7`` -> 7), else None."""
    match = EVENT_ID_PATTERN.match(event_id)
    return int(event_id[1:]) if match else None


def _sort_key(node: "EventNode") -> tuple[int, int, str]:
    idx = event_id_index(node.id)
    # Malformed ids sort after well-formed ones within a week; the id string
    # is the final tie-break so ordering is always total.
    return (node.week, idx if idx is not None else 10**9, node.id)


# ---------------------------------------------------------------------------
# Profile
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Demographics:
    gender: str
    age: int
    grade: str
    major: str

    def rendered(self) -> str:
        """Single-line text form, used as one of the four profile dimensions."""
        return f"{self.gender}，{self.age}岁，{self.grade}，{self.major}"

    def to_dict(self) -> dict[str, Any]:
        return {"gender": self.gender, "age": self.age, "grade": self.grade, "major": self.major}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Demographics":
        return cls(
            gender=str(data["gender"]),
            age=int(data["age"]),
            grade=str(data["grade"]),
            major=str(data["major"]),
        )


@dataclass(frozen=True)
class Provenance:
    seed: int
    backend_id: str
    prompt_digest: str

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "backend_id": self.backend_id, "prompt_digest": self.prompt_digest}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Provenance":
        return cls(
            seed=int(data["seed"]),
            backend_id=str(data["backend_id"]),
            prompt_digest=str(data["prompt_digest"]),
        )


@dataclass(frozen=True)
class StudentProfile:
    """Stable per-student prior: who the student is and what they struggle with.

    The four narrative dimensions are the rendered demographics, the
    personality text (traits plus stress-coping mechanism), the family and
    social support background, and the single-sentence core conflict.
    """

    student_id: str
    name: str
    demographics: Demographics
    personality: str
    background: str
    core_conflict: str
    stress_domain: str
    provenance: Provenance

    def dimension_texts(self) -> dict[str, str]:
        return {
            "demographics": self.demographics.rendered(),
            "personality": self.personality,
            "background": self.background,
            "core_conflict": self.core_conflict,
        }

    def concatenated_text(self) -> str:
        return "\n".join(self.dimension_texts().values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "student_id": self.student_id,
            "name": self.name,
            "demographics": self.demographics.to_dict(),
            "personality": self.personality,
            "background": self.background,
            "core_conflict": self.core_conflict,
            "stress_domain": self.stress_domain,
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StudentProfile":
        return cls(
            student_id=str(data["student_id"]),
            name=str(data["name"]),
            demographics=Demographics.from_dict(data["demographics"]),
            personality=str(data["personality"]),
            background=str(data["background"]),
            core_conflict=str(data["core_conflict"]),
            stress_domain=str(data["stress_domain"]),
            provenance=Provenance.from_dict(data["provenance"]),
        )


# ---------------------------------------------------------------------------
# Event graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventNode:
    """One campus stress event: what happened, when, and what it did."""

    id: str
    week: int
    domain: str
    event_content: str
    psychological_impact: str
    stress_level: int
    caused_by: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "week": self.week,
            "domain": self.domain,
            "event_content": self.event_content,
            "psychological_impact": self.psychological_impact,
            "stress_level": self.stress_level,
            "caused_by": list(self.caused_by),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EventNode":
        return cls(
            id=str(data["id"]),
            week=int(data["week"]),
            domain=str(data["domain"]),
            event_content=str(data["event_content"]),
            psychological_impact=str(data["psychological_impact"]),
            stress_level=int(data["stress_level"]),
            caused_by=tuple(str(c) for c in data.get("caused_by", [])),
        )


@dataclass(frozen=True)
class StressEventGraph:
    """Semester-scoped DAG of stress events, nodes kept in (week, id) order."""

    student_id: str
    nodes: tuple[EventNode, ...]
    semester_weeks: int = 16

    @classmethod
    def from_nodes(
        cls, student_id: str, nodes: Iterable[EventNode], semester_weeks: int = 16
    ) -> "StressEventGraph":
        ordered = tuple(sorted(nodes, key=_sort_key))
        return cls(student_id=student_id, nodes=ordered, semester_weeks=semester_weeks)

    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    def find(self, event_id: str) -> EventNode | None:
        for node in self.nodes:
            if node.id == event_id:
                return node
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "student_id": self.student_id,
            "semester_weeks": self.semester_weeks,
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StressEventGraph":
        return cls.from_nodes(
            student_id=str(data["student_id"]),
            nodes=(EventNode.from_dict(n) for n in data["nodes"]),
            semester_weeks=int(data.get("semester_weeks", 16)),
        )


# ---------------------------------------------------------------------------
# Dialogue and memory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Turn:
    index: int
    role: str
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "role": self.role, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Turn":
        return cls(index=int(data["index"]), role=str(data["role"]), text=str(data["text"]))


@dataclass(frozen=True)
class SessionDialogue:
    """One counseling session: ``rounds`` student/counselor pairs in order."""

    session_index: int
    event_id: str
    rounds: int
    turns: tuple[Turn, ...]

    def student_text(self) -> str:
        return "\n".join(t.text for t in self.turns if t.role == ROLE_STUDENT)

    def counselor_text(self) -> str:
        return "\n".join(t.text for t in self.turns if t.role == ROLE_COUNSELOR)

    def full_text(self) -> str:
        return "\n".join(t.text for t in self.turns)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_index": self.session_index,
            "event_id": self.event_id,
            "rounds": self.rounds,
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SessionDialogue":
        return cls(
            session_index=int(data["session_index"]),
            event_id=str(data["event_id"]),
            rounds=int(data["rounds"]),
            turns=tuple(Turn.from_dict(t) for t in data["turns"]),
        )


SUMMARY_FIELDS = (
    "stress_event",
    "dominant_emotion",
    "core_conflict_status",
    "counseling_focus",
    "unresolved_issues",
)


@dataclass(frozen=True)
class SessionSummary:
    session_index: int
    event_id: str
    stress_event: str
    dominant_emotion: str
    core_conflict_status: str
    counseling_focus: str
    unresolved_issues: str

    def narrative_fields(self) -> dict[str, str]:
        return {name: getattr(self, name) for name in SUMMARY_FIELDS}

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"session_index": self.session_index, "event_id": self.event_id}
        data.update(self.narrative_fields())
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SessionSummary":
        return cls(
            session_index=int(data["session_index"]),
            event_id=str(data["event_id"]),
            **{name: str(data[name]) for name in SUMMARY_FIELDS},
        )


@dataclass(frozen=True)
class MemoryState:
    """Append-only sequence of session summaries; index k holds session k+1."""

    summaries: tuple[SessionSummary, ...] = ()

    def __len__(self) -> int:
        return len(self.summaries)

    def window(self, size: int) -> tuple[SessionSummary, ...]:
        """Last ``size`` summaries; ``size`` = 0 means the full memory."""
        if size <= 0 or size >= len(self.summaries):
            return self.summaries
        return self.summaries[-size:]

    def to_dict(self) -> dict[str, Any]:
        return {"summaries": [s.to_dict() for s in self.summaries]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MemoryState":
        return cls(summaries=tuple(SessionSummary.from_dict(s) for s in data["summaries"]))


@dataclass(frozen=True)
class StudentTrajectory:
    """Complete closed-loop record for one student."""

    profile: StudentProfile
    graph: StressEventGraph
    sessions: tuple[SessionDialogue, ...]
    memory: MemoryState

    def to_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile.to_dict(),
            "graph": self.graph.to_dict(),
            "sessions": [s.to_dict() for s in self.sessions],
            "memory": self.memory.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StudentTrajectory":
        return cls(
            profile=StudentProfile.from_dict(data["profile"]),
            graph=StressEventGraph.from_dict(data["graph"]),
            sessions=tuple(SessionDialogue.from_dict(s) for s in data["sessions"]),
            memory=MemoryState.from_dict(data["memory"]),
        )


# ---------------------------------------------------------------------------
# Validation reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    category: str
    location: str
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"category": self.category, "location": self.location, "detail": self.detail}


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def categories(self) -> set[str]:
        return {f.category for f in self.findings}

    def add(self, category: str, location: str, detail: str = "") -> None:
        self.findings.append(Finding(category, location, detail))

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "findings": [f.to_dict() for f in self.findings]}


def validate_profile(profile: StudentProfile, space: "AttributeSpace") -> ValidationReport:
    """Check profile invariants against the configured attribute space.

    Findings use the category codes EmptyDimension, AttributeOutOfSpace,
    and AgeImplausible; a well-formed profile yields an empty report.
    """
    report = ValidationReport()
    for dim, text in profile.dimension_texts().items():
        if not text.strip():
            report.add("EmptyDimension", dim)
    if profile.demographics.gender not in space.genders:
        report.add("AttributeOutOfSpace", "gender", profile.demographics.gender)
    if profile.demographics.grade not in space.grades:
        report.add("AttributeOutOfSpace", "grade", profile.demographics.grade)
    if profile.demographics.major not in space.majors:
        report.add("AttributeOutOfSpace", "major", profile.demographics.major)
    if profile.stress_domain not in space.stress_domains:
        report.add("AttributeOutOfSpace", "stress_domain", profile.stress_domain)
    if not (space.age_min <= profile.demographics.age <= space.age_max):
        report.add("AgeImplausible", "age", str(profile.demographics.age))
    return report


def validate_trajectory(
    traj: StudentTrajectory, min_events: int = 10, max_events: int = 15
) -> ValidationReport:
    """Structural completeness check over a whole trajectory.

    Empty report iff the graph validates, sessions and summaries pair up
    gap-free, and every cross-reference resolves. Event-count bounds are
    passed through to the graph validator (defaults match the standard
    configuration).
    """
    from .events import validate_event_graph  # local import: events.py uses domain types

    report = ValidationReport()

    for error in validate_event_graph(traj.graph, min_events=min_events, max_events=max_events):
        report.add(error.category, "graph:" + ",".join(error.offending_ids), error.detail)

    node_ids = set(traj.graph.node_ids())
    for k, session in enumerate(traj.sessions):
        loc = f"session {k + 1}"
        if session.session_index != k + 1:
            report.add("SessionIndexGap", loc, f"index {session.session_index}")
        if session.event_id not in node_ids:
            report.add("DanglingEventRef", loc, session.event_id)
        if len(session.turns) != 2 * session.rounds:
            report.add("MalformedSession", loc, f"{len(session.turns)} turns for {session.rounds} rounds")
        else:
            for i, turn in enumerate(session.turns):
                expected = ROLE_STUDENT if i % 2 == 0 else ROLE_COUNSELOR
                if turn.role != expected or turn.index != i + 1 or not turn.text.strip():
                    report.add("MalformedSession", loc, f"turn {i + 1}")
                    break

    n_sessions, n_summaries = len(traj.sessions), len(traj.memory.summaries)
    for t in range(n_summaries + 1, n_sessions + 1):
        report.add("MissingSummary", f"session {t}")
    for t in range(n_sessions + 1, n_summaries + 1):
        report.add("ExtraSummary", f"summary {t}")

    for k, summary in enumerate(traj.memory.summaries):
        loc = f"summary {k + 1}"
        if summary.session_index != k + 1:
            report.add("SummaryIndexGap", loc, f"index {summary.session_index}")
        if k < n_sessions and summary.event_id != traj.sessions[k].event_id:
            report.add("SummaryEventMismatch", loc, summary.event_id)
        for name, text in summary.narrative_fields().items():
            if not text.strip():
                report.add("EmptySummaryField", loc, name)

    return report
