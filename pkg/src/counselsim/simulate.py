"""Cross-session counseling simulation.

Sessions are scheduled along the event graph; each one runs an alternating
student/counselor round loop conditioned on the profile, the current
event, the accumulated memory, and the in-session history, then gets
compressed into a structured summary that is appended to memory for the
following sessions.

All prompt rendering is pure, so recorded prompt digests can be
re-derived from a finished trajectory; audit_memory_causality uses that to
prove no session ever saw a summary from its own future.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .domain import (
    ROLE_COUNSELOR,
    ROLE_STUDENT,
    EventNode,
    MemoryState,
    SessionDialogue,
    SessionSummary,
    StressEventGraph,
    StudentProfile,
    StudentTrajectory,
    SUMMARY_FIELDS,
    Turn,
)
from .errors import EmptyUtterance, GenerationExhausted, ParseError, SequenceGap, TransportError
from .rng import derive_int, derive_rng
from .textutil import extract_json_payload

if TYPE_CHECKING:
    from .backends import Backend, GenerationRequest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationConfig:
    rounds_min: int = 4
    rounds_max: int = 8
    memory_window: int = 0  # summaries injected into prompts; 0 = all
    attempt_budget: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not (1 <= self.rounds_min <= self.rounds_max):
            raise ValueError("need 1 <= rounds_min <= rounds_max")
        if self.memory_window < 0:
            raise ValueError("memory_window must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimulationConfig":
        return cls(**{f: data[f] for f in cls.__dataclass_fields__ if f in data})


@dataclass(frozen=True)
class PromptRecord:
    """Provenance entry for one generation call inside a trajectory."""

    kind: str
    session_index: int
    round_index: int  # 0 for summaries
    attempt: int
    digest: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "session_index": self.session_index,
            "round_index": self.round_index,
            "attempt": self.attempt,
            "digest": self.digest,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PromptRecord":
        return cls(
            kind=str(data["kind"]),
            session_index=int(data["session_index"]),
            round_index=int(data["round_index"]),
            attempt=int(data["attempt"]),
            digest=str(data["digest"]),
        )


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------


def schedule_sessions(
    graph: StressEventGraph, policy: str = "one_per_event", min_stress: int = 7
) -> list[str]:
    """Ordered event ids to hold sessions for.

    The default policy holds one session per event in sorted graph order;
    ``high_stress`` keeps only events at or above ``min_stress``.
    """
    if policy == "one_per_event":
        return list(graph.node_ids())
    if policy == "high_stress":
        return [n.id for n in graph.nodes if n.stress_level >= min_stress]
    raise ValueError(f"unknown schedule policy {policy!r}")


# ---------------------------------------------------------------------------
# Prompt rendering (pure; reused by the causality audit)
# ---------------------------------------------------------------------------

STUDENT_SYSTEM_PROMPT = (
    "你正在扮演一名前来校园心理咨询的大学生。请完全代入档案中的身份、性格与处境，"
    "以第一人称、口语化的中文表达当下的困扰与感受，每次发言一到三句话，不要跳出角色。"
)

COUNSELOR_SYSTEM_PROMPT = (
    "你正在扮演一名校园心理咨询师。回应需要体现共情、澄清、情绪探索、阶段性总结与适度引导，"
    "聚焦当前压力事件，并在合适的时候回顾历史记忆以保持跨次连续性。"
    "保持专业边界，用温和、稳定的中文表达。"
)

_MEMORY_LINE_RE = re.compile(r"^- 第(\d+)次（", re.MULTILINE)


def render_profile_block(profile: StudentProfile) -> str:
    return (
        f"姓名：{profile.name}\n"
        f"基本背景：{profile.demographics.rendered()}\n"
        f"性格特点：{profile.personality}\n"
        f"家庭与社会支持：{profile.background}\n"
        f"核心心理冲突：{profile.core_conflict}"
    )


def render_event_block(event: EventNode) -> str:
    return (
        f"{event.id}（第{event.week}周，{event.domain}）："
        f"{event.event_content}"
        f"（心理影响：{event.psychological_impact}，压力{event.stress_level}/10）"
    )


def render_memory_block(memory: MemoryState, window: int) -> str:
    items = memory.window(window)
    if not items:
        return "（无历史记忆）"
    lines = []
    for s in items:
        lines.append(
            f"- 第{s.session_index}次（{s.event_id}）：压力事件：{s.stress_event}；"
            f"主导情绪：{s.dominant_emotion}；核心冲突状态：{s.core_conflict_status}；"
            f"咨询重点：{s.counseling_focus}；未解决问题：{s.unresolved_issues}"
        )
    return "\n".join(lines)


def render_history_block(history: list[Turn] | tuple[Turn, ...]) -> str:
    if not history:
        return "（本次会话刚开始）"
    label = {ROLE_STUDENT: "学生", ROLE_COUNSELOR: "咨询师"}
    return "\n".join(f"{label[t.role]}：{t.text}" for t in history)


def render_student_prompt(
    profile: StudentProfile,
    event: EventNode,
    memory: MemoryState,
    history: list[Turn] | tuple[Turn, ...],
    round_index: int,
    rounds_total: int,
    memory_window: int = 0,
    seed: int | None = None,
    temperature: float = 0.9,
    max_length: int = 512,
) -> "GenerationRequest":
    from .backends import GenerationRequest

    user_prompt = (
        f"[学生档案]\n{render_profile_block(profile)}\n"
        f"[当前事件]\n{render_event_block(event)}\n"
        f"[历史记忆]\n{render_memory_block(memory, memory_window)}\n"
        f"[本次会话记录]\n{render_history_block(history)}\n"
        f"[轮次]\n{round_index} / {rounds_total}\n"
        f"请以学生身份说出第{round_index}轮的求助表达。"
    )
    return GenerationRequest(
        system_prompt=STUDENT_SYSTEM_PROMPT,
        user_prompt=user_prompt,
        temperature=temperature,
        seed=seed,
        max_length=max_length,
        kind_tag="student_turn",
    )


def render_counselor_prompt(
    profile: StudentProfile,
    event: EventNode,
    memory: MemoryState,
    history: list[Turn] | tuple[Turn, ...],
    student_utterance: str,
    round_index: int,
    rounds_total: int,
    memory_window: int = 0,
    seed: int | None = None,
    temperature: float = 0.9,
    max_length: int = 1024,
) -> "GenerationRequest":
    from .backends import GenerationRequest

    user_prompt = (
        f"[学生档案]\n{render_profile_block(profile)}\n"
        f"[当前事件]\n{render_event_block(event)}\n"
        f"[历史记忆]\n{render_memory_block(memory, memory_window)}\n"
        f"[本次会话记录]\n{render_history_block(history)}\n"
        f"[学生刚刚说]\n{student_utterance}\n"
        f"[轮次]\n{round_index} / {rounds_total}\n"
        f"请以咨询师身份回应学生的这句话。"
    )
    return GenerationRequest(
        system_prompt=COUNSELOR_SYSTEM_PROMPT,
        user_prompt=user_prompt,
        temperature=temperature,
        seed=seed,
        max_length=max_length,
        kind_tag="counselor_turn",
    )


SUMMARY_SYSTEM_PROMPT = (
    "你是一名负责整理咨询记录的助手。请将本次会谈压缩为结构化小结，输出 JSON，"
    "不要添加任何解释。"
)


def render_summary_prompt(
    dialogue: SessionDialogue,
    event: EventNode,
    memory: MemoryState,
    memory_window: int = 0,
    seed: int | None = None,
    temperature: float = 0.3,
    max_length: int = 1024,
) -> "GenerationRequest":
    from .backends import GenerationRequest

    user_prompt = (
        f"[当前事件]\n{render_event_block(event)}\n"
        f"[历史记忆]\n{render_memory_block(memory, memory_window)}\n"
        f"[本次会话记录]\n{render_history_block(dialogue.turns)}\n"
        "请输出本次会谈的结构化小结，JSON 字段："
        '{"stress_event": string, "dominant_emotion": string, "core_conflict_status": string, '
        '"counseling_focus": string, "unresolved_issues": string}'
    )
    return GenerationRequest(
        system_prompt=SUMMARY_SYSTEM_PROMPT,
        user_prompt=user_prompt,
        temperature=temperature,
        seed=seed,
        max_length=max_length,
        kind_tag="summary",
    )


# ---------------------------------------------------------------------------
# Turn and session operations
# ---------------------------------------------------------------------------


def student_turn(
    profile: StudentProfile,
    event: EventNode,
    memory: MemoryState,
    history: list[Turn],
    backend: "Backend",
    round_index: int,
    rounds_total: int,
    memory_window: int = 0,
    seed: int | None = None,
) -> tuple[Turn, str]:
    """Generate the student's move for the given round.

    The history must contain equal student/counselor counts. Returns the
    turn plus the prompt digest for provenance.
    """
    request = render_student_prompt(
        profile, event, memory, history, round_index, rounds_total,
        memory_window=memory_window, seed=seed,
    )
    text = backend.generate(request).strip()
    if not text:
        raise EmptyUtterance(f"blank student turn in round {round_index}")
    return Turn(index=len(history) + 1, role=ROLE_STUDENT, text=text), request.digest()


def counselor_turn(
    profile: StudentProfile,
    event: EventNode,
    memory: MemoryState,
    history: list[Turn],
    student_utterance: str,
    backend: "Backend",
    round_index: int,
    rounds_total: int,
    memory_window: int = 0,
    seed: int | None = None,
) -> tuple[Turn, str]:
    """Generate the counselor's reply to the student's latest utterance."""
    request = render_counselor_prompt(
        profile, event, memory, history, student_utterance, round_index, rounds_total,
        memory_window=memory_window, seed=seed,
    )
    text = backend.generate(request).strip()
    if not text:
        raise EmptyUtterance(f"blank counselor turn in round {round_index}")
    # history is the pre-round prefix; the student's utterance occupies the
    # next slot, so the counselor turn lands two positions after the prefix.
    return Turn(index=len(history) + 2, role=ROLE_COUNSELOR, text=text), request.digest()


def simulate_session(
    profile: StudentProfile,
    event: EventNode,
    memory: MemoryState,
    backend: "Backend",
    config: SimulationConfig,
    session_index: int,
) -> tuple[SessionDialogue, list[PromptRecord]]:
    """Run one full session of alternating rounds.

    The round count is drawn uniformly from the configured range with the
    trajectory seed. A failed turn aborts the whole attempt (keeping the
    history well-formed) and the session is retried within the budget.
    """
    if len(memory.summaries) != session_index - 1:
        raise SequenceGap(
            f"session {session_index} needs {session_index - 1} summaries, memory has {len(memory.summaries)}"
        )
    last_error: Exception | None = None
    for attempt in range(config.attempt_budget):
        rounds = derive_rng(config.seed, profile.student_id, "rounds", session_index, attempt).randint(
            config.rounds_min, config.rounds_max
        )
        history: list[Turn] = []
        records: list[PromptRecord] = []
        try:
            for r in range(1, rounds + 1):
                turn, digest = student_turn(
                    profile, event, memory, history, backend, r, rounds,
                    memory_window=config.memory_window,
                    seed=derive_int(config.seed, profile.student_id, session_index, r, "student", attempt),
                )
                records.append(PromptRecord("student_turn", session_index, r, attempt, digest))
                history.append(turn)
                turn, digest = counselor_turn(
                    profile, event, memory, history[:-1], history[-1].text, backend, r, rounds,
                    memory_window=config.memory_window,
                    seed=derive_int(config.seed, profile.student_id, session_index, r, "counselor", attempt),
                )
                records.append(PromptRecord("counselor_turn", session_index, r, attempt, digest))
                history.append(turn)
        except (EmptyUtterance, TransportError) as exc:
            last_error = exc
            logger.warning(
                "session %d attempt %d aborted for %s: %s",
                session_index, attempt + 1, profile.student_id, exc,
            )
            continue
        dialogue = SessionDialogue(
            session_index=session_index, event_id=event.id, rounds=rounds, turns=tuple(history)
        )
        return dialogue, records
    raise GenerationExhausted(
        f"session {session_index} failed for {profile.student_id}: {last_error}"
    )


def summarize_session(
    dialogue: SessionDialogue,
    event: EventNode,
    memory: MemoryState,
    backend: "Backend",
    config: SimulationConfig,
    student_id: str = "",
) -> tuple[SessionSummary, PromptRecord]:
    """Compress a finished session into a structured summary.

    The summarizer sees the same windowed memory view the agents saw.
    Malformed replies are retried within the attempt budget.
    """
    last_error: Exception | None = None
    for attempt in range(config.attempt_budget):
        request = render_summary_prompt(
            dialogue, event, memory,
            memory_window=config.memory_window,
            seed=derive_int(config.seed, student_id, dialogue.session_index, "summary", attempt),
        )
        raw = backend.generate(request)
        try:
            data = json.loads(extract_json_payload(raw))
            if not isinstance(data, dict):
                raise ParseError("summary reply must be a JSON object")
            fields = {}
            for name in SUMMARY_FIELDS:
                value = str(data.get(name, "")).strip()
                if not value:
                    raise ParseError(f"summary missing {name}")
                fields[name] = value
        except (json.JSONDecodeError, ParseError) as exc:
            last_error = exc if isinstance(exc, ParseError) else ParseError(str(exc))
            logger.warning(
                "summary parse failed for session %d (attempt %d): %s",
                dialogue.session_index, attempt + 1, last_error,
            )
            continue
        summary = SessionSummary(
            session_index=dialogue.session_index, event_id=dialogue.event_id, **fields
        )
        return summary, PromptRecord("summary", dialogue.session_index, 0, attempt, request.digest())
    raise GenerationExhausted(f"summary failed for session {dialogue.session_index}: {last_error}")


def update_memory(memory: MemoryState, summary: SessionSummary) -> MemoryState:
    """Append a summary; memory is immutable and strictly sequential."""
    if summary.session_index != len(memory.summaries) + 1:
        raise SequenceGap(
            f"summary index {summary.session_index} after {len(memory.summaries)} summaries"
        )
    return MemoryState(summaries=memory.summaries + (summary,))


def run_trajectory(
    profile: StudentProfile,
    graph: StressEventGraph,
    backend: "Backend",
    config: SimulationConfig,
    policy: str = "one_per_event",
) -> tuple[StudentTrajectory, list[PromptRecord]]:
    """Full closed loop for one student: sessions in schedule order, each
    summarized and folded into memory before the next begins."""
    memory = MemoryState()
    sessions: list[SessionDialogue] = []
    records: list[PromptRecord] = []
    for t, event_id in enumerate(schedule_sessions(graph, policy), start=1):
        event = graph.find(event_id)
        assert event is not None  # schedule comes from the graph itself
        dialogue, session_records = simulate_session(profile, event, memory, backend, config, t)
        records.extend(session_records)
        summary, summary_record = summarize_session(
            dialogue, event, memory, backend, config, student_id=profile.student_id
        )
        records.append(summary_record)
        memory = update_memory(memory, summary)
        sessions.append(dialogue)
    return StudentTrajectory(profile=profile, graph=graph, sessions=tuple(sessions), memory=memory), records


# ---------------------------------------------------------------------------
# Memory-causality audit
# ---------------------------------------------------------------------------


def audit_memory_causality(
    traj: StudentTrajectory, records: list[PromptRecord], config: SimulationConfig
) -> list[str]:
    """Re-derive every recorded prompt and verify causal memory context.

    Because rendering is pure, rebuilding the prompt for session t from the
    finished trajectory (profile, event, summaries strictly below t, and
    the recorded turn prefix) must reproduce the recorded digest exactly;
    any mismatch, or any memory line referencing session >= t, is reported.
    Returns a list of problems (empty means the audit passed).
    """
    problems: list[str] = []
    sessions = {s.session_index: s for s in traj.sessions}
    for rec in records:
        session = sessions.get(rec.session_index)
        if session is None:
            problems.append(f"record for unknown session {rec.session_index}")
            continue
        t = rec.session_index
        event = traj.graph.find(session.event_id)
        if event is None:
            problems.append(f"session {t} event {session.event_id} missing from graph")
            continue
        memory_view = MemoryState(summaries=traj.memory.summaries[: t - 1])
        if len(memory_view.summaries) != t - 1:
            problems.append(f"session {t}: memory had {len(memory_view.summaries)} summaries, expected {t - 1}")
        if rec.kind == "student_turn":
            history = list(session.turns[: 2 * (rec.round_index - 1)])
            request = render_student_prompt(
                traj.profile, event, memory_view, history, rec.round_index, session.rounds,
                memory_window=config.memory_window,
                seed=derive_int(config.seed, traj.profile.student_id, t, rec.round_index, "student", rec.attempt),
            )
        elif rec.kind == "counselor_turn":
            history = list(session.turns[: 2 * rec.round_index - 1])
            request = render_counselor_prompt(
                traj.profile, event, memory_view, history[:-1], history[-1].text,
                rec.round_index, session.rounds,
                memory_window=config.memory_window,
                seed=derive_int(config.seed, traj.profile.student_id, t, rec.round_index, "counselor", rec.attempt),
            )
        elif rec.kind == "summary":
            request = render_summary_prompt(
                session, event, memory_view,
                memory_window=config.memory_window,
                seed=derive_int(config.seed, traj.profile.student_id, t, "summary", rec.attempt),
            )
        else:
            problems.append(f"unknown record kind {rec.kind!r}")
            continue
        if request.digest() != rec.digest:
            problems.append(f"session {t} {rec.kind} round {rec.round_index}: digest mismatch")
        for match in _MEMORY_LINE_RE.finditer(request.user_prompt):
            if int(match.group(1)) >= t:
                problems.append(
                    f"session {t} {rec.kind}: prompt references summary {match.group(1)}"
                )
    return problems
