from __future__ import annotations

import pytest

from counselsim.backends import GenerationRequest
from counselsim.domain import MemoryState, Turn
from counselsim.errors import EmptyUtterance, GenerationExhausted, SequenceGap
from counselsim.simulate import (
    SimulationConfig,
    audit_memory_causality,
    counselor_turn,
    render_counselor_prompt,
    render_student_prompt,
    run_trajectory,
    schedule_sessions,
    simulate_session,
    student_turn,
    summarize_session,
    update_memory,
)

from conftest import make_graph, make_node, make_profile, make_session, make_summary
from counselsim.domain import StressEventGraph, validate_trajectory


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------


def test_schedule_one_per_event() -> None:
    graph = make_graph(12)
    schedule = schedule_sessions(graph)
    assert schedule == list(graph.node_ids())
    assert len(schedule) == 12


def test_schedule_high_stress_policy() -> None:
    nodes = [make_node(f"E{k+1}", week=k + 1, stress=s) for k, s in enumerate((3, 7, 8, 5, 9, 10, 7, 2))]
    graph = StressEventGraph.from_nodes("S001", nodes)
    schedule = schedule_sessions(graph, policy="high_stress", min_stress=7)
    assert len(schedule) == 5  # five nodes at stress >= 7 in the fixture
    assert schedule == ["E2", "E3", "E5", "E6", "E7"]


def test_schedule_same_week_tie_break() -> None:
    nodes = [make_node("E10", week=4), make_node("E3", week=4), make_node("E1", week=1)]
    graph = StressEventGraph.from_nodes("S001", nodes)
    schedule = schedule_sessions(graph)
    assert schedule.index("E3") < schedule.index("E10")


def test_schedule_unknown_policy() -> None:
    with pytest.raises(ValueError):
        schedule_sessions(make_graph(12), policy="nope")


# ---------------------------------------------------------------------------
# Turn generation
# ---------------------------------------------------------------------------


def test_student_prompt_round1_contains_event_content(backend) -> None:
    profile = make_profile()
    event = make_node(content="宿舍矛盾激化")
    request = render_student_prompt(profile, event, MemoryState(), [], 1, 4)
    assert "宿舍矛盾激化" in request.user_prompt
    turn, digest = student_turn(profile, event, MemoryState(), [], backend, 1, 4)
    assert turn.role == "student" and turn.index == 1 and turn.text
    assert len(digest) == 64


class _BlankBackend:
    backend_id = "blank"

    def generate(self, req: GenerationRequest) -> str:
        return "   "

    def embed(self, texts):  # pragma: no cover
        raise NotImplementedError


def test_blank_reply_raises_empty_utterance() -> None:
    with pytest.raises(EmptyUtterance):
        student_turn(make_profile(), make_node(), MemoryState(), [], _BlankBackend(), 1, 4)


def test_counselor_prompt_memory_windowing() -> None:
    memory = MemoryState(summaries=(make_summary(1, "E1"), make_summary(2, "E2")))
    history = [Turn(index=1, role="student", text="我最近很累。")]
    full = render_counselor_prompt(
        make_profile(), make_node(), memory, [], history[0].text, 1, 4, memory_window=0
    )
    assert "第1次" in full.user_prompt and "第2次" in full.user_prompt
    windowed = render_counselor_prompt(
        make_profile(), make_node(), memory, [], history[0].text, 1, 4, memory_window=1
    )
    assert "第1次" not in windowed.user_prompt and "第2次" in windowed.user_prompt


def test_counselor_turn_index_follows_student(backend) -> None:
    profile = make_profile()
    event = make_node()
    s_turn, _ = student_turn(profile, event, MemoryState(), [], backend, 1, 4)
    c_turn, _ = counselor_turn(profile, event, MemoryState(), [], s_turn.text, backend, 1, 4)
    assert (s_turn.index, c_turn.index) == (1, 2)
    assert c_turn.role == "counselor"


def test_mock_turn_determinism(backend) -> None:
    profile = make_profile()
    event = make_node()
    a, _ = student_turn(profile, event, MemoryState(), [], backend, 1, 4, seed=9)
    b, _ = student_turn(profile, event, MemoryState(), [], backend, 1, 4, seed=9)
    assert a == b


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


def test_fixed_rounds_give_exact_turn_count(backend) -> None:
    config = SimulationConfig(rounds_min=4, rounds_max=4, seed=5)
    dialogue, records = simulate_session(make_profile(), make_node(), MemoryState(), backend, config, 1)
    assert dialogue.rounds == 4
    assert len(dialogue.turns) == 8
    assert len(records) == 8


def test_alternation_contract(backend) -> None:
    config = SimulationConfig(rounds_min=3, rounds_max=6, seed=6)
    dialogue, _ = simulate_session(make_profile(), make_node(), MemoryState(), backend, config, 1)
    roles = [t.role for t in dialogue.turns]
    assert roles == ["student", "counselor"] * dialogue.rounds
    assert [t.index for t in dialogue.turns] == list(range(1, 2 * dialogue.rounds + 1))


def test_session_requires_matching_memory(backend) -> None:
    config = SimulationConfig(seed=1)
    with pytest.raises(SequenceGap):
        simulate_session(make_profile(), make_node(), MemoryState(), backend, config, 3)


def test_session_deterministic(backend) -> None:
    config = SimulationConfig(rounds_min=4, rounds_max=8, seed=7)
    a, _ = simulate_session(make_profile(), make_node(), MemoryState(), backend, config, 1)
    b, _ = simulate_session(make_profile(), make_node(), MemoryState(), backend, config, 1)
    assert a == b


def test_summary_fields_and_linkage(backend) -> None:
    config = SimulationConfig(rounds_min=4, rounds_max=4, seed=8)
    profile = make_profile()
    event = make_node(content="连续失眠的困扰")
    dialogue, _ = simulate_session(profile, event, MemoryState(), backend, config, 1)
    summary, record = summarize_session(dialogue, event, MemoryState(), backend, config, profile.student_id)
    assert summary.session_index == dialogue.session_index
    assert summary.event_id == dialogue.event_id
    assert all(text.strip() for text in summary.narrative_fields().values())
    assert record.kind == "summary" and record.round_index == 0


class _NeverJsonBackend:
    backend_id = "never-json"

    def __init__(self):
        self.calls = 0

    def generate(self, req: GenerationRequest) -> str:
        self.calls += 1
        return "就是不输出 JSON"

    def embed(self, texts):  # pragma: no cover
        raise NotImplementedError


def test_summary_exhausts_budget() -> None:
    backend = _NeverJsonBackend()
    config = SimulationConfig(attempt_budget=3, seed=1)
    with pytest.raises(GenerationExhausted):
        summarize_session(make_session(1, "E1"), make_node(), MemoryState(), backend, config, "S001")
    assert backend.calls == 3


# ---------------------------------------------------------------------------
# Memory update
# ---------------------------------------------------------------------------


def test_update_memory_appends() -> None:
    memory = update_memory(MemoryState(), make_summary(1, "E1"))
    assert len(memory) == 1


def test_update_memory_sequence() -> None:
    memory = MemoryState()
    for t in range(1, 6):
        memory = update_memory(memory, make_summary(t, f"E{t}"))
    assert [s.session_index for s in memory.summaries] == [1, 2, 3, 4, 5]


def test_update_memory_gap_raises() -> None:
    memory = update_memory(MemoryState(), make_summary(1, "E1"))
    memory = update_memory(memory, make_summary(2, "E2"))
    with pytest.raises(SequenceGap):
        update_memory(memory, make_summary(4, "E4"))


def test_update_memory_immutable() -> None:
    original = MemoryState()
    update_memory(original, make_summary(1, "E1"))
    assert len(original) == 0


# ---------------------------------------------------------------------------
# Full trajectory
# ---------------------------------------------------------------------------


def test_run_trajectory_counts(backend) -> None:
    profile = make_profile()
    graph = make_graph(12)
    config = SimulationConfig(rounds_min=4, rounds_max=4, seed=10)
    trajectory, records = run_trajectory(profile, graph, backend, config)
    assert len(trajectory.sessions) == 12
    assert sum(len(s.turns) for s in trajectory.sessions) == 96  # 12 sessions x 8 turns
    assert len(trajectory.memory.summaries) == 12
    assert validate_trajectory(trajectory).ok


def test_run_trajectory_memory_monotone(backend) -> None:
    profile = make_profile()
    graph = make_graph(10)
    config = SimulationConfig(rounds_min=4, rounds_max=6, seed=11)
    trajectory, _ = run_trajectory(profile, graph, backend, config)
    assert [s.session_index for s in trajectory.memory.summaries] == list(range(1, 11))


def test_audit_passes_on_clean_run(backend) -> None:
    profile = make_profile()
    graph = make_graph(10)
    config = SimulationConfig(rounds_min=4, rounds_max=8, seed=12)
    trajectory, records = run_trajectory(profile, graph, backend, config)
    assert audit_memory_causality(trajectory, records, config) == []


def test_audit_detects_future_summary_leak(backend) -> None:
    profile = make_profile()
    graph = make_graph(10)
    config = SimulationConfig(rounds_min=4, rounds_max=8, seed=12)
    trajectory, records = run_trajectory(profile, graph, backend, config)
    # fake leak: claim a session-1 record was produced with a session-2 digest
    leaked = records[0].to_dict()
    leaked["digest"] = "0" * 64
    from counselsim.simulate import PromptRecord

    problems = audit_memory_causality(trajectory, [PromptRecord.from_dict(leaked)], config)
    assert problems and "digest mismatch" in problems[0]


def test_audit_windowed_memory_still_reconstructs(backend) -> None:
    profile = make_profile()
    graph = make_graph(8)
    config = SimulationConfig(rounds_min=3, rounds_max=5, memory_window=1, seed=13)
    trajectory, records = run_trajectory(profile, graph, backend, config)
    assert audit_memory_causality(trajectory, records, config) == []


def test_trajectory_deterministic(backend) -> None:
    profile = make_profile()
    graph = make_graph(10)
    config = SimulationConfig(rounds_min=4, rounds_max=8, seed=14)
    a, _ = run_trajectory(profile, graph, backend, config)
    b, _ = run_trajectory(profile, graph, backend, config)
    assert a == b
