from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from counselsim.backends import MockBackend
from counselsim.domain import (
    Demographics,
    EventNode,
    MemoryState,
    Provenance,
    SessionDialogue,
    SessionSummary,
    StressEventGraph,
    StudentProfile,
    StudentTrajectory,
    Turn,
)
from counselsim.events import GraphConfig, build_graph
from counselsim.profiles import DEFAULT_ATTRIBUTE_SPACE, sample_attributes, generate_profile
from counselsim.simulate import SimulationConfig, run_trajectory


@pytest.fixture(scope="session")
def space():
    return DEFAULT_ATTRIBUTE_SPACE


@pytest.fixture(scope="session")
def backend():
    return MockBackend(seed=1234)


def make_profile(
    student_id: str = "S001",
    name: str = "李晓雨",
    gender: str = "女",
    age: int = 20,
    grade: str = "大三",
    major: str = "工科",
    personality: str = "偏内向，追求完美（INFJ型）；压力大时倾向于独自消化。",
    background: str = "来自南方小城的普通工薪家庭；在校内有一两位能说真心话的朋友。",
    core_conflict: str = "既害怕辜负父母的期待，又对持续内卷的学业感到力不从心。",
    stress_domain: str = "学业压力",
) -> StudentProfile:
    return StudentProfile(
        student_id=student_id,
        name=name,
        demographics=Demographics(gender=gender, age=age, grade=grade, major=major),
        personality=personality,
        background=background,
        core_conflict=core_conflict,
        stress_domain=stress_domain,
        provenance=Provenance(seed=0, backend_id="fixture", prompt_digest="d" * 8),
    )


def make_node(
    node_id: str = "E1",
    week: int = 1,
    domain: str = "学业压力",
    content: str = "期中考试失利",
    impact: str = "焦虑",
    stress: int = 4,
    caused_by: tuple[str, ...] = (),
) -> EventNode:
    return EventNode(
        id=node_id,
        week=week,
        domain=domain,
        event_content=content,
        psychological_impact=impact,
        stress_level=stress,
        caused_by=caused_by,
    )


def make_graph(n: int = 12, student_id: str = "S001", semester_weeks: int = 16) -> StressEventGraph:
    """Hand-built valid chain graph: weeks spread 1..semester, caused_by
    pointing at the previous node."""
    nodes = []
    for k in range(n):
        week = min(semester_weeks, 1 + (k * semester_weeks) // n)
        nodes.append(
            make_node(
                node_id=f"E{k + 1}",
                week=week,
                domain=("学业压力", "人际关系", "职业发展", "家庭与经济", "身心健康")[k % 5],
                content=f"第{week}周的压力事件{k + 1}",
                stress=min(10, 2 + (7 * k) // max(1, n - 1)),
                caused_by=(f"E{k}",) if k > 0 else (),
            )
        )
    return StressEventGraph.from_nodes(student_id, nodes, semester_weeks=semester_weeks)


def make_session(session_index: int, event_id: str, rounds: int = 2) -> SessionDialogue:
    turns = []
    for r in range(rounds):
        turns.append(Turn(index=2 * r + 1, role="student", text=f"第{session_index}次第{r + 1}轮：我最近压力很大。"))
        turns.append(Turn(index=2 * r + 2, role="counselor", text=f"听起来第{r + 1}轮确实不容易，能多说说吗？"))
    return SessionDialogue(session_index=session_index, event_id=event_id, rounds=rounds, turns=tuple(turns))


def make_summary(session_index: int, event_id: str) -> SessionSummary:
    return SessionSummary(
        session_index=session_index,
        event_id=event_id,
        stress_event=f"第{session_index}次会谈的压力事件",
        dominant_emotion="以焦虑为主",
        core_conflict_status="仍在持续",
        counseling_focus="情绪的接纳与命名",
        unresolved_issues=f"第{session_index}次遗留的担忧尚未化解",
    )


def make_trajectory(n_sessions: int = 3, n_events: int = 12) -> StudentTrajectory:
    profile = make_profile()
    graph = make_graph(n_events)
    sessions = tuple(make_session(t, graph.nodes[t - 1].id) for t in range(1, n_sessions + 1))
    memory = MemoryState(
        summaries=tuple(make_summary(t, graph.nodes[t - 1].id) for t in range(1, n_sessions + 1))
    )
    return StudentTrajectory(profile=profile, graph=graph, sessions=sessions, memory=memory)


def mock_trajectory(student_id: str, seed: int, rounds: tuple[int, int] = (4, 8)):
    """Full mock-generated trajectory plus its prompt records and sim config."""
    backend = MockBackend(seed=seed)
    space = DEFAULT_ATTRIBUTE_SPACE
    attrs = sample_attributes(space, 1, seed=seed)[0]
    profile, _ = generate_profile(attrs, space, backend, student_id, seed=seed)
    graph, _ = build_graph(
        profile,
        backend,
        GraphConfig(),
        seed=seed + 1,
        domains=space.stress_domains,
        domain_examples=space.domain_descriptions,
    )
    config = SimulationConfig(rounds_min=rounds[0], rounds_max=rounds[1], seed=seed + 2)
    trajectory, records = run_trajectory(profile, graph, backend, config)
    return trajectory, records, config


@pytest.fixture(scope="session")
def mock_corpus():
    """Ten distinct mock trajectories, generated once per test session."""
    out = []
    for i in range(10):
        out.append(mock_trajectory(f"S{i + 1:03d}", seed=1000 + 17 * i))
    return out
