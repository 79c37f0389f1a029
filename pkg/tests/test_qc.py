from __future__ import annotations

import json

import pytest

from counselsim.backends import GenerationRequest
from counselsim.domain import MemoryState, SessionDialogue, StudentTrajectory, Turn
from counselsim.qc import (
    DEFAULT_SCENARIO_TERMS,
    FAMILIES,
    qc_consistency,
    qc_diversity,
    qc_safety,
    qc_structural,
    run_qc,
)

from conftest import make_graph, make_profile, make_session, make_summary, make_trajectory, mock_trajectory
from oracles import oracle_pair_scores


# ---------------------------------------------------------------------------
# Structural family
# ---------------------------------------------------------------------------


def test_structural_clean() -> None:
    assert qc_structural(make_trajectory(12)) == []


def test_structural_missing_summary() -> None:
    traj = make_trajectory(3)
    broken = StudentTrajectory(
        profile=traj.profile, graph=traj.graph, sessions=traj.sessions,
        memory=MemoryState(summaries=traj.memory.summaries[:2]),
    )
    findings = qc_structural(broken)
    assert findings and all(f.family == "structural" for f in findings)
    assert any(f.code == "MissingSummary" for f in findings)


# ---------------------------------------------------------------------------
# Consistency family
# ---------------------------------------------------------------------------


def test_consistency_clean() -> None:
    assert qc_consistency(make_trajectory(3)) == []


def test_consistency_dangling_session_event() -> None:
    traj = make_trajectory(3)
    broken = StudentTrajectory(
        profile=traj.profile,
        graph=traj.graph,
        sessions=(traj.sessions[0], make_session(2, "E777"), traj.sessions[2]),
        memory=traj.memory,
    )
    findings = qc_consistency(broken)
    assert any(f.code == "ConsistencyBreak" for f in findings)


class _FixedScoreJudge:
    backend_id = "judge-fixed"

    def __init__(self, score: int):
        self.score = score

    def generate(self, req: GenerationRequest) -> str:
        return json.dumps({"Alignment": self.score})

    def embed(self, texts):  # pragma: no cover
        raise NotImplementedError


def test_consistency_judge_below_cutoff_flags() -> None:
    traj = make_trajectory(2)
    findings = qc_consistency(traj, backend=_FixedScoreJudge(2), cutoff=3)
    codes = [f.code for f in findings]
    assert codes.count("SemanticMisalignment") == 2


def test_consistency_judge_at_cutoff_passes() -> None:
    traj = make_trajectory(2)
    assert qc_consistency(traj, backend=_FixedScoreJudge(3), cutoff=3) == []


def test_consistency_memory_audit_integration() -> None:
    trajectory, records, config = mock_trajectory("S001", seed=777, rounds=(3, 4))
    assert qc_consistency(trajectory, prompt_records=records, sim_config=config) == []
    tampered = records[0].to_dict()
    tampered["digest"] = "f" * 64
    from counselsim.simulate import PromptRecord

    findings = qc_consistency(
        trajectory, prompt_records=[PromptRecord.from_dict(tampered)], sim_config=config
    )
    assert any(f.code == "MemoryCausalityBreak" for f in findings)


# ---------------------------------------------------------------------------
# Safety family
# ---------------------------------------------------------------------------


def test_denylist_hit_on_counselor_turn() -> None:
    traj = make_trajectory(1)
    bad_turns = list(traj.sessions[0].turns)
    bad_turns[1] = Turn(index=2, role="counselor", text="别担心，我给你开点药就好。")
    session = SessionDialogue(session_index=1, event_id=traj.sessions[0].event_id, rounds=2, turns=tuple(bad_turns))
    broken = StudentTrajectory(profile=traj.profile, graph=traj.graph, sessions=(session,), memory=MemoryState(summaries=traj.memory.summaries[:1]))
    findings = qc_safety(broken, denylist=("我给你开点药",), scenario_terms=DEFAULT_SCENARIO_TERMS)
    assert [f.code for f in findings] == ["DenylistHit"]
    assert findings[0].family == "safety"


def test_scenario_terms_present_no_flag() -> None:
    traj = make_trajectory(2)
    turns = list(traj.sessions[0].turns)
    turns[0] = Turn(index=1, role="student", text="宿舍太吵，考试前导师又催进度。")
    session = SessionDialogue(session_index=1, event_id=traj.sessions[0].event_id, rounds=2, turns=tuple(turns))
    mentioned = StudentTrajectory(
        profile=traj.profile, graph=traj.graph, sessions=(session, traj.sessions[1]), memory=traj.memory
    )
    assert qc_safety(mentioned, denylist=(), scenario_terms=("宿舍", "考试", "导师")) == []


def test_off_scenario_flagged() -> None:
    traj = make_trajectory(1)
    findings = qc_safety(traj, denylist=(), scenario_terms=("完全不会出现的词",))
    assert [f.code for f in findings] == ["OffScenario"]


def test_empty_denylist_no_hits() -> None:
    traj = make_trajectory(2)
    findings = qc_safety(traj, denylist=(), scenario_terms=DEFAULT_SCENARIO_TERMS)
    assert all(f.code != "DenylistHit" for f in findings)


# ---------------------------------------------------------------------------
# Diversity family
# ---------------------------------------------------------------------------


def test_duplicate_trajectory_rejected() -> None:
    base = make_trajectory(3)
    dup = StudentTrajectory(
        profile=make_profile(student_id="S999"),
        graph=base.graph,
        sessions=base.sessions,
        memory=base.memory,
    )
    rejected = qc_diversity([base, dup], theta_profile=0.9, theta_dialogue=0.9)
    assert set(rejected) == {"S999"}


def test_first_occurrence_always_kept() -> None:
    base = make_trajectory(3)
    dups = [
        StudentTrajectory(
            profile=make_profile(student_id=f"S99{i}"), graph=base.graph,
            sessions=base.sessions, memory=base.memory,
        )
        for i in range(2)
    ]
    rejected = qc_diversity([base] + dups, theta_profile=0.5, theta_dialogue=0.5)
    assert base.profile.student_id not in rejected
    assert set(rejected) == {"S990", "S991"}


def test_distinct_mock_trajectories_survive_high_threshold() -> None:
    corpus = [mock_trajectory(f"S{i:03d}", seed=31 * i + 7)[0] for i in range(1, 4)]
    profile_scores = oracle_pair_scores([t.profile.concatenated_text() for t in corpus])
    dialogue_scores = oracle_pair_scores(["\n".join(s.full_text() for s in t.sessions) for t in corpus])
    assert all(s < 0.95 for s in profile_scores + dialogue_scores)
    assert qc_diversity(corpus, theta_profile=0.95, theta_dialogue=0.95) == {}


def test_threshold_one_rejects_only_exact_duplicates() -> None:
    base = make_trajectory(2)
    near = StudentTrajectory(
        profile=make_profile(student_id="S002", core_conflict="几乎一样但不是完全一样的冲突。"),
        graph=base.graph,
        sessions=base.sessions,
        memory=base.memory,
    )
    exact = StudentTrajectory(
        profile=make_profile(student_id="S003"), graph=base.graph, sessions=base.sessions, memory=base.memory
    )
    rejected = qc_diversity([base, near, exact], theta_profile=1.0, theta_dialogue=1.0)
    assert "S003" in rejected  # identical profile text
    assert "S002" in rejected  # identical dialogue text (sessions shared)
    # near-duplicate profile alone would survive a 1.0 profile threshold
    varied_sessions = (make_session(1, base.graph.nodes[0].id, rounds=3),)
    near_only_profile = StudentTrajectory(
        profile=near.profile,
        graph=base.graph,
        sessions=varied_sessions,
        memory=MemoryState(summaries=(make_summary(1, base.graph.nodes[0].id),)),
    )
    assert qc_diversity([base, near_only_profile], theta_profile=1.0, theta_dialogue=1.0) == {}


def test_threshold_validation() -> None:
    with pytest.raises(ValueError):
        qc_diversity([make_trajectory(1)], theta_profile=0.0, theta_dialogue=0.5)


# ---------------------------------------------------------------------------
# Corpus driver
# ---------------------------------------------------------------------------


def test_run_qc_families_and_determinism() -> None:
    corpus = [mock_trajectory(f"S{i:03d}", seed=151 * i)[0] for i in range(1, 4)]
    reports_a = run_qc(corpus)
    reports_b = run_qc(corpus)
    assert {sid: r.to_dict() for sid, r in reports_a.items()} == {
        sid: r.to_dict() for sid, r in reports_b.items()
    }
    for report in reports_a.values():
        assert report.verdict == "pass"
        for finding in report.findings:
            assert finding.family in FAMILIES


def test_run_qc_rejects_structural_break() -> None:
    good = make_trajectory(3)
    broken = StudentTrajectory(
        profile=make_profile(student_id="S002", core_conflict="另一个人的烦恼，完全不同。"),
        graph=make_graph(12, student_id="S002"),
        sessions=good.sessions,
        memory=MemoryState(summaries=good.memory.summaries[:2]),
    )
    reports = run_qc([good, broken])
    assert reports["S001"].verdict == "pass"
    assert reports["S002"].verdict == "reject"
    assert any(f.family == "structural" for f in reports["S002"].findings)
