"""Post-processing quality control over a completed corpus.

Four filter families run before export: structural completeness,
consistency, diversity, and scenario/safety screening. QC is
non-destructive; rejected trajectories are moved to a quarantine
directory together with their report, never deleted.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .analytics import cosine_matrix, exceeds_threshold, tfidf_vectors
from .domain import StudentTrajectory, validate_trajectory
from .errors import ParseError
from .rng import derive_int
from .simulate import PromptRecord, SimulationConfig, audit_memory_causality
from .textutil import extract_json_payload

if TYPE_CHECKING:
    from .backends import Backend

logger = logging.getLogger(__name__)

FAMILIES = ("structural", "consistency", "diversity", "safety")

DEFAULT_THETA_PROFILE = 0.6
DEFAULT_THETA_DIALOGUE = 0.85

# Lexical screen for inappropriate counseling moves; configuration, not an
# exhaustive clinical list.
DEFAULT_DENYLIST = (
    "我给你开点药",
    "你应该吃抗抑郁药",
    "确诊为",
    "保证治好",
    "别想太多就好了",
)

# A trajectory mentioning none of these is flagged as off the campus scenario.
DEFAULT_SCENARIO_TERMS = (
    "学校", "宿舍", "考试", "导师", "同学", "课程", "专业", "室友", "老师",
    "学业", "实习", "论文", "校园", "咨询",
)


@dataclass(frozen=True)
class QCFinding:
    family: str
    code: str
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "code": self.code, "detail": self.detail}


@dataclass
class QCReport:
    trajectory_id: str
    verdict: str = "pass"
    findings: list[QCFinding] = field(default_factory=list)

    def add(self, family: str, code: str, detail: str = "") -> None:
        assert family in FAMILIES
        self.findings.append(QCFinding(family, code, detail))
        self.verdict = "reject"

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory_id": self.trajectory_id,
            "verdict": self.verdict,
            "findings": [f.to_dict() for f in self.findings],
        }


# ---------------------------------------------------------------------------
# Per-trajectory checks
# ---------------------------------------------------------------------------


def qc_structural(traj: StudentTrajectory, min_events: int = 10, max_events: int = 15) -> list[QCFinding]:
    report = validate_trajectory(traj, min_events=min_events, max_events=max_events)
    return [QCFinding("structural", f.category, f"{f.location} {f.detail}".strip()) for f in report.findings]


def qc_consistency(
    traj: StudentTrajectory,
    backend: "Backend | None" = None,
    cutoff: float = 3.0,
    prompt_records: list[PromptRecord] | None = None,
    sim_config: SimulationConfig | None = None,
) -> list[QCFinding]:
    """Alignment checks between profile, events, memory, and dialogue.

    Rule-based checks always run; when prompt records and the simulation
    config are available the memory-causality audit runs as well, and a
    judge backend additionally scores per-session semantic alignment
    (sessions scoring below ``cutoff`` on the 0-5 scale are flagged).
    """
    findings: list[QCFinding] = []
    node_ids = set(traj.graph.node_ids())
    for session in traj.sessions:
        if session.event_id not in node_ids:
            findings.append(
                QCFinding("consistency", "ConsistencyBreak", f"session {session.session_index} event {session.event_id}")
            )
    for k, summary in enumerate(traj.memory.summaries):
        if summary.session_index != k + 1:
            findings.append(QCFinding("consistency", "ConsistencyBreak", f"summary {k + 1} misindexed"))
        if k < len(traj.sessions) and summary.event_id != traj.sessions[k].event_id:
            findings.append(QCFinding("consistency", "ConsistencyBreak", f"summary {k + 1} event mismatch"))

    if prompt_records is not None and sim_config is not None:
        for problem in audit_memory_causality(traj, prompt_records, sim_config):
            findings.append(QCFinding("consistency", "MemoryCausalityBreak", problem))

    if backend is not None:
        for session in traj.sessions:
            score = _judge_session_alignment(traj, session.session_index, backend)
            if score < cutoff:
                findings.append(
                    QCFinding(
                        "consistency",
                        "SemanticMisalignment",
                        f"session {session.session_index} scored {score:g} < {cutoff:g}",
                    )
                )
    return findings


_ALIGNMENT_DIMENSION = "Alignment"


def _judge_session_alignment(traj: StudentTrajectory, session_index: int, backend: "Backend") -> float:
    from .backends import GenerationRequest

    session = traj.sessions[session_index - 1]
    event = traj.graph.find(session.event_id)
    prompt = (
        "Rate how well this counseling session aligns with the student profile, "
        "the current stress event, and the conversation so far.\n"
        f"[Profile]\n{traj.profile.concatenated_text()}\n"
        f"[Event]\n{event.event_content if event else session.event_id}\n"
        f"[Session]\n{session.full_text()}\n"
        f'Return a JSON object exactly of the form {{"{_ALIGNMENT_DIMENSION}": <0-5>}}.'
    )
    request = GenerationRequest(
        system_prompt="You are a strict data-quality rater.",
        user_prompt=prompt,
        temperature=0.0,
        seed=derive_int("qc", traj.profile.student_id, session_index),
        max_length=128,
        kind_tag="judge",
    )
    raw = backend.generate(request)
    try:
        data = json.loads(extract_json_payload(raw))
        return float(data[_ALIGNMENT_DIMENSION])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"alignment judge reply unusable: {exc}") from None


def qc_safety(
    traj: StudentTrajectory,
    denylist: tuple[str, ...] | list[str] = DEFAULT_DENYLIST,
    scenario_terms: tuple[str, ...] | list[str] = DEFAULT_SCENARIO_TERMS,
) -> list[QCFinding]:
    """Lexical safety and scenario screening.

    Any turn matching a denylist pattern is flagged; a trajectory whose
    whole text contains none of the scenario terms is flagged as
    off-scenario. Both lists are configuration.
    """
    findings: list[QCFinding] = []
    compiled = [re.compile(p) for p in denylist]
    for session in traj.sessions:
        for turn in session.turns:
            for pattern in compiled:
                if pattern.search(turn.text):
                    findings.append(
                        QCFinding(
                            "safety",
                            "DenylistHit",
                            f"session {session.session_index} turn {turn.index} matches {pattern.pattern!r}",
                        )
                    )
    if scenario_terms:
        all_text = "\n".join(
            [traj.profile.concatenated_text()]
            + [f"{n.event_content} {n.psychological_impact}" for n in traj.graph.nodes]
            + [s.full_text() for s in traj.sessions]
        )
        if not any(term in all_text for term in scenario_terms):
            findings.append(QCFinding("safety", "OffScenario", "no scenario terms found"))
    return findings


# ---------------------------------------------------------------------------
# Corpus-level diversity
# ---------------------------------------------------------------------------


def qc_diversity(
    corpus: list[StudentTrajectory],
    theta_profile: float = DEFAULT_THETA_PROFILE,
    theta_dialogue: float = DEFAULT_THETA_DIALOGUE,
) -> dict[str, str]:
    """Greedy first-kept-wins repetition filter over the whole corpus.

    Returns {trajectory_id: reason} for rejected trajectories. A
    trajectory is rejected when its profile TF-IDF cosine or concatenated
    session-text TF-IDF cosine against any already-kept trajectory exceeds
    the respective threshold. The first occurrence in corpus order is
    always kept.
    """
    if not (0.0 < theta_profile <= 1.0 and 0.0 < theta_dialogue <= 1.0):
        raise ValueError("thresholds must be in (0, 1]")
    if len(corpus) < 2:
        return {}
    profile_docs = [t.profile.concatenated_text() for t in corpus]
    dialogue_docs = ["\n".join(s.full_text() for s in t.sessions) or "（空）" for t in corpus]
    profile_sims = cosine_matrix(tfidf_vectors(profile_docs))
    dialogue_sims = cosine_matrix(tfidf_vectors(dialogue_docs))

    rejected: dict[str, str] = {}
    kept: list[int] = []
    for i, traj in enumerate(corpus):
        reason = None
        for j in kept:
            # exact duplicates count as repetition even when idf degenerates
            if profile_docs[i] == profile_docs[j] or exceeds_threshold(profile_sims[i, j], theta_profile):
                reason = f"profile cosine {profile_sims[i, j]:.3f} > {theta_profile:g} vs {corpus[j].profile.student_id}"
                break
            if dialogue_docs[i] == dialogue_docs[j] or exceeds_threshold(dialogue_sims[i, j], theta_dialogue):
                reason = f"dialogue cosine {dialogue_sims[i, j]:.3f} > {theta_dialogue:g} vs {corpus[j].profile.student_id}"
                break
        if reason is None:
            kept.append(i)
        else:
            rejected[traj.profile.student_id] = reason
    return rejected


# ---------------------------------------------------------------------------
# Corpus QC driver
# ---------------------------------------------------------------------------


def run_qc(
    corpus: list[StudentTrajectory],
    theta_profile: float = DEFAULT_THETA_PROFILE,
    theta_dialogue: float = DEFAULT_THETA_DIALOGUE,
    denylist: tuple[str, ...] | list[str] = DEFAULT_DENYLIST,
    scenario_terms: tuple[str, ...] | list[str] = DEFAULT_SCENARIO_TERMS,
    judge_backend: "Backend | None" = None,
    judge_cutoff: float = 3.0,
    min_events: int = 10,
    max_events: int = 15,
    prompt_records: dict[str, list[PromptRecord]] | None = None,
    sim_configs: dict[str, SimulationConfig] | None = None,
) -> dict[str, QCReport]:
    """All four families over a corpus; per-trajectory checks first, then
    the corpus-level diversity pass over the survivors."""
    reports: dict[str, QCReport] = {}
    survivors: list[StudentTrajectory] = []
    for traj in corpus:
        report = QCReport(trajectory_id=traj.profile.student_id)
        for finding in qc_structural(traj, min_events=min_events, max_events=max_events):
            report.findings.append(finding)
        for finding in qc_consistency(
            traj,
            backend=judge_backend,
            cutoff=judge_cutoff,
            prompt_records=(prompt_records or {}).get(traj.profile.student_id),
            sim_config=(sim_configs or {}).get(traj.profile.student_id),
        ):
            report.findings.append(finding)
        for finding in qc_safety(traj, denylist=denylist, scenario_terms=scenario_terms):
            report.findings.append(finding)
        if report.findings:
            report.verdict = "reject"
        else:
            survivors.append(traj)
        reports[traj.profile.student_id] = report

    for student_id, reason in qc_diversity(survivors, theta_profile, theta_dialogue).items():
        reports[student_id].add("diversity", "Repetition", reason)
    return reports
