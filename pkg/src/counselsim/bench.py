"""Benchmark construction, judge scoring, and score aggregation.

Three task families are built from held-out trajectories: next counselor
response (SR), long-horizon factual recall (MR), and temporal-causal
reasoning over the event chain (TCR). MR and TCR references are extracted
mechanically from the trajectory, never generated, so they are
hallucination-free by construction.

Judge scoring uses a 0-5 scale per rubric dimension; the instance score is
the arithmetic mean over its dimensions.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from .domain import ROLE_COUNSELOR, MemoryState, StudentTrajectory
from .errors import (
    DegenerateSeries,
    LengthMismatch,
    OrphanResult,
    ParseError,
    QuotaTooLarge,
    RubricMismatch,
    ScoreOutOfRange,
)
from .rng import derive_rng
from .simulate import render_memory_block
from .textutil import extract_json_payload

if TYPE_CHECKING:
    from .backends import GenerationRequest

TASK_SR = "SR"
TASK_MR = "MR"
TASK_TCR = "TCR"

RUBRICS: dict[str, tuple[str, ...]] = {
    TASK_SR: ("Empathy", "Coherence", "Professionalism"),
    TASK_MR: ("Accuracy", "Completeness", "Temporal Consistency", "No Hallucination"),
    TASK_TCR: ("Temporal Accuracy", "Causal Coherence", "Completeness", "No Hallucination"),
}

SCORE_MIN, SCORE_MAX = 0.0, 5.0


@dataclass(frozen=True)
class BenchInstance:
    instance_id: str
    task: str
    trajectory_id: str
    input_payload: dict[str, Any]
    reference: str
    rubric: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "task": self.task,
            "trajectory_id": self.trajectory_id,
            "input_payload": self.input_payload,
            "reference": self.reference,
            "rubric": list(self.rubric),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BenchInstance":
        return cls(
            instance_id=str(data["instance_id"]),
            task=str(data["task"]),
            trajectory_id=str(data["trajectory_id"]),
            input_payload=dict(data["input_payload"]),
            reference=str(data["reference"]),
            rubric=tuple(data["rubric"]),
        )


@dataclass(frozen=True)
class JudgeResult:
    instance_id: str
    dimension_scores: dict[str, float] = field(default_factory=dict)

    @property
    def mean_score(self) -> float:
        return sum(self.dimension_scores.values()) / len(self.dimension_scores)

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "dimension_scores": dict(self.dimension_scores),
            "mean_score": self.mean_score,
        }


# ---------------------------------------------------------------------------
# Instance builders
# ---------------------------------------------------------------------------


def _history_payload(traj: StudentTrajectory) -> list[dict[str, Any]]:
    rows = []
    for session in traj.sessions:
        for turn in session.turns:
            rows.append(
                {
                    "session_index": session.session_index,
                    "turn_index": turn.index,
                    "role": turn.role,
                    "text": turn.text,
                }
            )
    return rows


def build_sr(traj: StudentTrajectory, quota: int, seed: int) -> list[BenchInstance]:
    """Next-counselor-response instances at seeded (session, round) cuts.

    The payload carries the profile, memory strictly before the session,
    and the in-session history up to and including the student's utterance
    at the cut; the reference is the counselor turn that followed.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    cut_points = [
        (session.session_index, r)
        for session in traj.sessions
        for r in range(1, session.rounds + 1)
    ]
    if quota > len(cut_points):
        raise QuotaTooLarge(f"quota {quota} exceeds {len(cut_points)} cut points")
    rng = derive_rng(seed, "sr", traj.profile.student_id)
    chosen = sorted(rng.sample(cut_points, quota))

    instances = []
    for k, (t, r) in enumerate(chosen, start=1):
        session = traj.sessions[t - 1]
        history = [turn.to_dict() for turn in session.turns[: 2 * r - 1]]
        memory_view = MemoryState(summaries=traj.memory.summaries[: t - 1])
        payload = {
            "profile": traj.profile.to_dict(),
            "memory": render_memory_block(memory_view, 0),
            "session_index": t,
            "history": history,
        }
        reference = session.turns[2 * r - 1]
        assert reference.role == ROLE_COUNSELOR
        instances.append(
            BenchInstance(
                instance_id=f"{traj.profile.student_id}-sr-{k:03d}",
                task=TASK_SR,
                trajectory_id=traj.profile.student_id,
                input_payload=payload,
                reference=reference.text,
                rubric=RUBRICS[TASK_SR],
            )
        )
    return instances


_MR_TEMPLATES = ("week", "stress", "domain", "unresolved")


def _mr_candidates(traj: StudentTrajectory) -> list[tuple[str, str, str]]:
    """Ordered (kind, question, reference) triples derivable from the record."""
    candidates = []
    for node in traj.graph.nodes:
        snippet = node.event_content[:20]
        candidates.append(("week", f"事件{node.id}（{snippet}）发生在第几周？", f"第{node.week}周"))
        candidates.append(("stress", f"事件{node.id}（{snippet}）的压力等级是多少（1-10）？", str(node.stress_level)))
        candidates.append(("domain", f"事件{node.id}（{snippet}）属于哪个压力领域？", node.domain))
    for summary in traj.memory.summaries:
        candidates.append(
            (
                "unresolved",
                f"第{summary.session_index}次咨询后遗留的未解决问题是什么？",
                summary.unresolved_issues,
            )
        )
    return candidates


def build_mr(
    traj: StudentTrajectory,
    quota: int,
    seed: int,
    question_backend: "Any | None" = None,
) -> list[BenchInstance]:
    """Factual-recall questions templated from events and summaries.

    References are extracted from the trajectory, never generated. When a
    question backend is supplied (off by default) the template question is
    rephrased for naturalness; an unusable rephrasing falls back to the
    template, and the reference is untouched either way.
    """
    if quota < 1:
        raise ValueError("quota must be >= 1")
    candidates = _mr_candidates(traj)
    if quota > len(candidates):
        raise QuotaTooLarge(f"quota {quota} exceeds {len(candidates)} candidate questions")
    rng = derive_rng(seed, "mr", traj.profile.student_id)
    chosen = rng.sample(range(len(candidates)), quota)
    chosen.sort()

    instances = []
    for k, idx in enumerate(chosen, start=1):
        kind, question, reference = candidates[idx]
        if question_backend is not None:
            question = _rephrase_question(question, question_backend)
        payload = {
            "profile": traj.profile.to_dict(),
            "history": _history_payload(traj),
            "question": question,
        }
        instances.append(
            BenchInstance(
                instance_id=f"{traj.profile.student_id}-mr-{k:03d}",
                task=TASK_MR,
                trajectory_id=traj.profile.student_id,
                input_payload=payload,
                reference=reference,
                rubric=RUBRICS[TASK_MR],
            )
        )
    return instances


def _rephrase_question(question: str, backend: "Any") -> str:
    from .backends import GenerationRequest

    request = GenerationRequest(
        system_prompt="你负责把数据集里的模板问题改写得更自然。",
        user_prompt=(
            "请把下面的问题改写成更自然的中文问法，保持询问的事实完全不变，只输出改写后的问题。\n"
            f"[原问题]\n{question}"
        ),
        temperature=0.7,
        seed=0,
        max_length=128,
        kind_tag="free",
    )
    rephrased = backend.generate(request).strip()
    # keep the verifiable anchor: a rewrite that drops the event id or comes
    # back empty is discarded in favor of the template
    anchor = re.search(r"E\d+|第\d+次", question)
    if not rephrased or (anchor and anchor.group(0) not in rephrased):
        return question
    return rephrased


def render_event_chain(traj: StudentTrajectory) -> str:
    """Week-sorted event chain with explicit predecessor lists."""
    lines = []
    for node in traj.graph.nodes:
        causes = ", ".join(node.caused_by) if node.caused_by else "none"
        lines.append(
            f"{node.id} (week {node.week}, {node.domain}): "
            f"{node.event_content} → {node.psychological_impact} [caused_by: {causes}]"
        )
    return "\n".join(lines)


def build_tcr(traj: StudentTrajectory) -> BenchInstance:
    """One trajectory-level temporal-causal reasoning instance."""
    payload = {
        "profile": traj.profile.to_dict(),
        "history": _history_payload(traj),
        "question": "请按时间顺序梳理该学生本学期的压力事件发展轨迹，并解释事件之间的因果关系。",
    }
    return BenchInstance(
        instance_id=f"{traj.profile.student_id}-tcr-001",
        task=TASK_TCR,
        trajectory_id=traj.profile.student_id,
        input_payload=payload,
        reference=render_event_chain(traj),
        rubric=RUBRICS[TASK_TCR],
    )


def build_bench(
    trajectories: list[StudentTrajectory],
    sr_quota: int = 5,
    mr_quota: int = 2,
    seed: int = 0,
    exclude: set[str] | None = None,
) -> list[BenchInstance]:
    """All three tasks over a held-out corpus, minus any excluded ids."""
    instances: list[BenchInstance] = []
    for traj in trajectories:
        instances.extend(build_sr(traj, sr_quota, seed))
        instances.extend(build_mr(traj, mr_quota, seed))
        instances.append(build_tcr(traj))
    if exclude:
        instances = [inst for inst in instances if inst.instance_id not in exclude]
    return instances


# ---------------------------------------------------------------------------
# Judge prompts and score parsing
# ---------------------------------------------------------------------------

_RUBRIC_GUIDANCE: dict[str, str] = {
    "Empathy": "whether the reply accurately receives the student's emotions and deeper meanings",
    "Coherence": "consistency with the student profile, historical trajectory, current utterance, and counseling stage",
    "Professionalism": "professional boundaries, stable expression, and risk awareness in campus counseling",
    "Accuracy": "whether recalled events, people, states, and numbers match the history",
    "Completeness": "coverage of the key points required by the task",
    "Temporal Consistency": "correct ordering of events without confusing temporal relationships",
    "No Hallucination": "absence of fabricated events, diagnoses, behaviors, or conclusions",
    "Temporal Accuracy": "whether key events are organized in correct chronological order",
    "Causal Coherence": "reasonable explanation of how events influence one another",
}


def render_judge_prompt(instance: BenchInstance, model_output: str) -> "GenerationRequest":
    """Scoring prompt: task input, model output, reference, and the rubric.

    The judge is told that surface overlap with the reference is not
    required and must reply with a JSON object mapping every rubric
    dimension to a 0-5 score.
    """
    from .backends import GenerationRequest

    rubric_lines = "\n".join(
        f"- {dim}: {_RUBRIC_GUIDANCE.get(dim, 'quality on this dimension')}" for dim in instance.rubric
    )
    skeleton = ", ".join(f'"{dim}": <0-5>' for dim in instance.rubric)
    user_prompt = (
        f"[Task]\n{instance.task}\n"
        f"[Task Input]\n{json.dumps(instance.input_payload, ensure_ascii=False, sort_keys=True)}\n"
        f"[Model Output]\n{model_output}\n"
        f"[Reference Answer]\n{instance.reference}\n"
        f"[Scoring Dimensions]\n{rubric_lines}\n"
        "Score each dimension from 0 to 5, where 5 is excellent and 0 is invalid or severely off-task. "
        "The output does not need to match the reference answer at the surface-text level; judge whether "
        "it accurately completes the task.\n"
        f"Return a JSON object exactly of the form {{{skeleton}}} and nothing else."
    )
    return GenerationRequest(
        system_prompt="You are a strict and consistent evaluator of counseling-model outputs.",
        user_prompt=user_prompt,
        temperature=0.0,
        seed=0,
        max_length=256,
        kind_tag="judge",
    )


def parse_judge_scores(raw: str, instance: BenchInstance) -> JudgeResult:
    """Validate and parse a judge reply against the instance rubric."""
    try:
        data = json.loads(extract_json_payload(raw))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"judge reply is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ParseError("judge reply must be a JSON object")
    expected = set(instance.rubric)
    got = set(data)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise RubricMismatch(f"missing={missing} extra={extra}")
    scores: dict[str, float] = {}
    for dim in instance.rubric:
        value = data[dim]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScoreOutOfRange(f"{dim} score {value!r} is not numeric")
        if not (SCORE_MIN <= float(value) <= SCORE_MAX):
            raise ScoreOutOfRange(f"{dim} score {value} outside [{SCORE_MIN:g}, {SCORE_MAX:g}]")
        scores[dim] = float(value)
    return JudgeResult(instance_id=instance.instance_id, dimension_scores=scores)


# ---------------------------------------------------------------------------
# Correlation and aggregation
# ---------------------------------------------------------------------------


def pearson(a: list[float], b: list[float]) -> float:
    """Product-moment correlation.

    Uses exact summation (math.fsum) so identity and negation inputs come
    out as exactly 1.0 and -1.0.
    """
    if len(a) != len(b) or len(a) < 2:
        raise LengthMismatch(f"need two equal-length series of >= 2 points, got {len(a)} and {len(b)}")
    mean_a = math.fsum(a) / len(a)
    mean_b = math.fsum(b) / len(b)
    da = [x - mean_a for x in a]
    db = [y - mean_b for y in b]
    var_a = math.fsum(x * x for x in da)
    var_b = math.fsum(y * y for y in db)
    if var_a == 0.0 or var_b == 0.0:
        raise DegenerateSeries("a constant series has no correlation")
    return math.fsum(x * y for x, y in zip(da, db)) / math.sqrt(var_a * var_b)


def aggregate(
    results: list[JudgeResult],
    instances: list[BenchInstance],
    human_scores: dict[str, float] | None = None,
) -> dict[str, dict[str, Any]]:
    """Per-task mean table over judge results.

    Every result must map to a known instance. When human scores are
    supplied (instance_id -> score), the per-task Pearson r between the
    auto and human series is reported alongside.
    """
    by_id = {inst.instance_id: inst for inst in instances}
    per_task: dict[str, list[tuple[str, float]]] = {TASK_SR: [], TASK_MR: [], TASK_TCR: []}
    for result in results:
        inst = by_id.get(result.instance_id)
        if inst is None:
            raise OrphanResult(f"result for unknown instance {result.instance_id}")
        per_task.setdefault(inst.task, []).append((result.instance_id, result.mean_score))

    table: dict[str, dict[str, Any]] = {}
    for task, scored in per_task.items():
        if not scored:
            table[task] = {"n": 0, "mean": None}
            continue
        entry: dict[str, Any] = {
            "n": len(scored),
            "mean": sum(s for _, s in scored) / len(scored),
        }
        if human_scores is not None:
            paired = [(auto, human_scores[iid]) for iid, auto in scored if iid in human_scores]
            if len(paired) >= 2:
                try:
                    entry["pearson_r"] = pearson([p[0] for p in paired], [p[1] for p in paired])
                except DegenerateSeries:
                    entry["pearson_r"] = None
                entry["n_paired"] = len(paired)
        table[task] = entry
    return table


def read_human_scores(path: Path) -> dict[str, float]:
    """Human scores CSV with columns instance_id, task, score."""
    scores: dict[str, float] = {}
    with path.open("r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            scores[row["instance_id"]] = float(row["score"])
    return scores
