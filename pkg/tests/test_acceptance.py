"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. The live-backend smoke (criterion 8) is network-gated behind
COUNSELSIM_LIVE_CONFIG and skips by default.
"""

from __future__ import annotations

import json
import os
import random
import time
from pathlib import Path

import pytest

from counselsim import storage
from counselsim.analytics import (
    corpus_stats,
    cosine_matrix,
    pairwise_cosine,
    tfidf_vectors,
)
from counselsim.bench import RUBRICS, BenchInstance, build_bench, parse_judge_scores, pearson
from counselsim.domain import validate_trajectory
from counselsim.errors import ParseError
from counselsim.events import ERROR_CATEGORIES, GraphConfig, build_graph, validate_event_graph
from counselsim.pipeline import PipelineConfig, run_pipeline
from counselsim.simulate import PromptRecord, audit_memory_causality

from conftest import make_profile, mock_trajectory
from mutations import mutate
from oracles import oracle_mean_median, oracle_pair_scores, oracle_pearson

import numpy as np


def _report(criterion: int, message: str) -> None:
    print(f"\n[acceptance] criterion {criterion}: PASS - {message}")


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """Timed 10-student mock pipeline run shared by criteria 1, 3, and 7."""
    root = tmp_path_factory.mktemp("acceptance") / "out"
    config = PipelineConfig.from_dict(
        {
            "seed": 20240801,
            "students": 10,
            "output_root": str(root),
            "backends": {
                "generator": {"type": "mock", "seed": 20240801},
                "judge": {"type": "mock", "seed": 20240802},
                "embedder": {"type": "mock", "seed": 20240803},
            },
            "simulation": {"rounds_min": 4, "rounds_max": 8},
            "graphs": {"min_events": 10, "max_events": 15, "semester_weeks": 16},
        }
    )
    started = time.monotonic()
    exit_code, manifest = run_pipeline(config)
    elapsed = time.monotonic() - started
    return config, exit_code, manifest, elapsed


def test_criterion_1_offline_end_to_end(pipeline_run, tmp_path) -> None:
    config, exit_code, manifest, elapsed = pipeline_run
    assert exit_code == 0
    assert elapsed < 60.0, f"pipeline took {elapsed:.1f}s"

    student_dirs = storage.list_trajectory_dirs(config.output_root / "students")
    assert len(student_dirs) == 10
    for directory in student_dirs:
        trajectory = storage.read_trajectory(directory)
        report = validate_trajectory(trajectory)
        assert report.ok, f"{directory.name}: {report.findings}"
        for session in trajectory.sessions:
            assert 4 <= session.rounds <= 8
        assert 10 <= len(trajectory.graph.nodes) <= 15
        assert trajectory.graph.semester_weeks == 16

    # same seed, fresh root: byte-identical exports
    rerun_config = PipelineConfig.from_dict(
        {
            "seed": config.seed,
            "students": 10,
            "output_root": str(tmp_path / "rerun"),
            "backends": {
                "generator": {"type": "mock", "seed": 20240801},
                "judge": {"type": "mock", "seed": 20240802},
                "embedder": {"type": "mock", "seed": 20240803},
            },
            "simulation": {"rounds_min": 4, "rounds_max": 8},
            "graphs": {"min_events": 10, "max_events": 15, "semester_weeks": 16},
        }
    )
    assert run_pipeline(rerun_config)[0] == 0
    original = (config.output_root / "dataset.jsonl").read_bytes()
    rerun = (rerun_config.output_root / "dataset.jsonl").read_bytes()
    assert original == rerun

    _report(1, f"10 students, exit 0 in {elapsed:.1f}s, all trajectories valid, re-run byte-identical")


def test_criterion_2_validator_fuzzing(backend) -> None:
    bases = []
    for i in range(12):
        profile = make_profile(student_id=f"F{i:03d}", core_conflict=f"第{i}号测试冲突，各不相同。")
        graph, _ = build_graph(profile, backend, GraphConfig(), seed=5000 + i)
        bases.append(graph)

    per_category = 120  # 9 x 120 = 1080 seeded mutations
    total = 0
    for category in ERROR_CATEGORIES:
        for k in range(per_category):
            rng = random.Random(90_000 + total)
            mutant = mutate(bases[k % len(bases)], category, rng)
            categories = {e.category for e in validate_event_graph(mutant)}
            assert categories == {category}, f"{category} mutant #{k} reported {categories}"
            total += 1
    assert total >= 1000

    false_positives = 0
    valid_checked = 0
    for i in range(60):
        profile = make_profile(student_id=f"V{i:03d}", core_conflict=f"验证用冲突{i}。")
        graph, _ = build_graph(profile, backend, GraphConfig(), seed=7000 + i)
        valid_checked += 1
        if validate_event_graph(graph):
            false_positives += 1
    assert false_positives == 0

    _report(2, f"{total} mutations across 9 categories all detected exactly; 0/{valid_checked} false positives")


def test_criterion_3_corpus_stats_arithmetic(pipeline_run) -> None:
    # synthetic fixture matching the published totals: 90,000 units,
    # 11,452,843 characters
    n_units = 90_000
    total_chars = 11_452_843
    base_len = total_chars // n_units  # 127
    remainder = total_chars - base_len * n_units
    rows = []
    for i in range(n_units):
        length = base_len + (1 if i < remainder else 0)
        rows.append(
            {
                "student_id": f"S{i % 100:03d}",
                "session_index": 1,
                "turn_index": i + 1,
                "role": "student" if i % 2 == 0 else "counselor",
                "text": "字" * length,
            }
        )
    stats = corpus_stats(rows)
    assert stats.n_units == 90_000
    assert stats.chars_total == 11_452_843
    assert round(stats.avg_per_unit) == 127
    assert stats.chars_total == stats.chars_student + stats.chars_counselor

    # invariant holds on the real pipeline run as well
    config, _, _, _ = pipeline_run
    real = corpus_stats(storage.read_jsonl(config.output_root / "dataset.jsonl"))
    assert real.chars_total == real.chars_student + real.chars_counselor

    _report(3, "90,000 units / 11,452,843 chars round to 127 per unit; character split invariant holds")


def test_criterion_4_pair_count_and_oracle_equivalence() -> None:
    docs_100 = [f"学生{i}的独特经历与困扰{i * 31 % 97}" for i in range(100)]
    stats = pairwise_cosine(tfidf_vectors(docs_100))
    assert stats.n_pairs == 4950

    rng = random.Random(441)
    chars = "学业压力宿舍矛盾考试焦虑睡眠朋友父母老师实习论文辅导员社团恋爱"
    checked = 0
    for _ in range(12):
        n = rng.randint(2, 10)
        docs = ["".join(rng.choice(chars) for _ in range(rng.randint(5, 40))) for _ in range(n)]
        got = pairwise_cosine(tfidf_vectors(docs))
        mean, median = oracle_mean_median(oracle_pair_scores(docs))
        assert abs(got.mean - mean) <= 1e-9
        assert abs(got.median - median) <= 1e-9
        checked += 1

    # property suite: symmetry, self-similarity, scale invariance
    sims = cosine_matrix(tfidf_vectors(["压力事件甲", "另一回事乙", "压力事件甲乙"]))
    assert np.allclose(sims, sims.T, atol=1e-12)
    assert np.allclose(np.diag(sims), 1.0, atol=1e-9)
    base = ["红 蓝 绿", "红 红 黄", "蓝 黄 紫"]
    tripled = [" ".join([d] * 3) for d in base]
    assert np.allclose(
        cosine_matrix(tfidf_vectors(base, "whitespace")),
        cosine_matrix(tfidf_vectors(tripled, "whitespace")),
        atol=1e-9,
    )

    _report(4, f"100 docs -> 4950 pairs; {checked} small corpora match the brute-force oracle within 1e-9")


@pytest.fixture(scope="module")
def holdout_20():
    return [mock_trajectory(f"H{i:03d}", seed=30_000 + 101 * i)[0] for i in range(20)]


def test_criterion_5_bench_shape(holdout_20) -> None:
    instances = build_bench(holdout_20, sr_quota=5, mr_quota=2, seed=77)
    counts: dict[str, int] = {}
    for inst in instances:
        counts[inst.task] = counts.get(inst.task, 0) + 1
    assert counts == {"SR": 100, "MR": 40, "TCR": 20}

    # published-table configuration: one SR instance excluded
    first_sr = next(i.instance_id for i in instances if i.task == "SR")
    excluded = build_bench(holdout_20, sr_quota=5, mr_quota=2, seed=77, exclude={first_sr})
    counts_excluded: dict[str, int] = {}
    for inst in excluded:
        counts_excluded[inst.task] = counts_excluded.get(inst.task, 0) + 1
    assert counts_excluded == {"SR": 99, "MR": 40, "TCR": 20}

    # every MR/TCR reference re-derives mechanically from its trajectory
    import re

    by_id = {t.profile.student_id: t for t in holdout_20}
    verified = 0
    for inst in instances:
        traj = by_id[inst.trajectory_id]
        if inst.task == "MR":
            q = inst.input_payload["question"]
            m = re.search(r"事件(E\d+)", q)
            if m:
                node = traj.graph.find(m.group(1))
                expected = (
                    f"第{node.week}周"
                    if "第几周" in q
                    else str(node.stress_level) if "压力等级" in q else node.domain
                )
            else:
                t_idx = int(re.search(r"第(\d+)次咨询", q).group(1))
                expected = traj.memory.summaries[t_idx - 1].unresolved_issues
            assert inst.reference == expected
            verified += 1
        elif inst.task == "TCR":
            from counselsim.bench import render_event_chain

            assert inst.reference == render_event_chain(traj)
            verified += 1
    assert verified == 60

    _report(5, "quotas 5/2/1 over 20 trajectories give 100/40/20 (99 with exclusion); 60/60 references mechanically verified")


def test_criterion_6_judge_harness() -> None:
    instance = BenchInstance(
        instance_id="H000-sr-001",
        task="SR",
        trajectory_id="H000",
        input_payload={},
        reference="参考回应",
        rubric=RUBRICS["SR"],
    )
    mr_instance = BenchInstance(
        instance_id="H000-mr-001",
        task="MR",
        trajectory_id="H000",
        input_payload={},
        reference="第5周",
        rubric=RUBRICS["MR"],
    )

    # rubric dimension counts per task
    assert tuple(len(RUBRICS[t]) for t in ("SR", "MR", "TCR")) == (3, 4, 4)

    # 50-case adversarial fixture: every malformed reply must be rejected
    rng = random.Random(606)
    adversarial: list[tuple[BenchInstance, str]] = []
    for i in range(50):
        kind = i % 5
        target = instance if i % 2 == 0 else mr_instance
        dims = list(target.rubric)
        if kind == 0:  # out-of-range high
            payload = {d: 5 for d in dims}
            payload[rng.choice(dims)] = rng.choice([6, 7, 5.5, 100])
            adversarial.append((target, json.dumps(payload)))
        elif kind == 1:  # out-of-range low / non-numeric
            payload = {d: 3 for d in dims}
            payload[rng.choice(dims)] = rng.choice([-1, -0.5, True, "好"])
            adversarial.append((target, json.dumps(payload)))
        elif kind == 2:  # missing dimension
            payload = {d: 4 for d in dims[:-1]}
            adversarial.append((target, json.dumps(payload)))
        elif kind == 3:  # extra dimension
            payload = {d: 4 for d in dims}
            payload["Bonus"] = 4
            adversarial.append((target, json.dumps(payload)))
        else:  # malformed JSON
            adversarial.append((target, rng.choice(["评分：4", "[1,2,3]", "{scores}", ""])))
    rejected = 0
    for target, raw in adversarial:
        try:
            parse_judge_scores(raw, target)
        except ParseError:
            rejected += 1
    assert rejected == 50

    # clean replies still parse
    ok = parse_judge_scores('{"Empathy": 4, "Coherence": 5, "Professionalism": 3}', instance)
    assert ok.mean_score == 4.0

    # pearson: exactness and oracle agreement
    series = [2.5, 1.0, 4.75, 3.125, 0.5]
    assert pearson(series, list(series)) == 1.0
    assert pearson(series, [-x for x in series]) == -1.0
    rng = random.Random(4242)
    pairs_checked = 0
    while pairs_checked < 100:
        n = rng.randint(2, 50)
        a = [rng.uniform(-100, 100) for _ in range(n)]
        b = [rng.uniform(-100, 100) for _ in range(n)]
        if len(set(a)) == 1 or len(set(b)) == 1:
            continue
        assert abs(pearson(a, b) - oracle_pearson(a, b)) <= 1e-9
        pairs_checked += 1

    _report(6, "50/50 adversarial judge replies rejected; rubric sizes 3/4/4; pearson exact on identity/negation and 1e-9 vs oracle on 100 pairs")


def test_criterion_7_memory_causality_audit(pipeline_run) -> None:
    config, _, manifest, _ = pipeline_run
    audited_students = 0
    audited_records = 0
    for sid in sorted(manifest.records["simulate"]):
        entry = manifest.records["simulate"][sid]
        assert entry["status"] == "ok"
        trajectory = storage.read_trajectory(config.output_root / "students" / sid)
        records = [PromptRecord.from_dict(r) for r in entry["prompt_digests"]]
        assert records, f"{sid} has no prompt records"
        problems = audit_memory_causality(trajectory, records, config.sim_config_for(sid))
        assert problems == [], f"{sid}: {problems}"
        # |M_t| = t at every step
        for t, summary in enumerate(trajectory.memory.summaries, start=1):
            assert summary.session_index == t
        assert len(trajectory.memory.summaries) == len(trajectory.sessions)
        audited_students += 1
        audited_records += len(records)
    assert audited_students == 10

    _report(7, f"{audited_records} prompt digests across {audited_students} students re-derived; no session saw a summary from its future")


@pytest.mark.skipif(
    not os.environ.get("COUNSELSIM_LIVE_CONFIG"),
    reason="live smoke is network-gated; set COUNSELSIM_LIVE_CONFIG to a backend config JSON",
)
def test_criterion_8_live_backend_smoke(tmp_path) -> None:
    live_cfg = json.loads(Path(os.environ["COUNSELSIM_LIVE_CONFIG"]).read_text(encoding="utf-8"))
    root = tmp_path / "live"
    config = PipelineConfig.from_dict(
        {
            "seed": 1,
            "students": 1,
            "output_root": str(root),
            "backends": {
                "generator": live_cfg,
                "judge": {"type": "mock", "seed": 2},
                "embedder": {"type": "mock", "seed": 3},
            },
        }
    )
    exit_code, manifest = run_pipeline(config)
    if exit_code == 0:
        trajectory = storage.read_trajectory(root / "students" / "S001")
        assert validate_trajectory(trajectory).ok
        _report(8, "live backend completed one student with all validators passing")
    else:
        failures = manifest.failures()
        assert failures, "non-zero exit must come with manifest failure records"
        assert not storage.has_trajectory(root / "students" / "S001")
        _report(8, f"live backend exhausted retries cleanly: {failures}")
