"""Command-line interface.

Verbs mirror the pipeline stages (profiles, graphs, simulate, qc, stats,
diversity, export), plus benchmark tooling (bench, judge, correlate) and
the end-to-end `pipeline` verb. Exit codes: 0 success, 1 stage failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import storage
from .analytics import corpus_stats, dialogue_similarity, profile_dimension_similarity
from .backends import BackendConfig, make_backend
from .bench import (
    BenchInstance,
    JudgeResult,
    aggregate,
    build_bench,
    parse_judge_scores,
    read_human_scores,
    render_judge_prompt,
)
from .errors import ConfigError, CounselSimError
from .pipeline import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_STAGE_FAILURE,
    PipelineConfig,
    PipelineRun,
    export_dataset,
    run_pipeline,
)


def _load_backend_config(path: str | None, seed: int) -> BackendConfig:
    if path is None:
        return BackendConfig(type="mock", seed=seed)
    return BackendConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _pipeline_config(args: argparse.Namespace, output_root: Path) -> PipelineConfig:
    """Config for a standalone stage verb: the config file when given,
    otherwise seeded mock defaults rooted at the verb's directory."""
    if getattr(args, "config", None):
        config = PipelineConfig.from_file(Path(args.config))
        if args.seed is not None:
            config = _with_seed(config, args.seed)
        return config
    seed = args.seed if args.seed is not None else 0
    data = {
        "seed": seed,
        "students": getattr(args, "count", 1) or 1,
        "output_root": str(output_root),
        "backends": {
            "generator": {"type": "mock", "seed": seed},
            "judge": {"type": "mock", "seed": seed + 1},
            "embedder": {"type": "mock", "seed": seed + 2},
        },
    }
    config = PipelineConfig.from_dict(data)
    if getattr(args, "parallel", None):
        config = _replace(config, parallel=args.parallel)
    return config


def _replace(config: PipelineConfig, **changes) -> PipelineConfig:
    import dataclasses

    return dataclasses.replace(config, **changes)


def _with_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    return _replace(config, seed=seed)


def _trajectory_root(path: Path) -> Path:
    return path / "students" if (path / "students").is_dir() else path


def _read_corpus(path: Path):
    dirs = [d for d in storage.list_trajectory_dirs(_trajectory_root(path)) if storage.has_trajectory(d)]
    return [storage.read_trajectory(d) for d in dirs]


# ---------------------------------------------------------------------------
# Verb handlers
# ---------------------------------------------------------------------------


def cmd_profiles(args: argparse.Namespace) -> int:
    root = Path(args.out)
    config = _pipeline_config(args, root)
    config = _replace(config, students=args.count, output_root=root)
    if args.threshold is not None:
        config = _replace(config, profiles=_replace(config.profiles, similarity_threshold=args.threshold))
    run = PipelineRun(config)
    run.root.mkdir(parents=True, exist_ok=True)
    run.stage_profiles()
    print(f"profiles: {len(run.active)} kept, root {root}")
    return EXIT_STAGE_FAILURE if run.manifest.failures() else EXIT_OK


def cmd_graphs(args: argparse.Namespace) -> int:
    root = Path(args.profiles)
    config = _pipeline_config(args, root)
    config = _replace(config, output_root=root)
    if args.min_events or args.max_events or args.weeks:
        graphs = config.graphs
        config = _replace(
            config,
            graphs=_replace(
                graphs,
                min_events=args.min_events or graphs.min_events,
                max_events=args.max_events or graphs.max_events,
                semester_weeks=args.weeks or graphs.semester_weeks,
            ),
        )
    run = PipelineRun(config)
    run.active = [d.name for d in storage.list_trajectory_dirs(run.students_dir)]
    run.profiles = {sid: storage.read_profile(run.students_dir / sid) for sid in run.active}
    run.stage_graphs()

    from .events import stress_trend, validate_event_graph

    report = {}
    for sid in run.active:
        graph = storage.read_graph(run.students_dir / sid)
        errors = validate_event_graph(
            graph, min_events=config.graphs.min_events, max_events=config.graphs.max_events
        )
        report[sid] = {
            "events": len(graph.nodes),
            "errors": [e.to_dict() for e in errors],
            "stress_trend": round(stress_trend(graph), 4),
        }
    storage.dump_json(root / "graph_validation.json", report)
    print(f"graphs: {len(run.active)} built or verified, report {root / 'graph_validation.json'}")
    return EXIT_STAGE_FAILURE if run.manifest.failures() else EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    root = Path(args.graphs)
    config = _pipeline_config(args, root)
    config = _replace(config, output_root=root)
    if args.backend:
        config = _replace(config, generator=_load_backend_config(args.backend, config.seed))
    if args.rounds:
        lo, hi = (int(x) for x in args.rounds.split(".."))
        config = _replace(config, simulation=_replace(config.simulation, rounds_min=lo, rounds_max=hi))
    if args.parallel:
        config = _replace(config, parallel=args.parallel)
    run = PipelineRun(config)
    run.active = [d.name for d in storage.list_trajectory_dirs(run.students_dir)]
    run.stage_simulate()
    print(f"simulate: {len(run.active)} trajectories complete")
    return EXIT_STAGE_FAILURE if run.manifest.failures() else EXIT_OK


def cmd_qc(args: argparse.Namespace) -> int:
    root = Path(args.in_dir)
    config = _pipeline_config(args, root)
    config = _replace(config, output_root=root)
    qc_cfg = config.qc
    if args.theta_profile is not None:
        qc_cfg = _replace(qc_cfg, theta_profile=args.theta_profile)
    if args.theta_dialogue is not None:
        qc_cfg = _replace(qc_cfg, theta_dialogue=args.theta_dialogue)
    if args.judge:
        config = _replace(config, judge=_load_backend_config(args.judge, config.seed), qc=_replace(qc_cfg, use_judge=True))
    else:
        config = _replace(config, qc=qc_cfg)
    run = PipelineRun(config)
    if args.quarantine:
        run.quarantine_dir = Path(args.quarantine)
    run.active = [d.name for d in storage.list_trajectory_dirs(run.students_dir) if storage.has_trajectory(run.students_dir / d.name)]
    run.stage_qc()
    report_path = Path(args.out) / "qc_report.json" if args.out else root / "qc_report.json"
    if args.out and report_path != root / "qc_report.json":
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_bytes((root / "qc_report.json").read_bytes())
    print(f"qc: {len(run.active)} passing, report {report_path}")
    return EXIT_STAGE_FAILURE if run.manifest.failures() else EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    dataset = Path(args.dataset)
    stats = corpus_stats(storage.read_jsonl(dataset))
    out_path = dataset.parent / "stats.json"
    storage.dump_json(out_path, stats.to_dict())
    print(json.dumps(stats.to_dict(), ensure_ascii=False, indent=2))
    return EXIT_OK


def cmd_diversity(args: argparse.Namespace) -> int:
    root = Path(args.dataset)
    corpus = _read_corpus(root)
    if len(corpus) < 2:
        print("diversity: need at least 2 trajectories", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    embed_cfg = _load_backend_config(args.embed, args.seed if args.seed is not None else 0)
    embed_backend = make_backend(embed_cfg)
    profile_stats = profile_dimension_similarity([t.profile for t in corpus])
    dialogue_stats = dialogue_similarity(corpus, embed_backend)
    payload = {"profiles": profile_stats.to_dict(), "dialogues": dialogue_stats.to_dict()}
    storage.dump_json(root / "similarity.json", payload)
    if args.csv:
        _write_pair_csv(Path(args.csv), corpus, embed_backend)
    print(json.dumps(payload, ensure_ascii=False, indent=2))
    return EXIT_OK


def _write_pair_csv(path: Path, corpus, embed_backend) -> None:
    """Raw pair distribution (profile TF-IDF and dialogue embedding cosines)
    for external plotting."""
    import csv

    import numpy as np

    from counselsim.analytics import cosine_matrix, session_view_texts, tfidf_vectors

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["kind", "i", "j", "score"])
        docs = [t.profile.concatenated_text() for t in corpus]
        sims = cosine_matrix(tfidf_vectors(docs))
        for i in range(len(docs)):
            for j in range(i + 1, len(docs)):
                writer.writerow(["profile", i, j, f"{sims[i, j]:.6f}"])
        for view, texts in session_view_texts(corpus).items():
            matrix = np.vstack([v.as_array() for v in embed_backend.embed(texts)])
            view_sims = cosine_matrix(matrix)
            for i in range(len(texts)):
                for j in range(i + 1, len(texts)):
                    writer.writerow([f"dialogue_{view}", i, j, f"{view_sims[i, j]:.6f}"])


def cmd_bench(args: argparse.Namespace) -> int:
    if args.bench_command != "build":
        raise ConfigError(f"unknown bench subcommand {args.bench_command!r}")
    corpus = _read_corpus(Path(args.holdout))
    if not corpus:
        print("bench: no trajectories in holdout", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    exclude: set[str] = set()
    if args.exclude:
        exclude = {line.strip() for line in Path(args.exclude).read_text(encoding="utf-8").splitlines() if line.strip()}
    instances = build_bench(
        corpus,
        sr_quota=args.sr_quota,
        mr_quota=args.mr_quota,
        seed=args.seed if args.seed is not None else 0,
        exclude=exclude,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.jsonl"
    storage.write_jsonl(path, [inst.to_dict() for inst in instances])
    counts: dict[str, int] = {}
    for inst in instances:
        counts[inst.task] = counts.get(inst.task, 0) + 1
    print(f"bench: wrote {len(instances)} instances to {path} ({counts})")
    return EXIT_OK


def cmd_judge(args: argparse.Namespace) -> int:
    bench_path = Path(args.bench)
    if bench_path.is_dir():
        bench_path = bench_path / "bench.jsonl"
    instances = [BenchInstance.from_dict(row) for row in storage.read_jsonl(bench_path)]
    by_id = {inst.instance_id: inst for inst in instances}
    outputs = storage.read_jsonl(Path(args.outputs))
    backend = make_backend(_load_backend_config(args.judge, args.seed if args.seed is not None else 0))

    results: list[JudgeResult] = []
    for row in outputs:
        instance = by_id.get(str(row["instance_id"]))
        if instance is None:
            print(f"judge: skipping unknown instance {row['instance_id']}", file=sys.stderr)
            continue
        request = render_judge_prompt(instance, str(row["output"]))
        results.append(parse_judge_scores(backend.generate(request), instance))
    out_path = bench_path.parent / "judge_results.jsonl"
    storage.write_jsonl(out_path, [r.to_dict() for r in results])
    table = aggregate(results, instances)
    print(json.dumps(table, ensure_ascii=False, indent=2))
    return EXIT_OK


def cmd_correlate(args: argparse.Namespace) -> int:
    auto_rows = storage.read_jsonl(Path(args.auto))
    human = read_human_scores(Path(args.human))
    from .bench import pearson

    per_task: dict[str, tuple[list[float], list[float]]] = {}
    instance_tasks = {row["instance_id"]: row["instance_id"].split("-")[-2] for row in auto_rows}
    for row in auto_rows:
        iid = row["instance_id"]
        if iid not in human:
            continue
        task = instance_tasks[iid].upper()
        per_task.setdefault(task, ([], []))
        per_task[task][0].append(float(row["mean_score"]))
        per_task[task][1].append(float(human[iid]))
    all_auto: list[float] = []
    all_human: list[float] = []
    table = {}
    for task, (auto_scores, human_scores) in sorted(per_task.items()):
        all_auto.extend(auto_scores)
        all_human.extend(human_scores)
        table[task] = pearson(auto_scores, human_scores) if len(auto_scores) >= 2 else None
    if len(all_auto) >= 2:
        table["overall"] = pearson(all_auto, all_human)
    print(json.dumps(table, ensure_ascii=False, indent=2))
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    if not args.config:
        raise ConfigError("pipeline requires --config")
    config = PipelineConfig.from_file(Path(args.config))
    if args.seed is not None:
        config = _with_seed(config, args.seed)
    if args.parallel:
        config = _replace(config, parallel=args.parallel)
    exit_code, manifest = run_pipeline(config)
    failures = manifest.failures()
    for stage, sid in failures:
        print(f"pipeline: {stage} failed for {sid}", file=sys.stderr)
    print(f"pipeline: exit {exit_code}, output {config.output_root}")
    return exit_code


def cmd_export(args: argparse.Namespace) -> int:
    path = export_dataset(Path(args.root), args.format)
    print(f"export: wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="counselsim",
        description="Synthesize, quality-control, analyze, and benchmark long-horizon campus counseling dialogue corpora.",
    )
    parser.add_argument("--config", help="pipeline config JSON file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--parallel", type=int, default=0, help="worker count for per-student stages")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profiles", help="sample attributes and generate student profiles")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_profiles)

    p = sub.add_parser("graphs", help="generate stress event graphs for existing profiles")
    p.add_argument("--profiles", required=True, help="root directory holding students/")
    p.add_argument("--min-events", type=int, default=0)
    p.add_argument("--max-events", type=int, default=0)
    p.add_argument("--weeks", type=int, default=0)
    p.set_defaults(func=cmd_graphs)

    p = sub.add_parser("simulate", help="run counseling sessions along the graphs")
    p.add_argument("--graphs", required=True, help="root directory holding students/")
    p.add_argument("--backend", help="backend config JSON file")
    p.add_argument("--rounds", help="round range, e.g. 4..8")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("qc", help="quality-control a corpus and quarantine rejects")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--quarantine", default=None)
    p.add_argument("--judge", help="judge backend config JSON file")
    p.add_argument("--theta-profile", type=float, default=None)
    p.add_argument("--theta-dialogue", type=float, default=None)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("stats", help="corpus statistics over a JSONL dataset")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("diversity", help="profile and dialogue similarity analytics")
    p.add_argument("--dataset", required=True, help="root directory holding students/")
    p.add_argument("--embed", help="embedding backend config JSON file")
    p.add_argument("--csv", help="also dump the raw pair distribution to this CSV")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("bench", help="benchmark tooling")
    bench_sub = p.add_subparsers(dest="bench_command", required=True)
    b = bench_sub.add_parser("build", help="build SR/MR/TCR instances from held-out trajectories")
    b.add_argument("--holdout", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--sr-quota", type=int, default=5)
    b.add_argument("--mr-quota", type=int, default=2)
    b.add_argument("--exclude", help="file with one instance_id per line to drop")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("judge", help="score model outputs against a benchmark")
    p.add_argument("--bench", required=True, help="bench.jsonl or its directory")
    p.add_argument("--outputs", required=True, help="JSONL with instance_id and output")
    p.add_argument("--judge", help="judge backend config JSON file")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("correlate", help="auto-vs-human score correlation")
    p.add_argument("--auto", required=True, help="judge_results.jsonl")
    p.add_argument("--human", required=True, help="CSV with instance_id, task, score")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export", help="export QC-passing trajectories")
    p.add_argument("--root", required=True)
    p.add_argument("--format", choices=("jsonl", "per_student_json"), default="jsonl")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except CounselSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
