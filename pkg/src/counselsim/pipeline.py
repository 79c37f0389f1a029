"""Resumable end-to-end pipeline with manifest-based provenance.

Stage order: profiles -> graphs -> simulate -> qc -> export -> stats ->
diversity. Stages are barriers; per-student work inside a stage runs on a
bounded worker pool, and students whose outputs already exist and
validate are skipped, so interrupted runs pick up where they stopped.

Every generated text maps to a manifest record carrying the prompt digest
of the attempt that produced it. Failures are quarantined or recorded,
never silently dropped, so corpus counts stay explainable.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Any, Callable

from . import storage
from .analytics import (
    corpus_stats,
    cosine_matrix,
    dialogue_similarity,
    exceeds_threshold,
    profile_dimension_similarity,
    tfidf_vectors,
)
from .backends import Backend, BackendConfig, make_backend
from .domain import StudentProfile, StudentTrajectory, validate_profile, validate_trajectory
from .errors import ConfigError, NothingToExport
from .events import GraphConfig, build_graph, validate_event_graph
from .profiles import (
    DEFAULT_ATTRIBUTE_SPACE,
    AttributeSpace,
    AttributeTuple,
    generate_profile,
    sample_attributes,
)
from .qc import (
    DEFAULT_DENYLIST,
    DEFAULT_SCENARIO_TERMS,
    DEFAULT_THETA_DIALOGUE,
    DEFAULT_THETA_PROFILE,
    run_qc,
)
from .rng import derive_int
from .simulate import PromptRecord, SimulationConfig, run_trajectory

logger = logging.getLogger(__name__)

STAGES = ("profiles", "graphs", "simulate", "qc", "export", "stats", "diversity")

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QCConfig:
    theta_profile: float = DEFAULT_THETA_PROFILE
    theta_dialogue: float = DEFAULT_THETA_DIALOGUE
    denylist: tuple[str, ...] = DEFAULT_DENYLIST
    scenario_terms: tuple[str, ...] = DEFAULT_SCENARIO_TERMS
    use_judge: bool = False
    judge_cutoff: float = 3.0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QCConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        for key in ("denylist", "scenario_terms"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


@dataclass(frozen=True)
class ProfileStageConfig:
    similarity_threshold: float = 0.6
    attempt_budget: int = 3

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProfileStageConfig":
        return cls(**{f: data[f] for f in cls.__dataclass_fields__ if f in data})


@dataclass(frozen=True)
class BenchQuota:
    sr_quota: int = 5
    mr_quota: int = 2

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BenchQuota":
        return cls(**{f: data[f] for f in cls.__dataclass_fields__ if f in data})


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    students: int
    output_root: Path
    generator: BackendConfig
    judge: BackendConfig
    embedder: BackendConfig
    space: AttributeSpace = DEFAULT_ATTRIBUTE_SPACE
    simulation: SimulationConfig = SimulationConfig()
    graphs: GraphConfig = GraphConfig()
    profiles: ProfileStageConfig = ProfileStageConfig()
    qc: QCConfig = QCConfig()
    bench: BenchQuota = BenchQuota()
    parallel: int = 0  # 0 = pick from available parallelism

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> "PipelineConfig":
        for key in ("seed", "students", "output_root", "backends"):
            if key not in data:
                raise ConfigError(f"config missing required field {key!r}")
        backends = data["backends"]
        for block in ("generator", "judge", "embedder"):
            if block not in backends:
                raise ConfigError(f"config missing backend block {block!r}")
        try:
            generator = BackendConfig.from_dict(backends["generator"])
            judge = BackendConfig.from_dict(backends["judge"])
            embedder = BackendConfig.from_dict(backends["embedder"])
        except TypeError as exc:
            raise ConfigError(f"bad backend block: {exc}") from None
        output_root = Path(data["output_root"])
        if base_dir is not None and not output_root.is_absolute():
            output_root = base_dir / output_root
        students = int(data["students"])
        if students < 1:
            raise ConfigError("students must be >= 1")
        return cls(
            seed=int(data["seed"]),
            students=students,
            output_root=output_root,
            generator=generator,
            judge=judge,
            embedder=embedder,
            space=AttributeSpace.from_dict(data["attribute_space"])
            if "attribute_space" in data
            else DEFAULT_ATTRIBUTE_SPACE,
            simulation=SimulationConfig.from_dict(data.get("simulation", {})),
            graphs=GraphConfig.from_dict(data.get("graphs", {})),
            profiles=ProfileStageConfig.from_dict(data.get("profiles", {})),
            qc=QCConfig.from_dict(data.get("qc", {})),
            bench=BenchQuota.from_dict(data.get("bench", {})),
            parallel=int(data.get("parallel", 0)),
        )

    @classmethod
    def from_file(cls, path: Path) -> "PipelineConfig":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def digest(self) -> str:
        payload = {
            "seed": self.seed,
            "students": self.students,
            "generator": self.generator.to_dict(),
            "judge": self.judge.to_dict(),
            "embedder": self.embedder.to_dict(),
            "space": self.space.to_dict(),
            "simulation": {f: getattr(self.simulation, f) for f in self.simulation.__dataclass_fields__},
            "graphs": {f: getattr(self.graphs, f) for f in self.graphs.__dataclass_fields__},
        }
        return hashlib.sha256(json.dumps(payload, ensure_ascii=False, sort_keys=True).encode()).hexdigest()

    def student_ids(self) -> list[str]:
        return [f"S{i + 1:03d}" for i in range(self.students)]

    def worker_count(self) -> int:
        if self.parallel > 0:
            return self.parallel
        return min(8, os.cpu_count() or 1)

    def sim_config_for(self, student_id: str) -> SimulationConfig:
        return SimulationConfig(
            rounds_min=self.simulation.rounds_min,
            rounds_max=self.simulation.rounds_max,
            memory_window=self.simulation.memory_window,
            attempt_budget=self.simulation.attempt_budget,
            seed=derive_int(self.seed, "sim", student_id),
        )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class Manifest:
    """Per-stage completion records, serialized sorted so re-runs diff
    cleanly (timestamps are the only varying field)."""

    def __init__(self, path: Path, config_digest: str, seed: int | None = None):
        self.path = path
        self.config_digest = config_digest
        self.seed = seed
        self.records: dict[str, dict[str, dict[str, Any]]] = {stage: {} for stage in STAGES}
        self._lock = Lock()
        if path.exists():
            data = storage.load_json(path)
            previous_seed = data.get("seed")
            if seed is not None and previous_seed is not None and previous_seed != seed:
                # on-disk outputs were generated under a different seed; they
                # are reused only if they still validate
                logger.warning(
                    "run seed changed (%s -> %s); prefer a fresh output root when reseeding",
                    previous_seed,
                    seed,
                )
            elif data.get("config_digest") != config_digest:
                logger.info("config digest changed (%s -> %s)", str(data.get("config_digest"))[:12], config_digest[:12])
            for stage, entries in data.get("records", {}).items():
                self.records.setdefault(stage, {}).update(entries)

    def record(self, stage: str, student_id: str, status: str, **extra: Any) -> None:
        entry = {"status": status, "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()}
        entry.update(extra)
        with self._lock:
            self.records[stage][student_id] = entry

    def get(self, stage: str, student_id: str) -> dict[str, Any] | None:
        return self.records.get(stage, {}).get(student_id)

    def failures(self) -> list[tuple[str, str]]:
        return [
            (stage, sid)
            for stage, entries in self.records.items()
            for sid, entry in entries.items()
            if entry.get("status") == "failed"
        ]

    def save(self) -> None:
        with self._lock:
            payload: dict[str, Any] = {"config_digest": self.config_digest, "records": self.records}
            if self.seed is not None:
                payload["seed"] = self.seed
            storage.dump_json(self.path, payload)


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------


def _run_per_student(
    ids: list[str], worker: Callable[[str], None], workers: int
) -> dict[str, Exception]:
    """Run a stage body for each student, collecting failures."""
    failures: dict[str, Exception] = {}
    if workers <= 1:
        for sid in ids:
            try:
                worker(sid)
            except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
                failures[sid] = exc
        return failures
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {sid: pool.submit(worker, sid) for sid in ids}
    for sid, future in futures.items():
        error = future.exception()
        if error is not None:
            failures[sid] = error
    return failures


class PipelineRun:
    """One pipeline execution over a config; stages share state here."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = config.output_root
        self.students_dir = self.root / "students"
        self.quarantine_dir = self.root / "quarantine"
        self.manifest = Manifest(self.root / "manifest.json", config.digest(), seed=config.seed)
        self.generator: Backend = make_backend(config.generator)
        self.attrs: dict[str, AttributeTuple] = {}
        self.profiles: dict[str, StudentProfile] = {}
        self.active: list[str] = []  # students still in the running

    # -- profiles -----------------------------------------------------------

    def stage_profiles(self) -> None:
        cfg = self.config
        tuples = sample_attributes(cfg.space, cfg.students, cfg.seed)
        ids = cfg.student_ids()
        self.attrs = dict(zip(ids, tuples))

        def worker(sid: str) -> None:
            qc_entry = self.manifest.get("qc", sid)
            if (
                qc_entry is not None
                and qc_entry.get("status") == "rejected"
                and (self.quarantine_dir / sid).exists()
            ):
                return  # already quarantined in a previous run; leave it out
            directory = self.students_dir / sid
            if (directory / storage.PROFILE_FILE).exists():
                try:
                    profile = storage.read_profile(directory)
                    if validate_profile(profile, cfg.space).ok:
                        self.profiles[sid] = profile
                        if self.manifest.get("profiles", sid) is None:
                            self.manifest.record("profiles", sid, "ok", attempts=0, prompt_digest="")
                        return
                except Exception:  # noqa: BLE001 - fall through to regeneration
                    logger.warning("existing profile for %s unreadable; regenerating", sid)
            profile, digest = generate_profile(
                self.attrs[sid],
                cfg.space,
                self.generator,
                sid,
                seed=derive_int(cfg.seed, "profile", sid),
                attempt_budget=cfg.profiles.attempt_budget,
            )
            storage.write_profile(directory, profile)
            self.profiles[sid] = profile
            self.manifest.record("profiles", sid, "ok", attempts=1, prompt_digest=digest)

        failures = _run_per_student(ids, worker, cfg.worker_count())
        for sid, exc in failures.items():
            logger.error("profile stage failed for %s: %s", sid, exc)
            self.manifest.record("profiles", sid, "failed", error=str(exc))

        self._filter_profiles([sid for sid in ids if sid in self.profiles])
        self.manifest.save()

    def _filter_profiles(self, ids: list[str]) -> None:
        """Greedy repetition/validity filter with seeded regeneration."""
        cfg = self.config
        kept: list[str] = []
        rejects: list[dict[str, Any]] = []
        for sid in ids:
            profile = self.profiles[sid]
            accepted = False
            for attempt in range(cfg.profiles.attempt_budget):
                reason = self._reject_reason(profile, [self.profiles[k] for k in kept])
                if reason is None:
                    accepted = True
                    break
                logger.warning("profile %s rejected (%s); regenerating", sid, reason)
                rejects.append({"student_id": sid, "attempt": attempt, "reason": reason})
                profile, digest = generate_profile(
                    self.attrs[sid],
                    cfg.space,
                    self.generator,
                    sid,
                    seed=derive_int(cfg.seed, "profile", sid, "retry", attempt),
                    attempt_budget=cfg.profiles.attempt_budget,
                )
                storage.write_profile(self.students_dir / sid, profile)
                self.profiles[sid] = profile
                self.manifest.record("profiles", sid, "ok", attempts=attempt + 2, prompt_digest=digest)
            if accepted:
                kept.append(sid)
            else:
                self.manifest.record("profiles", sid, "failed", error="rejected by profile filter")
                self.profiles.pop(sid, None)
        self.active = kept
        storage.dump_json(self.root / "rejects.json", rejects)

    def _reject_reason(self, profile: StudentProfile, kept: list[StudentProfile]) -> str | None:
        report = validate_profile(profile, self.config.space)
        if not report.ok:
            return report.findings[0].category
        if kept:
            docs = [p.concatenated_text() for p in kept] + [profile.concatenated_text()]
            if docs[-1] in docs[:-1]:
                return "Repetition"
            sims = cosine_matrix(tfidf_vectors(docs))[-1, :-1]
            if exceeds_threshold(float(sims.max()), self.config.profiles.similarity_threshold):
                return "Repetition"
        return None

    # -- graphs -------------------------------------------------------------

    def stage_graphs(self) -> None:
        cfg = self.config

        def worker(sid: str) -> None:
            directory = self.students_dir / sid
            if (directory / storage.EVENTS_FILE).exists():
                try:
                    graph = storage.read_graph(directory)
                    if not validate_event_graph(
                        graph, min_events=cfg.graphs.min_events, max_events=cfg.graphs.max_events
                    ):
                        if self.manifest.get("graphs", sid) is None:
                            self.manifest.record("graphs", sid, "ok", attempts=0, prompt_digest="")
                        return
                except Exception:  # noqa: BLE001
                    logger.warning("existing graph for %s unreadable; regenerating", sid)
            graph, digest = build_graph(
                self.profiles[sid],
                self.generator,
                cfg.graphs,
                seed=derive_int(cfg.seed, "graph", sid),
                domains=cfg.space.stress_domains,
                domain_examples=cfg.space.domain_descriptions,
            )
            storage.write_graph(directory, graph)
            self.manifest.record("graphs", sid, "ok", attempts=1, prompt_digest=digest)

        failures = _run_per_student(self.active, worker, cfg.worker_count())
        for sid, exc in failures.items():
            logger.error("graph stage failed for %s: %s", sid, exc)
            self.manifest.record("graphs", sid, "failed", error=str(exc))
            self.active.remove(sid)
        self.manifest.save()

    # -- simulate -----------------------------------------------------------

    def stage_simulate(self) -> None:
        cfg = self.config

        def worker(sid: str) -> None:
            directory = self.students_dir / sid
            if storage.has_trajectory(directory):
                try:
                    traj = storage.read_trajectory(directory)
                    ok = validate_trajectory(
                        traj, min_events=cfg.graphs.min_events, max_events=cfg.graphs.max_events
                    ).ok
                    if ok and self.manifest.get("simulate", sid) is not None:
                        return
                except Exception:  # noqa: BLE001
                    logger.warning("existing trajectory for %s unreadable; regenerating", sid)
            profile = storage.read_profile(directory)
            graph = storage.read_graph(directory)
            sim_config = cfg.sim_config_for(sid)
            trajectory, records = run_trajectory(profile, graph, self.generator, sim_config)
            storage.write_sessions(directory, trajectory.sessions, trajectory.memory)
            self.manifest.record(
                "simulate",
                sid,
                "ok",
                sessions=len(trajectory.sessions),
                sim_seed=sim_config.seed,
                memory_window=sim_config.memory_window,
                prompt_digests=[r.to_dict() for r in records],
            )

        failures = _run_per_student(self.active, worker, cfg.worker_count())
        for sid, exc in failures.items():
            logger.error("simulate stage failed for %s: %s", sid, exc)
            self.manifest.record("simulate", sid, "failed", error=str(exc))
            self.active.remove(sid)
        self.manifest.save()

    # -- qc -----------------------------------------------------------------

    def stage_qc(self) -> None:
        cfg = self.config
        corpus: list[StudentTrajectory] = []
        for sid in list(self.active):
            try:
                corpus.append(storage.read_trajectory(self.students_dir / sid))
            except Exception as exc:  # noqa: BLE001
                self.manifest.record("qc", sid, "failed", error=f"unreadable trajectory: {exc}")
                self.active.remove(sid)

        prompt_records: dict[str, list[PromptRecord]] = {}
        sim_configs: dict[str, SimulationConfig] = {}
        for sid in self.active:
            entry = self.manifest.get("simulate", sid) or {}
            prompt_records[sid] = [PromptRecord.from_dict(r) for r in entry.get("prompt_digests", [])]
            # prefer the recorded simulation provenance so the audit stays
            # valid even if the qc invocation carries different settings
            fallback = cfg.sim_config_for(sid)
            sim_configs[sid] = SimulationConfig(
                rounds_min=fallback.rounds_min,
                rounds_max=fallback.rounds_max,
                memory_window=int(entry.get("memory_window", fallback.memory_window)),
                attempt_budget=fallback.attempt_budget,
                seed=int(entry.get("sim_seed", fallback.seed)),
            )

        reports = run_qc(
            corpus,
            theta_profile=cfg.qc.theta_profile,
            theta_dialogue=cfg.qc.theta_dialogue,
            denylist=cfg.qc.denylist,
            scenario_terms=cfg.qc.scenario_terms,
            judge_backend=make_backend(cfg.judge) if cfg.qc.use_judge else None,
            judge_cutoff=cfg.qc.judge_cutoff,
            min_events=cfg.graphs.min_events,
            max_events=cfg.graphs.max_events,
            prompt_records=prompt_records,
            sim_configs=sim_configs,
        )
        storage.dump_json(self.root / "qc_report.json", {sid: r.to_dict() for sid, r in reports.items()})
        for sid, report in sorted(reports.items()):
            if report.verdict == "reject":
                self._quarantine(sid, report.to_dict())
                self.manifest.record("qc", sid, "rejected", findings=len(report.findings))
                self.active.remove(sid)
            else:
                self.manifest.record("qc", sid, "ok")
        self.manifest.save()

    def _quarantine(self, sid: str, report: dict[str, Any]) -> None:
        source = self.students_dir / sid
        target = self.quarantine_dir / sid
        if target.exists():
            shutil.rmtree(target)
        self.quarantine_dir.mkdir(parents=True, exist_ok=True)
        shutil.move(str(source), str(target))
        storage.dump_json(target / "qc_report.json", report)
        logger.warning("quarantined %s (%d findings)", sid, len(report.get("findings", [])))

    # -- export / stats / diversity -----------------------------------------

    def stage_export(self) -> Path:
        path = export_dataset(self.root, "jsonl")
        self.manifest.record("export", "corpus", "ok", path=path.name)
        self.manifest.save()
        return path

    def stage_stats(self, dataset_path: Path) -> None:
        rows = storage.read_jsonl(dataset_path)
        stats = corpus_stats(rows)
        storage.dump_json(self.root / "stats.json", stats.to_dict())
        self.manifest.record("stats", "corpus", "ok", n_units=stats.n_units)
        self.manifest.save()

    def stage_diversity(self) -> None:
        corpus = [
            storage.read_trajectory(d)
            for d in storage.list_trajectory_dirs(self.students_dir)
            if storage.has_trajectory(d)
        ]
        if len(corpus) < 2:
            self.manifest.record("diversity", "corpus", "skipped", reason="fewer than 2 trajectories")
            self.manifest.save()
            return
        profile_stats = profile_dimension_similarity([t.profile for t in corpus])
        dialogue_stats = dialogue_similarity(corpus, make_backend(self.config.embedder))
        storage.dump_json(
            self.root / "similarity.json",
            {"profiles": profile_stats.to_dict(), "dialogues": dialogue_stats.to_dict()},
        )
        self.manifest.record("diversity", "corpus", "ok", n_pairs=profile_stats.n_pairs)
        self.manifest.save()


def run_pipeline(config: PipelineConfig) -> tuple[int, Manifest]:
    """Execute all stages in order; returns (exit_code, manifest)."""
    run = PipelineRun(config)
    run.root.mkdir(parents=True, exist_ok=True)
    run.stage_profiles()
    run.stage_graphs()
    run.stage_simulate()
    run.stage_qc()
    try:
        dataset_path = run.stage_export()
    except NothingToExport as exc:
        logger.error("nothing to export: %s", exc)
        run.manifest.record("export", "corpus", "failed", error=str(exc))
        run.manifest.save()
        return EXIT_STAGE_FAILURE, run.manifest
    run.stage_stats(dataset_path)
    run.stage_diversity()
    exit_code = EXIT_STAGE_FAILURE if run.manifest.failures() else EXIT_OK
    return exit_code, run.manifest


def export_dataset(root: Path, format: str = "jsonl") -> Path:
    """Export QC-passing trajectories from a pipeline output root.

    ``jsonl`` writes the flattened utterance dataset; ``per_student_json``
    writes one complete trajectory JSON per student. Quarantined
    trajectories are never exported.
    """
    directories = [d for d in storage.list_trajectory_dirs(root / "students") if storage.has_trajectory(d)]
    trajectories = [storage.read_trajectory(d) for d in directories]
    if not trajectories:
        raise NothingToExport(f"no complete trajectories under {root / 'students'}")
    if format == "jsonl":
        path = root / "dataset.jsonl"
        rows = (row for traj in trajectories for row in storage.utterance_rows(traj))
        storage.write_jsonl(path, rows)
        return path
    if format == "per_student_json":
        export_dir = root / "dataset"
        for traj in trajectories:
            storage.dump_json(export_dir / f"{traj.profile.student_id}.json", traj.to_dict())
        return export_dir
    raise ConfigError(f"unknown export format {format!r}")
