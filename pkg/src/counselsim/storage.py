"""On-disk layout for trajectories and the flattened dataset export.

One trajectory per directory:

    <dir>/profile.json
    <dir>/events.json
    <dir>/sessions/session_<t>.json
    <dir>/memory.json

The flattened export is JSON-Lines, one object per utterance with fields
student_id, session_index, turn_index, role, and text. All files are UTF-8
JSON written deterministically (sorted keys, fixed separators) so repeat
runs are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterator

from .domain import (
    MemoryState,
    SessionDialogue,
    StressEventGraph,
    StudentProfile,
    StudentTrajectory,
)

PROFILE_FILE = "profile.json"
EVENTS_FILE = "events.json"
MEMORY_FILE = "memory.json"
SESSIONS_DIR = "sessions"


def dump_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(data, ensure_ascii=False, sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def load_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def write_profile(directory: Path, profile: StudentProfile) -> None:
    dump_json(directory / PROFILE_FILE, profile.to_dict())


def read_profile(directory: Path) -> StudentProfile:
    return StudentProfile.from_dict(load_json(directory / PROFILE_FILE))


def write_graph(directory: Path, graph: StressEventGraph) -> None:
    dump_json(directory / EVENTS_FILE, graph.to_dict())


def read_graph(directory: Path) -> StressEventGraph:
    return StressEventGraph.from_dict(load_json(directory / EVENTS_FILE))


def write_sessions(directory: Path, sessions: tuple[SessionDialogue, ...], memory: MemoryState) -> None:
    for session in sessions:
        dump_json(directory / SESSIONS_DIR / f"session_{session.session_index}.json", session.to_dict())
    dump_json(directory / MEMORY_FILE, memory.to_dict())


def write_trajectory(directory: Path, traj: StudentTrajectory) -> None:
    write_profile(directory, traj.profile)
    write_graph(directory, traj.graph)
    write_sessions(directory, traj.sessions, traj.memory)


def has_trajectory(directory: Path) -> bool:
    return (
        (directory / PROFILE_FILE).exists()
        and (directory / EVENTS_FILE).exists()
        and (directory / MEMORY_FILE).exists()
        and (directory / SESSIONS_DIR).is_dir()
    )


def read_trajectory(directory: Path) -> StudentTrajectory:
    profile = read_profile(directory)
    graph = read_graph(directory)
    memory = MemoryState.from_dict(load_json(directory / MEMORY_FILE))
    session_files = sorted(
        (directory / SESSIONS_DIR).glob("session_*.json"),
        key=lambda p: int(p.stem.split("_")[1]),
    )
    sessions = tuple(SessionDialogue.from_dict(load_json(p)) for p in session_files)
    return StudentTrajectory(profile=profile, graph=graph, sessions=sessions, memory=memory)


def list_trajectory_dirs(root: Path) -> list[Path]:
    """Trajectory directories under ``root``, ordered by directory name."""
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / PROFILE_FILE).exists())


def utterance_rows(traj: StudentTrajectory) -> Iterator[dict[str, Any]]:
    for session in traj.sessions:
        for turn in session.turns:
            yield {
                "student_id": traj.profile.student_id,
                "session_index": session.session_index,
                "turn_index": turn.index,
                "role": turn.role,
                "text": turn.text,
            }


def write_jsonl(path: Path, rows: Iterator[dict[str, Any]] | list[dict[str, Any]]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
