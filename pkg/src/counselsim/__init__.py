"""Synthesis, quality control, analytics, and benchmarking for long-horizon
campus counseling dialogue corpora."""

__version__ = "0.1.0"

from .domain import (
    EventNode,
    MemoryState,
    SessionDialogue,
    SessionSummary,
    StressEventGraph,
    StudentProfile,
    StudentTrajectory,
    validate_profile,
    validate_trajectory,
)

__all__ = [
    "EventNode",
    "MemoryState",
    "SessionDialogue",
    "SessionSummary",
    "StressEventGraph",
    "StudentProfile",
    "StudentTrajectory",
    "validate_profile",
    "validate_trajectory",
    "__version__",
]
