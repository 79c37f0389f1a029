"""Exception hierarchy shared across the pipeline.

Validators never raise: structural problems come back as findings in a
report. Exceptions are reserved for operations that cannot produce a
usable value (transport failures, unparseable generator output, exhausted
regeneration budgets, bad configuration).
"""


class CounselSimError(Exception):
    """Base class for all package errors."""


class ConfigError(CounselSimError):
    """Configuration is missing, malformed, or inconsistent."""


class TransportError(CounselSimError):
    """A backend call failed after all retry attempts."""


class BudgetExceeded(CounselSimError):
    """Backend response was truncated against the length budget."""


class EmptyText(CounselSimError):
    """An embedding input was empty."""


class EmptyUtterance(CounselSimError):
    """The generator returned a blank dialogue turn."""


class ParseError(CounselSimError):
    """Generator output could not be parsed into the expected structure."""


class TemplateError(CounselSimError):
    """A prompt template placeholder could not be filled."""


class GenerationExhausted(CounselSimError):
    """All regeneration attempts failed for one artifact."""


class SequenceGap(CounselSimError):
    """A memory update skipped or repeated a session index."""


class QuotaTooLarge(CounselSimError):
    """A benchmark quota exceeds the available material."""


class RubricMismatch(ParseError):
    """Judge reply dimensions do not match the instance rubric."""


class ScoreOutOfRange(ParseError):
    """Judge reply contains a score outside the 0..5 scale."""


class LengthMismatch(CounselSimError):
    """Paired series have different or insufficient lengths."""


class DegenerateSeries(CounselSimError):
    """A correlation input series has zero variance."""


class TooFewDocs(CounselSimError):
    """Pairwise similarity needs at least two documents."""


class EmptyDoc(CounselSimError):
    """A TF-IDF input document was empty."""


class EmptyDataset(CounselSimError):
    """Corpus statistics were requested over an empty dataset."""


class OrphanResult(CounselSimError):
    """A judge result references an unknown benchmark instance."""


class NothingToExport(CounselSimError):
    """No QC-passing trajectories are available for export."""


class StageFailure(CounselSimError):
    """A pipeline stage finished with unrecovered failures."""
