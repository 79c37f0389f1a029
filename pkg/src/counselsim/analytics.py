"""Corpus statistics and diversity analytics.

TF-IDF is implemented directly rather than through a vectorizer library so
the weighting is exactly tf * ln(N/df) with no smoothing; the QC
similarity thresholds are calibrated against this weighting and the test
oracles reproduce it term by term. Terms appearing in every document get
weight zero. The default tokenizer is overlapping character bigrams, which
handles Chinese text without a word-segmentation dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable

import numpy as np
from scipy import sparse

from .domain import ROLE_COUNSELOR, ROLE_STUDENT, StudentProfile, StudentTrajectory
from .errors import EmptyDataset, EmptyDoc, TooFewDocs

if TYPE_CHECKING:
    from .backends import Backend

PROFILE_DIMENSION_KEYS = ("demographics", "personality", "background", "core_conflict")
DIALOGUE_VIEWS = ("full", "student_only", "counselor_only")


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    """Unit and character accounting over the flattened utterance dataset."""

    n_profiles: int
    n_units: int
    chars_total: int
    chars_student: int
    chars_counselor: int
    avg_per_unit: float
    avg_per_student_utt: float
    avg_per_counselor_utt: float

    def to_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def corpus_stats(rows: Iterable[dict[str, Any]]) -> CorpusStats:
    """Compute dataset statistics; a unit is a single utterance.

    Character counting is the Unicode scalar count (Python ``len``) applied
    uniformly to CJK and all other characters.
    """
    students: set[str] = set()
    n_units = 0
    n_student = n_counselor = 0
    chars_student = chars_counselor = 0
    for row in rows:
        students.add(str(row["student_id"]))
        n_units += 1
        length = len(str(row["text"]))
        if row["role"] == ROLE_STUDENT:
            n_student += 1
            chars_student += length
        elif row["role"] == ROLE_COUNSELOR:
            n_counselor += 1
            chars_counselor += length
        else:
            raise ValueError(f"unknown role {row['role']!r}")
    if n_units == 0:
        raise EmptyDataset("no utterances in dataset")
    chars_total = chars_student + chars_counselor
    return CorpusStats(
        n_profiles=len(students),
        n_units=n_units,
        chars_total=chars_total,
        chars_student=chars_student,
        chars_counselor=chars_counselor,
        avg_per_unit=chars_total / n_units,
        avg_per_student_utt=chars_student / n_student if n_student else 0.0,
        avg_per_counselor_utt=chars_counselor / n_counselor if n_counselor else 0.0,
    )


# ---------------------------------------------------------------------------
# TF-IDF and pairwise cosine
# ---------------------------------------------------------------------------


def tokenize(text: str, tokenizer: str = "char_bigram") -> list[str]:
    if tokenizer == "whitespace":
        return text.split()
    if tokenizer != "char_bigram":
        raise ValueError(f"unknown tokenizer {tokenizer!r}")
    compact = "".join(text.split())
    if len(compact) < 2:
        return [compact] if compact else []
    return [compact[i : i + 2] for i in range(len(compact) - 1)]


def tfidf_vectors(docs: list[str], tokenizer: str = "char_bigram") -> sparse.csr_matrix:
    """Row-per-document sparse TF-IDF matrix.

    tf is the raw term count; idf is ln(N/df) with df the number of
    documents containing the term, so universal terms weigh zero.
    """
    if not docs:
        raise EmptyDoc("document list is empty")
    token_lists = []
    for i, doc in enumerate(docs):
        if not doc.strip():
            raise EmptyDoc(f"document {i} is empty")
        token_lists.append(tokenize(doc, tokenizer))

    vocab: dict[str, int] = {}
    df_counts: dict[str, int] = {}
    for tokens in token_lists:
        for term in set(tokens):
            df_counts[term] = df_counts.get(term, 0) + 1
            if term not in vocab:
                vocab[term] = len(vocab)

    n_docs = len(docs)
    idf = np.zeros(len(vocab))
    for term, slot in vocab.items():
        idf[slot] = math.log(n_docs / df_counts[term])

    rows: list[int] = []
    cols: list[int] = []
    values: list[float] = []
    for i, tokens in enumerate(token_lists):
        counts: dict[int, int] = {}
        for term in tokens:
            counts[vocab[term]] = counts.get(vocab[term], 0) + 1
        for slot, count in counts.items():
            weight = count * idf[slot]
            if weight != 0.0:
                rows.append(i)
                cols.append(slot)
                values.append(weight)
    return sparse.csr_matrix((values, (rows, cols)), shape=(n_docs, max(len(vocab), 1)))


def cosine_matrix(matrix: sparse.csr_matrix | np.ndarray) -> np.ndarray:
    """Dense pairwise cosine matrix; zero vectors contribute 0 similarity."""
    if sparse.issparse(matrix):
        dense_norms = np.sqrt(matrix.multiply(matrix).sum(axis=1)).A.ravel()
        safe = np.where(dense_norms == 0.0, 1.0, dense_norms)
        normalized = sparse.diags(1.0 / safe) @ matrix
        sims = (normalized @ normalized.T).toarray()
    else:
        arr = np.asarray(matrix, dtype=np.float64)
        norms = np.linalg.norm(arr, axis=1)
        safe = np.where(norms == 0.0, 1.0, norms)
        normalized = arr / safe[:, None]
        sims = normalized @ normalized.T
    return sims


@dataclass(frozen=True)
class SimilarityStats:
    n_pairs: int
    mean: float
    median: float
    per_dimension: dict[str, float] = field(default_factory=dict)
    per_view: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_pairs": self.n_pairs,
            "mean": self.mean,
            "median": self.median,
            "per_dimension": dict(self.per_dimension),
            "per_view": dict(self.per_view),
        }


def exceeds_threshold(similarity: float, threshold: float) -> bool:
    """Rejection rule for similarity filters.

    Strictly greater-than, except that a threshold of 1.0 still catches
    exact duplicates (whose cosine may land a float ulp on either side of
    1.0).
    """
    return similarity > min(threshold, 1.0 - 1e-9)


def pair_scores(matrix: sparse.csr_matrix | np.ndarray) -> np.ndarray:
    """Upper-triangle pairwise cosine scores in row-major pair order."""
    n = matrix.shape[0]
    if n < 2:
        raise TooFewDocs(f"need at least 2 documents, got {n}")
    sims = cosine_matrix(matrix)
    return sims[np.triu_indices(n, k=1)]


def pairwise_cosine(matrix: sparse.csr_matrix | np.ndarray) -> SimilarityStats:
    """Mean/median cosine over all n*(n-1)/2 document pairs."""
    scores = pair_scores(matrix)
    return SimilarityStats(
        n_pairs=int(scores.size),
        mean=float(np.mean(scores)),
        median=float(np.median(scores)),
    )


def doc_pairwise_cosine(docs: list[str], tokenizer: str = "char_bigram") -> SimilarityStats:
    """TF-IDF pairwise cosine with document identity respected.

    Byte-identical documents always score 1.0, even when idf degenerates
    (every shared term universal, weight zero); pairs of distinct
    documents follow the plain vector cosine, including the
    zero-vector-scores-zero rule.
    """
    n = len(docs)
    if n < 2:
        raise TooFewDocs(f"need at least 2 documents, got {n}")
    sims = cosine_matrix(tfidf_vectors(docs, tokenizer))
    scores = []
    for i in range(n):
        for j in range(i + 1, n):
            scores.append(1.0 if docs[i] == docs[j] else float(sims[i, j]))
    arr = np.asarray(scores)
    return SimilarityStats(
        n_pairs=int(arr.size), mean=float(np.mean(arr)), median=float(np.median(arr))
    )


def profile_similarity(profiles: list[StudentProfile], tokenizer: str = "char_bigram") -> SimilarityStats:
    """Pairwise TF-IDF cosine over concatenated four-dimension profile texts."""
    return doc_pairwise_cosine([p.concatenated_text() for p in profiles], tokenizer)


def profile_dimension_similarity(
    profiles: list[StudentProfile], tokenizer: str = "char_bigram"
) -> SimilarityStats:
    """One TF-IDF/cosine run per profile dimension; overall stats use the
    concatenated text and per_dimension carries each dimension's mean."""
    if len(profiles) < 2:
        raise TooFewDocs("need at least 2 profiles")
    per_dimension: dict[str, float] = {}
    for dim in PROFILE_DIMENSION_KEYS:
        docs = [p.dimension_texts()[dim] for p in profiles]
        per_dimension[dim] = doc_pairwise_cosine(docs, tokenizer).mean
    overall = profile_similarity(profiles, tokenizer)
    return SimilarityStats(
        n_pairs=overall.n_pairs,
        mean=overall.mean,
        median=overall.median,
        per_dimension=per_dimension,
    )


# ---------------------------------------------------------------------------
# Embedding-based dialogue similarity
# ---------------------------------------------------------------------------


def session_view_texts(trajectories: list[StudentTrajectory]) -> dict[str, list[str]]:
    """The three per-session text views across the corpus, in corpus order."""
    views: dict[str, list[str]] = {view: [] for view in DIALOGUE_VIEWS}
    for traj in trajectories:
        for session in traj.sessions:
            views["full"].append(session.full_text())
            views["student_only"].append(session.student_text())
            views["counselor_only"].append(session.counselor_text())
    return views


def dialogue_similarity(
    trajectories: list[StudentTrajectory], embed_backend: "Backend"
) -> SimilarityStats:
    """Pairwise embedding cosine per dialogue view (full / student / counselor).

    With the mock embedder this checks pipeline correctness, not any
    particular published similarity level.
    """
    views = session_view_texts(trajectories)
    per_view: dict[str, float] = {}
    n_pairs = 0
    means: list[float] = []
    medians: list[float] = []
    for view in DIALOGUE_VIEWS:
        texts = views[view]
        vectors = embed_backend.embed(texts)
        matrix = np.vstack([v.as_array() for v in vectors])
        stats = pairwise_cosine(matrix)
        per_view[view] = stats.mean
        n_pairs = stats.n_pairs
        means.append(stats.mean)
        medians.append(stats.median)
    return SimilarityStats(
        n_pairs=n_pairs,
        mean=float(np.mean(means)),
        median=float(np.mean(medians)),
        per_view=per_view,
    )
