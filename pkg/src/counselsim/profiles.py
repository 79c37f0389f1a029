"""Student profile construction.

Pipeline: stratified attribute sampling over the configured space,
constrained generation from a fixed prompt template, tolerant parsing with
attribute correction, and similarity/validity filtering of the result set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .domain import (
    DEFAULT_AGE_MAX,
    DEFAULT_AGE_MIN,
    Demographics,
    Provenance,
    StudentProfile,
    validate_profile,
)
from .errors import GenerationExhausted, ParseError, TemplateError
from .rng import derive_int, derive_rng
from .textutil import strip_code_fences

if TYPE_CHECKING:
    from .backends import Backend, GenerationRequest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttributeSpace:
    """Legal values for the sampled profile attributes.

    ``stress_domains`` must contain exactly the five campus stress domains;
    ``domain_descriptions`` supplies the descriptive text substituted into
    the generation prompt for each domain.
    """

    genders: tuple[str, ...]
    grades: tuple[str, ...]
    majors: tuple[str, ...]
    stress_domains: tuple[str, ...]
    domain_descriptions: dict[str, str] = field(default_factory=dict)
    age_min: int = DEFAULT_AGE_MIN
    age_max: int = DEFAULT_AGE_MAX

    def __post_init__(self) -> None:
        if not (self.genders and self.grades and self.majors):
            raise ValueError("attribute lists must be non-empty")
        if len(self.stress_domains) != 5:
            raise ValueError("exactly five stress domains are required")

    def to_dict(self) -> dict[str, Any]:
        return {
            "genders": list(self.genders),
            "grades": list(self.grades),
            "majors": list(self.majors),
            "stress_domains": list(self.stress_domains),
            "domain_descriptions": dict(self.domain_descriptions),
            "age_min": self.age_min,
            "age_max": self.age_max,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AttributeSpace":
        return cls(
            genders=tuple(data["genders"]),
            grades=tuple(data["grades"]),
            majors=tuple(data["majors"]),
            stress_domains=tuple(data["stress_domains"]),
            domain_descriptions=dict(data.get("domain_descriptions", {})),
            age_min=int(data.get("age_min", DEFAULT_AGE_MIN)),
            age_max=int(data.get("age_max", DEFAULT_AGE_MAX)),
        )


DEFAULT_ATTRIBUTE_SPACE = AttributeSpace(
    genders=("男", "女"),
    grades=("大一", "大二", "大三", "大四", "研一", "研二"),
    majors=("文科", "理科", "工科", "商科", "艺术", "医学"),
    stress_domains=("学业压力", "人际关系", "职业发展", "家庭与经济", "身心健康"),
    domain_descriptions={
        "学业压力": "课程难度、考试与论文压力，例如挂科风险、绩点竞争、毕业论文受阻。",
        "人际关系": "校园人际困扰，例如宿舍矛盾、被孤立、亲密关系冲突。",
        "职业发展": "前途不确定引发的压力，例如实习碰壁、求职焦虑、考研抉择。",
        "家庭与经济": "家庭与经济负担，例如生活费紧张、家庭变故、父母期望过高。",
        "身心健康": "身体与情绪状态问题，例如失眠、饮食紊乱、焦虑发作。",
    },
)


@dataclass(frozen=True)
class AttributeTuple:
    gender: str
    grade: str
    major: str
    stress_domain: str

    def to_dict(self) -> dict[str, str]:
        return {
            "gender": self.gender,
            "grade": self.grade,
            "major": self.major,
            "stress_domain": self.stress_domain,
        }


def sample_attributes(space: AttributeSpace, count: int, seed: int) -> list[AttributeTuple]:
    """Deterministic stratified sample of ``count`` attribute tuples.

    Stratification is over stress domain (per-domain counts differ by at
    most one). Within a domain, gender, grade, and major cycle round-robin
    over independent seeded shuffles so small samples still cover the space.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    tuples: list[AttributeTuple] = []
    n_domains = len(space.stress_domains)
    for d, domain in enumerate(space.stress_domains):
        quota = count // n_domains + (1 if d < count % n_domains else 0)
        rng = derive_rng(seed, "attributes", domain)
        genders = list(space.genders)
        grades = list(space.grades)
        majors = list(space.majors)
        rng.shuffle(genders)
        rng.shuffle(grades)
        rng.shuffle(majors)
        for j in range(quota):
            tuples.append(
                AttributeTuple(
                    gender=genders[j % len(genders)],
                    grade=grades[j % len(grades)],
                    major=majors[j % len(majors)],
                    stress_domain=domain,
                )
            )
    return tuples


# ---------------------------------------------------------------------------
# Prompt rendering and parsing
# ---------------------------------------------------------------------------

PROFILE_SYSTEM_PROMPT = (
    "You are a professional psychology research assistant responsible for creating "
    "realistic and diverse psychological profiles of college students."
)

PROFILE_PROMPT_TEMPLATE = """Please generate a user profile that reflects real-life college students based on your understanding of this population.
Requirements:
1. The profile should be realistic and credible, reflecting the actual situation of contemporary college students;
2. It should include diverse backgrounds, personalities, and psychological difficulties;
3. Avoid stereotypes and show individual uniqueness;
4. Psychological difficulties should be specific and have depth;
5. Output in Chinese;
6. The output must conform to the specified JSON format.
Please generate a detailed psychological profile of a college student.
You must strictly follow the following specified attributes:
1. Gender: {gender}
2. Major: {major}
3. Grade: {year}
4. Category: {category_name}
Detailed category description:
{category_desc}
Please ensure that the profile includes:
1. Basic information: name, gender, age, grade, major;
2. Personality traits: describe them in an MBTI or Big Five style and specify stress-coping mechanisms;
3. Family and social background: include possible factors that may lead to psychological risks;
4. Core psychological conflict or difficulty: summarize the student's main internal conflict in one sentence, and ensure that it is related to the corresponding stress domain.
Please strictly output according to the JSON schema and do not add additional explanations.
JSON schema:
{{"name": string, "demographics": {{"gender": string, "age": integer, "grade": string, "major": string}}, "personality": string, "background": string, "core_conflict": string}}"""


def render_profile_prompt(
    attrs: AttributeTuple,
    space: AttributeSpace,
    seed: int = 0,
    temperature: float = 0.9,
    max_length: int = 2048,
) -> "GenerationRequest":
    from .backends import GenerationRequest

    description = space.domain_descriptions.get(attrs.stress_domain)
    if not description:
        raise TemplateError(f"no description configured for domain {attrs.stress_domain!r}")
    user_prompt = PROFILE_PROMPT_TEMPLATE.format(
        gender=attrs.gender,
        major=attrs.major,
        year=attrs.grade,
        category_name=attrs.stress_domain,
        category_desc=description,
    )
    return GenerationRequest(
        system_prompt=PROFILE_SYSTEM_PROMPT,
        user_prompt=user_prompt,
        temperature=temperature,
        seed=seed,
        max_length=max_length,
        kind_tag="profile",
    )


_REQUIRED_FIELDS = ("name", "demographics", "personality", "background", "core_conflict")
_REQUIRED_DEMOGRAPHICS = ("gender", "age", "grade", "major")


def parse_profile(
    raw: str,
    attrs: AttributeTuple,
    student_id: str = "S000",
    provenance: Provenance | None = None,
) -> StudentProfile:
    """Parse a generator reply into a StudentProfile.

    Grade and major are overwritten with the sampled attributes whenever the
    reply disagrees; stress domain always comes from the sample. Raises
    ParseError on malformed JSON or missing fields so the caller can
    regenerate.
    """
    try:
        data = json.loads(strip_code_fences(raw))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"profile reply is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ParseError("profile reply must be a JSON object")
    for name in _REQUIRED_FIELDS:
        if name not in data or data[name] in (None, "", {}):
            raise ParseError(f"profile reply missing {name}")
    demo_raw = data["demographics"]
    if not isinstance(demo_raw, dict):
        raise ParseError("demographics must be a JSON object")
    for name in _REQUIRED_DEMOGRAPHICS:
        if name not in demo_raw or demo_raw[name] in (None, ""):
            raise ParseError(f"demographics missing {name}")
    try:
        age = int(demo_raw["age"])
    except (TypeError, ValueError):
        raise ParseError(f"non-integer age: {demo_raw['age']!r}") from None

    demographics = Demographics(
        gender=str(demo_raw["gender"]),
        age=age,
        grade=attrs.grade,
        major=attrs.major,
    )
    return StudentProfile(
        student_id=student_id,
        name=str(data["name"]),
        demographics=demographics,
        personality=str(data["personality"]),
        background=str(data["background"]),
        core_conflict=str(data["core_conflict"]),
        stress_domain=attrs.stress_domain,
        provenance=provenance or Provenance(seed=0, backend_id="unknown", prompt_digest=""),
    )


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RejectedProfile:
    profile: StudentProfile
    reason: str
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "student_id": self.profile.student_id,
            "reason": self.reason,
            "detail": self.detail,
        }


def filter_profiles(
    profiles: list[StudentProfile],
    threshold: float = 0.6,
    space: AttributeSpace = DEFAULT_ATTRIBUTE_SPACE,
    campus_keywords: list[str] | None = None,
) -> tuple[list[StudentProfile], list[RejectedProfile]]:
    """Greedy first-kept-wins filtering of a profile batch.

    Profiles failing validation are rejected with the finding category as
    the reason. A profile whose concatenated four-dimension TF-IDF cosine
    against any already-kept profile exceeds ``threshold`` is rejected as
    Repetition. ``campus_keywords``, when given, rejects profiles that
    mention none of the keywords (WeakCampusRelevance); the check is off
    by default for offline runs.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError("threshold must be in (0, 1]")
    from .analytics import cosine_matrix, exceeds_threshold, tfidf_vectors

    kept: list[StudentProfile] = []
    kept_positions: list[int] = []
    rejected: list[RejectedProfile] = []

    docs = [p.concatenated_text() for p in profiles]
    sims = None
    if len(docs) >= 2 and all(d.strip() for d in docs):
        sims = cosine_matrix(tfidf_vectors(docs))

    for i, profile in enumerate(profiles):
        report = validate_profile(profile, space)
        if not report.ok:
            finding = report.findings[0]
            rejected.append(RejectedProfile(profile, finding.category, finding.location))
            continue
        if campus_keywords is not None and not any(
            kw in profile.concatenated_text() for kw in campus_keywords
        ):
            rejected.append(RejectedProfile(profile, "WeakCampusRelevance"))
            continue
        clash = None
        for j in kept_positions:
            # exact duplicates are repetition even when idf degenerates
            # (a term present in every document weighs zero)
            if docs[i] == docs[j] or (sims is not None and exceeds_threshold(sims[i, j], threshold)):
                clash = profiles[j].student_id
                break
        if clash is not None:
            rejected.append(RejectedProfile(profile, "Repetition", f"too similar to {clash}"))
            continue
        kept.append(profile)
        kept_positions.append(i)
    return kept, rejected


# ---------------------------------------------------------------------------
# Generation orchestration
# ---------------------------------------------------------------------------


def generate_profile(
    attrs: AttributeTuple,
    space: AttributeSpace,
    backend: "Backend",
    student_id: str,
    seed: int,
    attempt_budget: int = 3,
) -> tuple[StudentProfile, str]:
    """Render, generate, and parse one profile, retrying on parse failures.

    Returns the profile and the prompt digest of the successful attempt.
    Raises GenerationExhausted after the attempt budget.
    """
    last_error: Exception | None = None
    for attempt in range(attempt_budget):
        request = render_profile_prompt(attrs, space, seed=derive_int(seed, "profile", attempt))
        raw = backend.generate(request)
        provenance = Provenance(
            seed=request.seed or 0, backend_id=backend.backend_id, prompt_digest=request.digest()
        )
        try:
            profile = parse_profile(raw, attrs, student_id=student_id, provenance=provenance)
            return profile, request.digest()
        except ParseError as exc:
            last_error = exc
            logger.warning("profile parse failed for %s (attempt %d): %s", student_id, attempt + 1, exc)
    raise GenerationExhausted(f"profile generation failed for {student_id}: {last_error}")
