"""Text-generation and embedding backends.

Two interchangeable implementations sit behind the same interface: a live
JSON-over-HTTP chat backend, and a deterministic seeded mock that always
emits schema-valid output for the structured kinds (profile, event_graph,
summary, judge). The mock is what makes the whole pipeline testable end to
end with no network.

Mock determinism contract: every output is a pure function of
(backend seed, request digest), so concurrent workers cannot reorder
outcomes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from .errors import BudgetExceeded, ConfigError, EmptyText, TransportError
from .rng import derive_int, derive_rng

logger = logging.getLogger(__name__)

KIND_TAGS = ("profile", "event_graph", "student_turn", "counselor_turn", "summary", "judge", "free")


@dataclass(frozen=True)
class GenerationRequest:
    """One generation call: instruction pair plus decoding knobs."""

    system_prompt: str
    user_prompt: str
    temperature: float = 0.7
    seed: int | None = None
    max_length: int = 2048
    kind_tag: str = "free"

    def __post_init__(self) -> None:
        if not self.user_prompt:
            raise ValueError("user_prompt must be non-empty")
        if self.max_length <= 0:
            raise ValueError("max_length must be > 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.kind_tag not in KIND_TAGS:
            raise ValueError(f"unknown kind_tag {self.kind_tag!r}")

    def digest(self) -> str:
        """Stable SHA-256 over the full request, used for provenance."""
        payload = json.dumps(
            {
                "system_prompt": self.system_prompt,
                "user_prompt": self.user_prompt,
                "temperature": self.temperature,
                "seed": self.seed,
                "max_length": self.max_length,
                "kind_tag": self.kind_tag,
            },
            ensure_ascii=False,
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @classmethod
    def from_raw(cls, raw: "np.ndarray | list[float]") -> "EmbeddingVector":
        arr = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return cls(values=tuple((arr / norm).tolist()))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class Backend(Protocol):
    backend_id: str

    def generate(self, req: GenerationRequest) -> str: ...

    def embed(self, texts: list[str]) -> list[EmbeddingVector]: ...


# ---------------------------------------------------------------------------
# Backend configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    """Backend block of the pipeline config file."""

    type: str = "mock"
    endpoint: str = ""
    embed_endpoint: str = ""
    model: str = ""
    temperature: float = 0.7
    seed: int = 0
    max_attempts: int = 3
    backoff_base: float = 1.0
    timeout: float = 60.0
    api_key_env: str = "COUNSELSIM_API_KEY"
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    embedding_dim: int = 256

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackendConfig":
        known = {f: data[f] for f in cls.__dataclass_fields__ if f in data}
        cfg = cls(**known)
        if cfg.type not in ("mock", "live"):
            raise ConfigError(f"backend type must be 'mock' or 'live', got {cfg.type!r}")
        if cfg.type == "live" and not cfg.endpoint:
            raise ConfigError("live backend requires an endpoint")
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def make_backend(cfg: BackendConfig) -> "Backend":
    if cfg.type == "mock":
        return MockBackend(seed=cfg.seed, dim=cfg.embedding_dim)
    return HttpBackend(cfg)


# ---------------------------------------------------------------------------
# Mock content banks (Chinese campus counseling register)
# ---------------------------------------------------------------------------

_SURNAMES = "李王张刘陈杨赵黄周吴徐孙马朱胡郭何林罗郑梁宋谢唐韩冯邓曹彭"
_GIVEN = "晓雨辰宇欣怡涵嘉浩思婷雅文俊杰泽宁静雪敏芳丹磊莹鹏珊琪蕾航慧"

_PERSONALITY_TRAITS = (
    "偏内向，习惯把情绪藏在心里",
    "外向开朗，但非常在意他人评价",
    "追求完美，对自己要求苛刻",
    "敏感细腻，容易替别人着想",
    "理性克制，不轻易表露情绪",
    "随和好说话，却常常委屈自己",
)
_MBTI = ("INFP", "ISTJ", "ENFJ", "INTP", "ISFP", "ENTJ", "INFJ", "ESFP")
_COPING = (
    "压力大时倾向于独自消化",
    "遇到困难先回避、再硬扛",
    "靠运动和音乐缓解压力",
    "习惯向少数好友倾诉",
    "常用熬夜刷手机转移注意力",
    "压力下会反复复盘自责",
)

_REGIONS = ("南方小城", "北方县城", "省会城市", "沿海城市", "西部农村", "中部地级市")
_FAMILIES = (
    "普通工薪家庭，父母常年忙于工作",
    "单亲家庭，与母亲相依为命",
    "家中还有弟妹，背负着长姐长兄式的期待",
    "知识分子家庭，父母要求严格",
    "务农家庭，是家里第一个大学生",
    "经商家庭，父母聚少离多",
)
_SUPPORTS = (
    "在校内有一两位能说真心话的朋友",
    "与室友关系平淡，很少深入交流",
    "和一位高中好友保持线上联系",
    "社交圈较窄，平时多独来独往",
    "与辅导员有过几次正式谈话",
)

_CORE_CONFLICTS = {
    "学业压力": (
        "既害怕辜负父母的期待，又对持续内卷的学业感到力不从心",
        "渴望用成绩证明自己，却在一次次失利中不断自我否定",
        "明知道身体需要休息，却不敢在竞争中停下来",
    ),
    "人际关系": (
        "渴望被接纳，却因害怕受伤而不敢主动靠近他人",
        "想维持表面的和气，又压抑不住内心的委屈和愤怒",
        "习惯讨好别人换取关系，却越来越不认识自己",
    ),
    "职业发展": (
        "想走自己选的路，却不敢承担让家人失望的风险",
        "对未来有很多设想，却被现实的不确定感困住而无法行动",
        "既羡慕同学的去向，又怀疑自己是否真的想要同样的生活",
    ),
    "家庭与经济": (
        "想为家里分担压力，却发现自己此刻什么也改变不了",
        "既依赖家庭的支持，又因为花家里的钱而深感愧疚",
        "想逃离家庭的控制，又割舍不下对父母的牵挂",
    ),
    "身心健康": (
        "明知道身体在报警，却停不下对自己的高要求",
        "想要好起来，却连承认自己需要帮助都觉得羞耻",
        "害怕被贴上脆弱的标签，于是把不舒服都藏起来",
    ),
}

_EVENT_CONTENT = {
    "学业压力": (
        "高等数学期中考试成绩远低于预期，绩点被明显拉低",
        "毕业论文开题报告被导师要求大幅重写",
        "专业课小组作业无人配合，进度几乎停滞",
        "连续两周赶课程任务，作业越积越多",
        "收到挂科预警通知，补考压力陡增",
        "保研名额竞争白热化，每天都在比较中度过",
    ),
    "人际关系": (
        "和宿舍室友因作息问题爆发激烈争吵",
        "社团聚会上被明显边缘化，感觉融不进去",
        "与恋人因异地和时间分配问题陷入冷战",
        "听说好友在背后议论自己，心里疙瘩很大",
        "班级分组作业时没有人主动邀请自己",
    ),
    "职业发展": (
        "投出的几十份实习简历大多石沉大海",
        "一场重要的实习面试被拒，开始怀疑专业选择",
        "考研还是就业的抉择迟迟定不下来",
        "看到同学陆续拿到录用通知，落差感强烈",
        "职业规划课上被问到目标时大脑一片空白",
    ),
    "家庭与经济": (
        "生活费迟迟未到账，只能一再节衣缩食",
        "父母在电话里反复提起家里的经济困难",
        "课余兼职与课业冲突，身心俱疲",
        "家人突然生病住院，牵挂又使不上力",
        "父母对成绩和花销的双重追问让人喘不过气",
    ),
    "身心健康": (
        "连续多日失眠到凌晨，白天上课昏昏沉沉",
        "考试前出现明显的心悸和手抖",
        "食欲骤减，一个月内体重明显下降",
        "情绪低落到不想出门，翘了好几节课",
        "在自习室突然焦虑发作，坐立难安",
    ),
}

_IMPACT_PRIMARY = ("焦虑", "自我怀疑", "情绪低落", "委屈", "烦躁", "无力感", "紧张", "羞耻感")
_IMPACT_SECONDARY = (
    "开始回避相关的人和事",
    "夜里反复想到睡不着",
    "白天很难集中注意力",
    "对原本喜欢的事提不起兴趣",
    "一点小事就想发脾气",
    "不想让任何人知道",
)

_STUDENT_OPENERS = (
    "老师您好……最近{ev}，这几天我一直睡不踏实。",
    "我又来了。{ev}，我心里乱得厉害，不知道从哪说起。",
    "这周出了一件事：{ev}。我表面装作没事，其实挺难受的。",
    "说实话我犹豫了很久才来。{ev}，我怕自己再撑下去会出问题。",
)
_STUDENT_MIDDLE = (
    "其实我也想过{cope}，但真到那个时候就是做不到。",
    "我不太敢跟同学说这些，怕他们觉得我小题大做。",
    "您上次说的办法我试了一下，平时还行，可一遇到事还是会慌。",
    "一想到{ev}，胸口就发闷，道理我都懂，就是过不去。",
    "最让我难受的不是事情本身，而是觉得只有我处理不好。",
    "爸妈那边我完全不敢提，说了他们也只会更担心或者骂我。",
    "说到底可能还是那个老问题——{conflict}。",
)
_STUDENT_CLOSERS = (
    "听您这么说，我好像稍微松了一口气。",
    "我愿意试试您说的办法，虽然心里还是没底。",
    "那我这周先做一点点小的改变，下次再跟您说进展。",
    "谢谢您，至少现在我觉得这些感受是可以被理解的。",
)
_STUDENT_COPES = ("找朋友聊聊", "早点睡", "别去想它", "把事情写下来", "出去跑跑步")

_COUNSELOR_REFLECT = (
    "听起来{ev}这件事对你的冲击不小，你刚才提到自己{emo}，这样的反应其实很自然",
    "谢谢你愿意把{ev}说出来，我能感觉到这段时间你一直在独自硬撑，很不容易",
    "你描述{ev}的时候，我注意到你的语气里既有{emo}，也有一些自责",
    "从你的话里我听到，{ev}触动的可能不只是这一件事，还有你一直以来的担心",
    "{name}，{ev}带来的{emo}和你说过的“{conflict}”似乎一脉相承，我们可以一起看看",
)
_COUNSELOR_PROBE = (
    "能具体说说当时你脑子里闪过的第一个念头是什么吗？",
    "这种感觉最强烈的时刻，通常出现在什么时候？",
    "如果满分十分，你觉得这件事现在给你的压力有几分？",
    "在这件事里，有没有哪怕一小部分是你觉得自己还能做点什么的？",
)
_COUNSELOR_GUIDE = (
    "我们不急着解决所有问题，先把这件事和它带来的感受分开来看",
    "这周可以试着做一个小实验：{sug}，不求效果，只是观察发生了什么",
    "你提到的历史情况说明这种模式不是第一次出现，我们可以一起找找它的规律",
    "记得你不需要立刻变好，允许自己有一个过渡的阶段",
)
_COUNSELOR_WRAP = (
    "今天我们主要谈了{ev}，也看到了你在压力下仍然坚持求助的力量。",
    "这次会谈先到这里，你今天的表达比上次更清晰了，这本身就是变化。",
    "我们下次可以接着看这件事的进展，也看看上次遗留的问题有没有松动。",
)
_COUNSELOR_SUGGESTIONS = (
    "每天睡前写下三件让你情绪波动的事",
    "固定一个二十分钟的放松呼吸时间",
    "主动约一位信得过的朋友吃顿饭",
    "把大任务拆成三步以内的小步骤",
    "把想对父母说的话先写在纸上",
)

_EMOTIONS = ("焦虑", "低落", "委屈", "烦躁", "无力", "自责", "紧张")
_CONFLICT_STATUS = ("仍在持续", "有所缓解", "出现了新的触发点", "被这次事件进一步强化", "开始被正视")
_FOCUS = (
    "情绪的接纳与命名",
    "梳理事件与感受之间的联系",
    "探索可行的应对步骤",
    "巩固已有的支持资源",
    "松动过高的自我要求",
)
_UNRESOLVED = (
    "对后续进展的担忧尚未化解",
    "与相关人员的矛盾仍未当面处理",
    "长期的自我苛责模式还没有松动",
    "睡眠与情绪的相互影响仍需关注",
    "是否向家人坦白仍悬而未决",
)


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

_GENDER_RE = re.compile(r"Gender:\s*(\S+)")
_GRADE_RE = re.compile(r"Grade:\s*(\S+)")
_WEEKS_RE = re.compile(r"\((\d+) weeks\)")
_COUNT_RE = re.compile(r"containing (\d+)-(\d+) key events")
_DOMAIN_LIST_RE = re.compile(r"^\d+\. (\S+?) - ", re.MULTILINE)
_EVENT_LINE_RE = re.compile(r"\[当前事件\]\n(?:E\d+（[^）]*）：)?([^\n（]+)")
_ROUND_RE = re.compile(r"\[轮次\]\n(\d+)\s*/\s*(\d+)")
_JUDGE_DIM_RE = re.compile(r'"([^"]+)":\s*<0-5>')
_CONFLICT_RE = re.compile(r"核心心理冲突：(.+)")

_AGE_BANDS = {
    "大一": (17, 19),
    "大二": (18, 20),
    "大三": (19, 21),
    "大四": (20, 22),
    "研一": (22, 24),
    "研二": (23, 25),
}


class MockBackend:
    """Seeded offline stand-in for the generation and embedding services.

    Structured kinds emit JSON that always passes the downstream parser and
    validator; dialogue kinds emit template-filled Chinese text with seeded
    lexical variation so diversity analytics stay non-degenerate offline.
    """

    def __init__(self, seed: int = 0, dim: int = 256):
        self.seed = seed
        self.dim = dim
        self.backend_id = f"mock:{seed}"
        self._bigram_slots: dict[str, int] = {}

    # -- generation ---------------------------------------------------------

    def generate(self, req: GenerationRequest) -> str:
        rng = derive_rng(self.seed, req.digest())
        if req.kind_tag == "profile":
            return self._profile(req, rng)
        if req.kind_tag == "event_graph":
            return self._event_graph(req, rng)
        if req.kind_tag == "student_turn":
            return self._student_turn(req, rng)
        if req.kind_tag == "counselor_turn":
            return self._counselor_turn(req, rng)
        if req.kind_tag == "summary":
            return self._summary(req, rng)
        if req.kind_tag == "judge":
            return self._judge(req, rng)
        return f"好的，我明白了。（{rng.randrange(16**6):06x}）"

    def _profile(self, req: GenerationRequest, rng) -> str:
        prompt = req.user_prompt
        gender = _match(_GENDER_RE, prompt, "女")
        grade = _match(_GRADE_RE, prompt, "大二")
        domain = _match(re.compile(r"Category:\s*(\S+)"), prompt, "学业压力")
        lo, hi = _AGE_BANDS.get(grade, (18, 24))
        name = rng.choice(_SURNAMES) + "".join(rng.choice(_GIVEN) for _ in range(rng.randint(1, 2)))
        conflicts = _CORE_CONFLICTS.get(domain, _CORE_CONFLICTS["学业压力"])
        profile = {
            "name": name,
            "demographics": {
                "gender": gender,
                "age": rng.randint(lo, hi),
                "grade": grade,
                "major": _match(re.compile(r"Major:\s*(\S+)"), prompt, "工科"),
            },
            "personality": (
                f"{rng.choice(_PERSONALITY_TRAITS)}（{rng.choice(_MBTI)}型）；"
                f"{rng.choice(_COPING)}。"
            ),
            "background": f"来自{rng.choice(_REGIONS)}的{rng.choice(_FAMILIES)}；{rng.choice(_SUPPORTS)}。",
            "core_conflict": rng.choice(conflicts) + "。",
        }
        return json.dumps(profile, ensure_ascii=False, indent=2)

    def _event_graph(self, req: GenerationRequest, rng) -> str:
        prompt = req.user_prompt
        weeks_span = int(_match(_WEEKS_RE, prompt, "16"))
        count_match = _COUNT_RE.search(prompt)
        lo, hi = (int(count_match.group(1)), int(count_match.group(2))) if count_match else (10, 15)
        domains = _DOMAIN_LIST_RE.findall(prompt) or list(_EVENT_CONTENT)
        conflict = _match(_CONFLICT_RE, prompt, "")

        n = rng.randint(lo, hi)
        weeks = sorted(rng.randint(1, weeks_span) for _ in range(n))
        events = []
        for k in range(n):
            domain = rng.choice(domains)
            bank = _EVENT_CONTENT.get(domain, _EVENT_CONTENT["学业压力"])
            content = rng.choice(bank)
            if conflict and k == n - 1:
                content += f"，让人再次想到“{conflict[:12]}”的困扰"
            # stress trends upward across the semester with small jitter
            base = 3 + round(5 * k / max(1, n - 1))
            stress = max(1, min(10, base + rng.choice((-1, 0, 1))))
            caused_by: list[str] = []
            if k > 0 and rng.random() < 0.65:
                n_causes = rng.randint(1, min(2, k))
                caused_by = sorted(
                    (f"E{i + 1}" for i in rng.sample(range(k), n_causes)),
                    key=lambda e: int(e[1:]),
                )
            events.append(
                {
                    "id": f"E{k + 1}",
                    "week": weeks[k],
                    "domain": domain,
                    "event_content": content,
                    "psychological_impact": f"{rng.choice(_IMPACT_PRIMARY)}，{rng.choice(_IMPACT_SECONDARY)}",
                    "stress_level": stress,
                    "caused_by": caused_by,
                }
            )
        body = json.dumps(events, ensure_ascii=False, indent=1)
        shape = rng.random()
        if shape < 0.2:
            body = json.dumps({"events": events}, ensure_ascii=False, indent=1)
        elif shape < 0.4:
            body = f"```json\n{body}\n```"
        return body

    def _student_turn(self, req: GenerationRequest, rng) -> str:
        ev = _match(_EVENT_LINE_RE, req.user_prompt, "最近的事")[:30].rstrip("，。 ")
        conflict = _match(_CONFLICT_RE, req.user_prompt, "说不清的烦恼")[:24].rstrip("。")
        round_match = _ROUND_RE.search(req.user_prompt)
        r, total = (int(round_match.group(1)), int(round_match.group(2))) if round_match else (1, 4)
        if r == 1:
            text = rng.choice(_STUDENT_OPENERS).format(ev=ev)
        elif r == total:
            text = rng.choice(_STUDENT_CLOSERS)
        else:
            text = rng.choice(_STUDENT_MIDDLE).format(
                ev=ev, cope=rng.choice(_STUDENT_COPES), conflict=conflict
            )
        if rng.random() < 0.3:
            text += rng.choice(("真的有点撑不住了。", "我也说不清为什么会这样。", "可能是我想太多了吧。"))
        return text

    def _counselor_turn(self, req: GenerationRequest, rng) -> str:
        ev = _match(_EVENT_LINE_RE, req.user_prompt, "这件事")[:20].rstrip("，。 ")
        name = _match(re.compile(r"姓名：(\S+)"), req.user_prompt, "同学")
        conflict = _match(_CONFLICT_RE, req.user_prompt, "长期的压力")[:20].rstrip("。")
        round_match = _ROUND_RE.search(req.user_prompt)
        r, total = (int(round_match.group(1)), int(round_match.group(2))) if round_match else (1, 4)
        emo = rng.choice(_EMOTIONS)
        parts = [rng.choice(_COUNSELOR_REFLECT).format(ev=ev, emo=emo, name=name, conflict=conflict) + "。"]
        if r < total:
            parts.append(rng.choice(_COUNSELOR_PROBE))
            parts.append(rng.choice(_COUNSELOR_GUIDE).format(sug=rng.choice(_COUNSELOR_SUGGESTIONS)) + "。")
        else:
            parts.append(rng.choice(_COUNSELOR_GUIDE).format(sug=rng.choice(_COUNSELOR_SUGGESTIONS)) + "。")
            parts.append(rng.choice(_COUNSELOR_WRAP).format(ev=ev))
        return "".join(parts)

    def _summary(self, req: GenerationRequest, rng) -> str:
        ev = _match(_EVENT_LINE_RE, req.user_prompt, "").strip("，。 ")
        summary = {
            "stress_event": ev or "围绕本周主要压力事件的会谈",
            "dominant_emotion": f"以{rng.choice(_EMOTIONS)}为主，夹杂{rng.choice(_EMOTIONS)}",
            "core_conflict_status": rng.choice(_CONFLICT_STATUS),
            "counseling_focus": rng.choice(_FOCUS),
            "unresolved_issues": rng.choice(_UNRESOLVED),
        }
        return json.dumps(summary, ensure_ascii=False, indent=1)

    def _judge(self, req: GenerationRequest, rng) -> str:
        dims = _JUDGE_DIM_RE.findall(req.user_prompt) or ["Overall"]
        return json.dumps({d: rng.randint(3, 5) for d in dims}, ensure_ascii=False)

    # -- embedding ----------------------------------------------------------

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        """Seeded feature hash of character bigrams, L2-normalized.

        Bigrams avoid a word-segmentation dependency for Chinese text; a
        single-character text falls back to the character itself so the
        vector is never zero.
        """
        vectors = []
        for i, text in enumerate(texts):
            if not text:
                raise EmptyText(f"embed input {i} is empty")
            counts = np.zeros(self.dim, dtype=np.float64)
            features = [text[j : j + 2] for j in range(len(text) - 1)] if len(text) > 1 else [text]
            for feat in features:
                slot = self._bigram_slots.get(feat)
                if slot is None:
                    slot = derive_int(self.seed, "embed", feat) % self.dim
                    self._bigram_slots[feat] = slot
                counts[slot] += 1.0
            vectors.append(EmbeddingVector.from_raw(counts))
        return vectors


def _match(pattern: re.Pattern, text: str, default: str) -> str:
    m = pattern.search(text)
    return m.group(1).strip() if m else default


# ---------------------------------------------------------------------------
# Live HTTP backend
# ---------------------------------------------------------------------------


class HttpBackend:
    """Chat-style JSON-over-HTTP backend with exponential-backoff retries.

    Retries cover transport failures, 429, and 5xx responses; deterministic
    failures (other 4xx) raise immediately. The credential is read from the
    environment variable named in the config.
    """

    RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(self, cfg: BackendConfig):
        import httpx

        api_key = os.environ.get(cfg.api_key_env, "")
        if not api_key:
            raise ConfigError(f"missing credential: set {cfg.api_key_env}")
        self.cfg = cfg
        self.backend_id = f"live:{cfg.model or cfg.endpoint}"
        headers = {cfg.auth_header: f"{cfg.auth_scheme} {api_key}".strip()}
        self._client = httpx.Client(headers=headers, timeout=cfg.timeout)

    def generate(self, req: GenerationRequest) -> str:
        payload: dict[str, Any] = {
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_length,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        data = self._post_with_retries(self.cfg.endpoint, payload)
        return self._extract_text(data)

    def embed(self, texts: list[str]) -> list[EmbeddingVector]:
        for i, text in enumerate(texts):
            if not text:
                raise EmptyText(f"embed input {i} is empty")
        endpoint = self.cfg.embed_endpoint or self.cfg.endpoint
        data = self._post_with_retries(endpoint, {"model": self.cfg.model, "input": texts})
        try:
            rows = [item["embedding"] for item in data["data"]]
        except (KeyError, TypeError) as exc:
            raise TransportError(f"unexpected embedding response shape: {exc}") from None
        if len(rows) != len(texts):
            raise TransportError(f"expected {len(texts)} embeddings, got {len(rows)}")
        return [EmbeddingVector.from_raw(row) for row in rows]

    def _post_with_retries(self, url: str, payload: dict[str, Any]) -> dict[str, Any]:
        import httpx

        last_error = ""
        for attempt in range(self.cfg.max_attempts):
            if attempt:
                time.sleep(self.cfg.backoff_base * 2 ** (attempt - 1))
            try:
                response = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                last_error = f"transport failure: {exc}"
                logger.warning("backend attempt %d/%d failed: %s", attempt + 1, self.cfg.max_attempts, exc)
                continue
            if response.status_code == 200:
                return response.json()
            if response.status_code in self.RETRYABLE_STATUS:
                last_error = f"status {response.status_code}"
                logger.warning(
                    "backend attempt %d/%d got status %d",
                    attempt + 1,
                    self.cfg.max_attempts,
                    response.status_code,
                )
                continue
            raise TransportError(f"non-retryable status {response.status_code}: {response.text[:200]}")
        raise TransportError(f"failed after {self.cfg.max_attempts} attempts ({last_error})")

    @staticmethod
    def _extract_text(data: dict[str, Any]) -> str:
        try:
            choice = data["choices"][0]
            if choice.get("finish_reason") == "length":
                raise BudgetExceeded("response truncated by length budget")
            message = choice.get("message", {})
            text = message.get("content") or choice.get("text") or ""
        except (KeyError, IndexError, TypeError):
            text = data.get("content") or data.get("output") or ""
        if not isinstance(text, str) or not text:
            raise TransportError("backend reply contained no text")
        return text
