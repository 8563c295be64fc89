"""Uniform access to chat-completion and embedding backends.

Three backend kinds are supported:

* ``http_chat`` / ``http_embed`` -- any endpoint speaking the common
  chat-completions / embeddings JSON shape;
* ``mock`` -- a pure-deterministic in-process stand-in used by the test
  suite and by ``--backend mock`` runs.

The mock contract (relied on by tests across the package):

* embeddings are hashed bag-of-words vectors of fixed dim 64, L2-normalized;
* summarization templates return ``"SUM:"`` plus the space-joined input
  texts, each input truncated to 512 bytes;
* relevance templates answer with the indices of candidates sharing at
  least one content word (length >= 4, case-folded) with the query --
  which makes relevance monotone under text containment with preserved
  word boundaries, the property the retrieval oracle tests lean on;
* fact-extraction templates return the session's user-turn sentences
  verbatim, one per line;
* generation templates return templated pseudo-text seeded by a CRC of the
  template id and variables, so identical inputs give byte-identical
  output on every platform.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass, field

import httpx

from .errors import BackendUnavailable, EmptyInput
from .model import EmbeddingVector, content_words, parse_transcript, words, USER
from .prompts import (
    FAMILY_ANSWER,
    FAMILY_EXTRACT,
    FAMILY_JUDGE,
    FAMILY_RELEVANCE,
    FAMILY_SUMMARIZE,
    FAMILY_VERIFY,
    PromptTemplate,
)
from .model import split_sentences
from .tokens import Tokenizer, count_tokens

logger = logging.getLogger(__name__)

KIND_HTTP_CHAT = "http_chat"
KIND_HTTP_EMBED = "http_embed"
KIND_MOCK = "mock"

ROLE_GENERATOR = "generator_m1"
ROLE_FRAMEWORK = "framework_m2"
ROLE_EMBEDDER = "embedder_e"
ROLE_JUDGE = "judge"

MOCK_EMBED_DIM = 64
MOCK_SUMMARY_UNIT_BYTES = 512

# Decoding defaults: deterministic for framework/judging roles, diverse for
# dataset generation.
_ROLE_TEMPERATURE = {
    ROLE_GENERATOR: 0.8,
    ROLE_FRAMEWORK: 0.0,
    ROLE_EMBEDDER: 0.0,
    ROLE_JUDGE: 0.0,
}


@dataclass(frozen=True)
class BackendProfile:
    kind: str
    role: str
    endpoint: str = ""
    model_name: str = ""
    api_key_env: str = ""
    max_retries: int = 3
    timeout: float = 60.0
    temperature: float | None = None

    def __post_init__(self):
        if self.kind not in (KIND_HTTP_CHAT, KIND_HTTP_EMBED, KIND_MOCK):
            raise ValueError(f"unknown backend kind: {self.kind!r}")
        if self.kind != KIND_MOCK and not (self.endpoint and self.model_name):
            raise ValueError(f"{self.kind} profile requires endpoint and model_name")

    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return _ROLE_TEMPERATURE.get(self.role, 0.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "role": self.role,
            "endpoint": self.endpoint,
            "model_name": self.model_name,
            "api_key_env": self.api_key_env,
            "max_retries": self.max_retries,
            "timeout": self.timeout,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BackendProfile":
        return cls(**{k: obj[k] for k in (
            "kind", "role", "endpoint", "model_name", "api_key_env",
            "max_retries", "timeout", "temperature") if k in obj})


@dataclass(frozen=True)
class ProfileSet:
    """One backend profile per role, as bound by a run configuration."""

    generator: BackendProfile
    framework: BackendProfile
    embedder: BackendProfile
    judge: BackendProfile

    @classmethod
    def mock(cls) -> "ProfileSet":
        return cls(
            generator=BackendProfile(kind=KIND_MOCK, role=ROLE_GENERATOR),
            framework=BackendProfile(kind=KIND_MOCK, role=ROLE_FRAMEWORK),
            embedder=BackendProfile(kind=KIND_MOCK, role=ROLE_EMBEDDER),
            judge=BackendProfile(kind=KIND_MOCK, role=ROLE_JUDGE),
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "ProfileSet":
        return cls(
            generator=BackendProfile.from_dict({"role": ROLE_GENERATOR, **obj[ROLE_GENERATOR]}),
            framework=BackendProfile.from_dict({"role": ROLE_FRAMEWORK, **obj[ROLE_FRAMEWORK]}),
            embedder=BackendProfile.from_dict({"role": ROLE_EMBEDDER, **obj[ROLE_EMBEDDER]}),
            judge=BackendProfile.from_dict({"role": ROLE_JUDGE, **obj[ROLE_JUDGE]}),
        )


@dataclass(frozen=True)
class CallRecord:
    role: str
    template_id: str
    prompt_tokens: int
    completion_tokens: int
    latency: float
    retry_count: int

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


@dataclass(frozen=True)
class ChatResult:
    text: str
    record: CallRecord


# -- deterministic mock backend ----------------------------------------------


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8")) & 0xFFFFFFFF


def _seed_of(template_id: str, vars: dict[str, str]) -> int:
    canon = json.dumps({k: str(v) for k, v in vars.items()}, sort_keys=True)
    return _crc(template_id + "\x00" + canon)


_SYLLABLES = [
    "bal", "rek", "mon", "tir", "luv", "ser", "kol", "dran",
    "pev", "gor", "zil", "fam", "nur", "wis", "hax", "quel",
]


def pseudo_word(seed: int, salt: int) -> str:
    """A pronounceable 3-syllable pseudo word, at least 9 characters long."""
    x = (seed * 2654435761 + salt * 40503 + 12345) & 0xFFFFFFFF
    parts = []
    for _ in range(3):
        parts.append(_SYLLABLES[x % len(_SYLLABLES)])
        x //= len(_SYLLABLES)
    return "".join(parts)


def pseudo_words(seed: int, n: int, salt: int = 0) -> list[str]:
    return [pseudo_word(seed, salt * 101 + i) for i in range(n)]


def mock_embed_text(text: str) -> EmbeddingVector:
    """Hashed bag-of-words embedding: dim 64, L2-normalized, all-platform stable."""
    vec = [0.0] * MOCK_EMBED_DIM
    for w in words(text):
        vec[_crc(w) % MOCK_EMBED_DIM] += 1.0
    norm = sum(v * v for v in vec) ** 0.5
    if norm > 0.0:
        vec = [v / norm for v in vec]
    return EmbeddingVector.of(vec)


_NUMBERED_RE = re.compile(r"^\s*(\d+)[.):]\s*(.*)$")


def parse_numbered(block: str) -> list[tuple[int, str]]:
    out = []
    for line in block.splitlines():
        m = _NUMBERED_RE.match(line)
        if m and m.group(2).strip():
            out.append((int(m.group(1)), m.group(2).strip()))
    return out


# Fixed glue vocabulary for generated pseudo-text. Kept disjoint from the
# content words of generated questions so that glue never creates spurious
# lexical overlap between queries and unrelated sessions.
_DIALOGUE_STOPSET = {"this", "person", "that", "with", "have", "been", "from", "they"}


def _scenario_terms(text: str) -> list[str]:
    seen = []
    for w in words(text):
        if len(w) >= 4 and w not in _DIALOGUE_STOPSET and w not in seen:
            seen.append(w)
    return seen


def bridge_word(reason: str) -> str:
    """The one reason term the mock question leaks.

    A genuine model links a question to an implicit scenario by reasoning;
    the lexical mock stands that ability in with a single shared content
    word, chosen deterministically among the longest scenario terms.
    """
    terms = _scenario_terms(reason)
    if not terms:
        return "matters"
    ranked = sorted(terms, key=lambda w: (-len(w), w))[:3]
    return ranked[_crc(reason) % len(ranked)]


def _trait_predicate_words(trait: str, limit: int = 2) -> list[str]:
    # Tail words are the trait-specific ones ("enjoys vintage cameras" ->
    # "vintage cameras"); the leading verb is shared by most traits.
    terms = [w for w in words(trait) if len(w) >= 4 and w not in _DIALOGUE_STOPSET]
    return terms[-limit:] or ["routine"]


def _mock_summarize(vars: dict[str, str]) -> str:
    items = [ln for ln in vars.get("text", "").split("\n") if ln.strip()]
    clipped = []
    for item in items:
        raw = item.encode("utf-8")[:MOCK_SUMMARY_UNIT_BYTES]
        clipped.append(raw.decode("utf-8", errors="ignore"))
    return "SUM:" + " ".join(clipped)


def _mock_relevance(vars: dict[str, str]) -> str:
    query_terms = content_words(vars.get("query", ""))
    hits = []
    for idx, text in parse_numbered(vars.get("candidates", "")):
        if query_terms & content_words(text):
            hits.append(str(idx))
    return ", ".join(hits) if hits else "NONE"


def _mock_extract(vars: dict[str, str]) -> str:
    try:
        turns = parse_transcript(vars.get("transcript", ""))
    except ValueError:
        return ""
    facts = []
    for t in turns:
        if t.role == USER:
            facts.extend(split_sentences(t.text))
    return "\n".join(facts)


def _mock_verify(vars: dict[str, str]) -> str:
    x = _crc(vars.get("trait", "") + "|" + vars.get("scenario", "")) % 8
    if x == 0:
        return "uncertain"
    if x == 1:
        return "no"
    return "yes"


def _mock_judge(vars: dict[str, str]) -> str:
    shared = content_words(vars.get("predicted", "")) & content_words(vars.get("gold", ""))
    return "YES" if shared else "NO"


def _mock_answer(vars: dict[str, str]) -> str:
    context = vars.get("context", "")
    clipped = context.encode("utf-8")[:300].decode("utf-8", errors="ignore")
    return "Based on the retrieved notes: " + clipped


def _mock_persona_breakdown(vars: dict[str, str]) -> str:
    persona = vars.get("persona", "")
    seed = _crc(persona)
    terms = [w for w in words(persona) if len(w) >= 4]
    while len(terms) < 4:
        terms.append(pseudo_word(seed, len(terms)))
    everyday = f"This person enjoys {terms[0]} {terms[1]}."
    career = f"This person is involved with {terms[2]} {terms[3]}."
    payload = {
        "everyday_life_and_hobbies": [everyday],
        "career_life_and_goals": [career],
    }
    return "```json\n" + json.dumps(payload, indent=2) + "\n```"


def _mock_reasons(template_id: str, vars: dict[str, str]) -> str:
    seed = _seed_of(template_id, vars)
    n = int(vars.get("n", 20))
    lines = []
    for i in range(1, n + 1):
        w = pseudo_words(seed + i, 5)
        lines.append(f"{i}: I got stuck on {w[0]} {w[1]} at my {w[2]} spot due to {w[3]} {w[4]}.")
    return "\n".join(lines)


def _mock_opposed_question(vars: dict[str, str]) -> str:
    trait = vars.get("trait", "")
    reason = vars.get("reason", "")
    p = _trait_predicate_words(trait, limit=2)
    bridge = bridge_word(reason)
    preds = " ".join(p)
    return f"Lately, how should I organise my {preds} activities while {bridge} is ongoing?"


def _mock_select(vars: dict[str, str]) -> str:
    options = parse_numbered(vars.get("options", ""))
    if not options:
        return ""
    pick = _crc(vars.get("trait", "")) % len(options)
    return options[pick][1]


def _mock_distractors(template_id: str, vars: dict[str, str]) -> str:
    # Each distractor shares ~5 content words with the question so that its
    # similarity robustly exceeds the gold scenario's single leaked term.
    seed = _seed_of(template_id, vars)
    q_terms = sorted(w for w in content_words(vars.get("question", "")) if w not in _DIALOGUE_STOPSET)
    p_terms = _trait_predicate_words(vars.get("trait", ""), limit=2)
    n = int(vars.get("n", 5))
    lines = []
    for i in range(1, n + 1):
        filler = pseudo_word(seed, i)
        if q_terms:
            qa, qb, qc = (q_terms[(seed + i + j) % len(q_terms)] for j in range(3))
        else:
            qa, qb, qc = "plans", "ideas", "outings"
        pa = p_terms[0]
        pb = p_terms[-1]
        lines.append(f"{i}: My {pa} {pb} circle keeps {qa} {qb} {qc} meetups on my {filler} plans.")
    return "\n".join(lines)


def _mock_dialogue(template_id: str, vars: dict[str, str]) -> str:
    scenario = vars.get("scenario", "")
    seed = _seed_of(template_id, vars)
    terms = _scenario_terms(scenario) or [pseudo_word(seed, 99)]

    def term(i: int) -> str:
        return terms[i % len(terms)]

    # Warm-up turns use session-unique pseudo words; the scenario appears
    # only from turn 5 on, and the three scenario lines cover up to eight
    # scenario terms so every term reaches the extracted facts.
    warm = pseudo_words(seed, 5, salt=7)
    lines = [
        f"Speaker1: Hi, my {warm[0]} {warm[1]} kept me busy.",
        "Assistant: Good to hear, go on.",
        f"Speaker1: Mostly {warm[2]} {warm[3]} and a bit of {warm[4]}.",
        "Assistant: Sounds like a full stretch, anything else?",
        f"Speaker1: Honestly, {term(0)} {term(1)} shapes my days now.",
        "Assistant: I see, that matters, tell me more.",
        f"Speaker1: Yes, {term(2)} {term(3)} and {term(4)} keep coming up again.",
        "Assistant: Understood, noted for later.",
        f"Speaker1: I rely on {term(5)} with {term(6)} and {term(7)} these days.",
        "Assistant: Makes sense, good luck with it.",
    ]
    return "\n".join(lines)


def _mock_generic(template_id: str, vars: dict[str, str]) -> str:
    w = pseudo_words(_seed_of(template_id, vars), 4)
    return f"Noted: {w[0]} {w[1]} relates to {w[2]} {w[3]}."


def mock_complete(template: PromptTemplate, vars: dict[str, str]) -> str:
    """Pure-deterministic completion for the mock backend."""
    fam = template.family
    if fam == FAMILY_SUMMARIZE:
        return _mock_summarize(vars)
    if fam == FAMILY_RELEVANCE:
        return _mock_relevance(vars)
    if fam == FAMILY_EXTRACT:
        return _mock_extract(vars)
    if fam == FAMILY_VERIFY:
        return _mock_verify(vars)
    if fam == FAMILY_JUDGE:
        return _mock_judge(vars)
    if fam == FAMILY_ANSWER:
        return _mock_answer(vars)
    handler = {
        "persona_breakdown": _mock_persona_breakdown,
        "opposed_question": _mock_opposed_question,
        "select_reason": _mock_select,
    }.get(template.template_id)
    if handler is not None:
        return handler(vars)
    if template.template_id in ("opposed_reasons", "supportive_reasons"):
        return _mock_reasons(template.template_id, vars)
    if template.template_id == "distractor_scenarios":
        return _mock_distractors(template.template_id, vars)
    if template.template_id == "session_dialogue":
        return _mock_dialogue(template.template_id, vars)
    return _mock_generic(template.template_id, vars)


# -- fixture record/replay ----------------------------------------------------


class FixtureStore:
    """Recorded backend responses for bit-reproducible runs.

    In replay mode every chat/embed call must hit a recorded key; in record
    mode calls pass through to the real backend and are written down.
    """

    def __init__(self, path: str, record: bool = False):
        self.path = path
        self.record = record
        self._lock = threading.Lock()
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                self._data: dict = json.load(fh)
        else:
            self._data = {}

    @staticmethod
    def chat_key(template_id: str, vars: dict[str, str]) -> str:
        return "chat:%08x" % _seed_of(template_id, vars)

    @staticmethod
    def embed_key(text: str) -> str:
        return "embed:%08x" % _crc(text)

    def lookup(self, key: str):
        return self._data.get(key)

    def store(self, key: str, value) -> None:
        with self._lock:
            self._data[key] = value

    def save(self) -> None:
        with self._lock:
            with open(self.path, "w", encoding="utf-8") as fh:
                json.dump(self._data, fh, sort_keys=True, indent=1)


# -- the gateway ---------------------------------------------------------------


class Gateway:
    """Thread-safe front door to all backends.

    Serializes nothing except the in-flight cap; call records accumulate in
    a lock-protected log.
    """

    def __init__(
        self,
        max_inflight: int = 4,
        tokenizer: Tokenizer | None = None,
        fixtures: FixtureStore | None = None,
        backoff_base: float = 1.0,
        sleep=time.sleep,
    ):
        self._limiter = threading.BoundedSemaphore(max_inflight)
        self._tokenizer = tokenizer or count_tokens
        self._fixtures = fixtures
        self._backoff_base = backoff_base
        self._sleep = sleep
        self._records: list[CallRecord] = []
        self._records_lock = threading.Lock()
        self._client = httpx.Client()

    # .. token counting ..

    def count_tokens(self, text: str) -> int:
        return self._tokenizer(text)

    # .. call log ..

    def records(self) -> tuple[CallRecord, ...]:
        with self._records_lock:
            return tuple(self._records)

    def reset_records(self) -> None:
        with self._records_lock:
            self._records.clear()

    def _log(self, record: CallRecord) -> None:
        with self._records_lock:
            self._records.append(record)

    # .. chat ..

    def chat(self, profile: BackendProfile, template: PromptTemplate, vars: dict[str, str]) -> ChatResult:
        if profile.kind not in (KIND_HTTP_CHAT, KIND_MOCK):
            raise ValueError(f"profile kind {profile.kind} cannot serve chat")
        prompt = template.render(vars)

        t0 = time.monotonic()
        retries = 0
        if self._fixtures is not None and not self._fixtures.record:
            key = FixtureStore.chat_key(template.template_id, vars)
            text = self._fixtures.lookup(key)
            if text is None:
                raise BackendUnavailable(f"no recorded fixture for {template.template_id} ({key})")
        elif profile.kind == KIND_MOCK:
            with self._limiter:
                text = mock_complete(template, vars)
        else:
            text, retries = self._http_chat(profile, prompt)

        if self._fixtures is not None and self._fixtures.record:
            self._fixtures.store(FixtureStore.chat_key(template.template_id, vars), text)

        record = CallRecord(
            role=profile.role,
            template_id=template.template_id,
            prompt_tokens=self.count_tokens(prompt),
            completion_tokens=self.count_tokens(text),
            latency=time.monotonic() - t0,
            retry_count=retries,
        )
        self._log(record)
        return ChatResult(text=text, record=record)

    def _headers(self, profile: BackendProfile) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(profile.api_key_env, "") if profile.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_with_retries(self, profile: BackendProfile, url: str, payload: dict) -> tuple[dict, int]:
        attempts = profile.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self._backoff_base * (2 ** (attempt - 1)))
            try:
                with self._limiter:
                    resp = self._client.post(
                        url, json=payload, headers=self._headers(profile), timeout=profile.timeout
                    )
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_error = BackendUnavailable(f"HTTP {resp.status_code} from {url}")
                    continue
                resp.raise_for_status()
                return resp.json(), attempt
            except (httpx.TransportError, json.JSONDecodeError) as exc:
                last_error = exc
            except httpx.HTTPStatusError as exc:
                raise BackendUnavailable(str(exc)) from exc
        raise BackendUnavailable(f"{url} failed after {attempts} attempts: {last_error}")

    def _http_chat(self, profile: BackendProfile, prompt: str) -> tuple[str, int]:
        payload = {
            "model": profile.model_name,
            "temperature": profile.effective_temperature(),
            "messages": [{"role": "user", "content": prompt}],
        }
        url = profile.endpoint.rstrip("/") + "/chat/completions"
        data, retries = self._post_with_retries(profile, url, payload)
        try:
            return data["choices"][0]["message"]["content"], retries
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"unexpected chat response shape: {exc}") from exc

    # .. embeddings ..

    def embed(self, profile: BackendProfile, texts: list[str]) -> list[EmbeddingVector]:
        if not texts:
            raise EmptyInput("embed() requires at least one text")
        if profile.kind not in (KIND_HTTP_EMBED, KIND_MOCK):
            raise ValueError(f"profile kind {profile.kind} cannot serve embeddings")

        if self._fixtures is not None and not self._fixtures.record:
            vecs = []
            for t in texts:
                raw = self._fixtures.lookup(FixtureStore.embed_key(t))
                if raw is None:
                    raise BackendUnavailable(f"no recorded embedding fixture for {t[:40]!r}")
                vecs.append(EmbeddingVector.of(raw))
        elif profile.kind == KIND_MOCK:
            with self._limiter:
                vecs = [mock_embed_text(t) for t in texts]
        else:
            vecs = self._http_embed(profile, texts)

        vecs = [self._normalize(v) for v in vecs]
        dims = {v.dim for v in vecs}
        if len(dims) != 1:
            raise BackendUnavailable(f"backend returned mixed embedding dims: {sorted(dims)}")
        if self._fixtures is not None and self._fixtures.record:
            for t, v in zip(texts, vecs):
                self._fixtures.store(FixtureStore.embed_key(t), list(v.values))
        return vecs

    def _http_embed(self, profile: BackendProfile, texts: list[str]) -> list[EmbeddingVector]:
        url = profile.endpoint.rstrip("/") + "/embeddings"
        out: list[EmbeddingVector] = []
        for start in range(0, len(texts), 128):
            batch = texts[start : start + 128]
            payload = {"model": profile.model_name, "input": batch}
            data, _ = self._post_with_retries(profile, url, payload)
            try:
                rows = sorted(data["data"], key=lambda r: r.get("index", 0))
                out.extend(EmbeddingVector.of(r["embedding"]) for r in rows)
            except (KeyError, TypeError) as exc:
                raise BackendUnavailable(f"unexpected embeddings response shape: {exc}") from exc
        return out

    @staticmethod
    def _normalize(vec: EmbeddingVector) -> EmbeddingVector:
        n = vec.norm()
        if n == 0.0:
            return vec
        return EmbeddingVector.of(v / n for v in vec.values)

    def close(self) -> None:
        self._client.close()
