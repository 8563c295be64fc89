"""Core domain types and validated ingestion of multi-session conversation histories.

Wire format (JSONL): an optional header line ``{"history_id": ..., "persona_refs": [...]}``
followed by one session object per line:

    {"session_id": str, "timestamp": "YYYY-MM-DDTHH:MM:SS", "tags": [str],
     "turns": [{"role": "user"|"assistant", "text": str}]}

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import IO, Iterable, Iterator, Union

from .errors import (
    BadTimestamp,
    DuplicateSessionId,
    EmptySession,
    MalformedLine,
)
from .tokens import Tokenizer, count_tokens

USER = "user"
ASSISTANT = "assistant"
ROLES = (USER, ASSISTANT)

TIMESTAMP_FMT = "%Y-%m-%dT%H:%M:%S"

_WORD_RE = re.compile(r"[a-z0-9]+")

# Function words long enough to pass the content-word length test but too
# generic to count as topical overlap.
STOPWORDS = frozenset(
    {
        "this", "that", "with", "from", "have", "been", "they", "them", "their",
        "what", "when", "where", "which", "while", "about", "into", "over",
        "after", "before", "because", "does", "will", "would", "could", "should",
        "very", "much", "some", "such", "only", "also", "just", "than", "then",
        "there", "here", "your", "yours",
    }
)


def words(text: str) -> list[str]:
    """Case-folded alphanumeric tokens of ``text``."""
    return _WORD_RE.findall(text.lower())


def content_words(text: str, min_len: int = 4) -> set[str]:
    """Tokens of length >= ``min_len``; the unit of lexical overlap checks."""
    return {w for w in words(text) if len(w) >= min_len}


def topical_words(text: str, min_len: int = 4) -> set[str]:
    """Content words minus generic function words."""
    return content_words(text, min_len) - STOPWORDS


def parse_timestamp(value: str) -> datetime:
    return datetime.strptime(value, TIMESTAMP_FMT)


@dataclass(frozen=True)
class Utterance:
    """One turn of dialogue: who spoke and what was said."""

    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"utterance role must be one of {ROLES}, got {self.role!r}")
        if not self.text.strip():
            raise ValueError("utterance text is empty")


@dataclass(frozen=True)
class Session:
    """A timestamped dialogue session.

    Turns need not strictly alternate (the assistant may respond several
    times) but the first turn is always the user's.
    """

    session_id: str
    timestamp: str
    turns: tuple[Utterance, ...]
    tags: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "tags", frozenset(self.tags))
        if not self.turns:
            raise EmptySession(self.session_id)
        try:
            parse_timestamp(self.timestamp)
        except (ValueError, TypeError):
            raise BadTimestamp(self.session_id, str(self.timestamp)) from None
        if self.turns[0].role != USER:
            raise ValueError(f"session {self.session_id}: first turn must be {USER}")

    @property
    def user_turns(self) -> tuple[Utterance, ...]:
        return tuple(t for t in self.turns if t.role == USER)

    def text(self) -> str:
        """All turn texts joined; used for whole-session embedding."""
        return " ".join(t.text for t in self.turns)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "timestamp": self.timestamp,
            "tags": sorted(self.tags),
            "turns": [{"role": t.role, "text": t.text} for t in self.turns],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Session":
        turns = tuple(Utterance(t["role"], t["text"]) for t in obj.get("turns", ()))
        return cls(
            session_id=obj["session_id"],
            timestamp=obj["timestamp"],
            turns=turns,
            tags=frozenset(obj.get("tags", ())),
        )


@dataclass(frozen=True)
class ConversationHistory:
    """An ordered multi-session transcript.

    Sessions are stored sorted ascending by timestamp; sessions with equal
    timestamps retain their input order (stable sort). Session ids are
    pairwise distinct.
    """

    history_id: str
    sessions: tuple[Session, ...]
    persona_refs: tuple[str, ...] = ()

    def __post_init__(self):
        ordered = sorted(self.sessions, key=lambda s: s.timestamp)
        object.__setattr__(self, "sessions", tuple(ordered))
        object.__setattr__(self, "persona_refs", tuple(self.persona_refs))
        seen: set[str] = set()
        for s in self.sessions:
            if s.session_id in seen:
                raise DuplicateSessionId(s.session_id)
            seen.add(s.session_id)

    def session_ids(self) -> list[str]:
        return [s.session_id for s in self.sessions]

    def session_times(self) -> dict[str, str]:
        return {s.session_id: s.timestamp for s in self.sessions}

    def get(self, session_id: str) -> Session:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise KeyError(session_id)


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-length vector of finite reals."""

    values: tuple[float, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != self.dim:
            raise ValueError(f"expected {self.dim} values, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains non-finite values")

    @classmethod
    def of(cls, values: Iterable[float]) -> "EmbeddingVector":
        vals = tuple(float(v) for v in values)
        return cls(values=vals, dim=len(vals))

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))

    def cosine(self, other: "EmbeddingVector") -> float:
        """Cosine similarity; zero-norm vectors similarity is defined as 0.0."""
        na, nb = self.norm(), other.norm()
        if na == 0.0 or nb == 0.0:
            return 0.0
        dot = sum(a * b for a, b in zip(self.values, other.values))
        return dot / (na * nb)


@dataclass(frozen=True)
class Fact:
    """One atomic extracted statement with provenance."""

    fact_id: str
    source_session_id: str
    text: str
    embedding: EmbeddingVector | None = None
    token_count: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"fact {self.fact_id}: text is empty")

    def with_embedding(self, vec: EmbeddingVector) -> "Fact":
        return Fact(self.fact_id, self.source_session_id, self.text, vec, self.token_count)

    def to_dict(self) -> dict:
        d = {
            "fact_id": self.fact_id,
            "source_session_id": self.source_session_id,
            "text": self.text,
            "token_count": self.token_count,
        }
        if self.embedding is not None:
            d["embedding"] = list(self.embedding.values)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "Fact":
        emb = obj.get("embedding")
        return cls(
            fact_id=obj["fact_id"],
            source_session_id=obj["source_session_id"],
            text=obj["text"],
            embedding=EmbeddingVector.of(emb) if emb is not None else None,
            token_count=int(obj.get("token_count", 0)),
        )


@dataclass(frozen=True)
class BuildConfig:
    """Knobs for tree construction.

    k        -- maximum cluster size (and per-node fan-out cap)
    L        -- a constructed level with fewer than L nodes becomes the root set
    beta     -- similarity threshold for scenario filtering in corpus generation
    """

    k: int = 6
    L: int = 15
    beta: float = 0.4
    reducer_dims: int = 10
    seed: int = 0
    max_inflight: int = 4
    reducer_kind: str = "umap_like"  # or "pca"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.reducer_dims < 1:
            raise ValueError("reducer_dims must be positive")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be positive")
        if self.reducer_kind not in ("umap_like", "pca"):
            raise ValueError(f"unknown reducer kind: {self.reducer_kind!r}")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "L": self.L,
            "beta": self.beta,
            "reducer_dims": self.reducer_dims,
            "seed": self.seed,
            "max_inflight": self.max_inflight,
            "reducer_kind": self.reducer_kind,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "BuildConfig":
        return cls(**{k: obj[k] for k in cls().to_dict() if k in obj})


@dataclass(frozen=True)
class HistoryStats:
    session_count: int
    turn_count: int
    total_tokens: int


# -- JSONL ingestion ---------------------------------------------------------


def _iter_lines(raw: Union[bytes, str, IO]) -> Iterator[str]:
    if isinstance(raw, bytes):
        text = raw.decode("utf-8")
    elif isinstance(raw, str):
        text = raw
    else:
        data = raw.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    yield from text.splitlines()


def parse_history(raw: Union[bytes, str, IO]) -> ConversationHistory:
    """Parse a JSONL conversation stream into a validated history.

    The on-disk session order is not trusted: sessions are re-sorted
    ascending by timestamp. A header line is optional; extra header keys
    (e.g. an embedded config snapshot) are ignored.
    """
    history_id = "history"
    persona_refs: tuple[str, ...] = ()
    sessions: list[Session] = []
    saw_header = False
    session_ids: set[str] = set()

    for line_no, line in enumerate(_iter_lines(raw), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, str(exc)) from None
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "expected a JSON object")

        if "session_id" not in obj:
            if "history_id" in obj and not saw_header and not sessions:
                history_id = str(obj["history_id"])
                persona_refs = tuple(obj.get("persona_refs", ()))
                saw_header = True
                continue
            raise MalformedLine(line_no, "neither a session nor a leading header")

        sid = str(obj["session_id"])
        if sid in session_ids:
            raise DuplicateSessionId(sid)
        turns_raw = obj.get("turns", [])
        if not isinstance(turns_raw, list) or not turns_raw:
            raise EmptySession(sid)
        try:
            session = Session.from_dict(obj)
        except (EmptySession, BadTimestamp):
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(line_no, str(exc)) from None
        session_ids.add(sid)
        sessions.append(session)

    return ConversationHistory(history_id=history_id, sessions=tuple(sessions), persona_refs=persona_refs)


def serialize_history(h: ConversationHistory) -> bytes:
    """Canonical JSONL bytes; `parse_history` round-trips this exactly."""
    lines = [
        json.dumps(
            {"history_id": h.history_id, "persona_refs": list(h.persona_refs)},
            sort_keys=True,
            separators=(",", ":"),
        )
    ]
    for s in h.sessions:
        lines.append(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_history_path(path: Union[str, Path]) -> ConversationHistory:
    """Parse a history file, or a directory of ``*.jsonl`` parts (name-sorted)."""
    p = Path(path)
    if p.is_dir():
        chunks = [f.read_bytes() for f in sorted(p.glob("*.jsonl"))]
        return parse_history(b"".join(chunks))
    return parse_history(p.read_bytes())


def history_stats(h: ConversationHistory, tokenizer: Tokenizer | None = None) -> HistoryStats:
    """Exact session/turn counts and total token count of all turn texts."""
    tok = tokenizer or count_tokens
    turn_count = sum(len(s.turns) for s in h.sessions)
    total = sum(tok(t.text) for s in h.sessions for t in s.turns)
    return HistoryStats(session_count=len(h.sessions), turn_count=turn_count, total_tokens=total)


# -- transcript rendering ----------------------------------------------------

SPEAKER_USER = "Speaker1"
SPEAKER_ASSISTANT = "Assistant"

_TURN_RE = re.compile(r"^\s*(speaker\s*_?\s*1|user)\s*[:\-]\s*(.*)$", re.IGNORECASE)
_ASSIST_RE = re.compile(r"^\s*(assistant|speaker\s*_?\s*2|bot)\s*[:\-]\s*(.*)$", re.IGNORECASE)


def render_transcript(session: Session) -> str:
    """Render a session the way prompts present dialogue: one prefixed line per turn."""
    lines = []
    for t in session.turns:
        prefix = SPEAKER_USER if t.role == USER else SPEAKER_ASSISTANT
        lines.append(f"{prefix}: {t.text}")
    return "\n".join(lines)


def parse_transcript(text: str) -> list[Utterance]:
    """Parse ``Speaker1:``/``Assistant:`` lines into turns.

    Unprefixed lines continue the previous turn. Raises ValueError when no
    turns are found or the opening turn is not the user's.
    """
    turns: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _TURN_RE.match(line)
        if m:
            turns.append((USER, [m.group(2).strip()]))
            continue
        m = _ASSIST_RE.match(line)
        if m:
            turns.append((ASSISTANT, [m.group(2).strip()]))
            continue
        if turns:
            turns[-1][1].append(line.strip())
    utterances = [
        Utterance(role, " ".join(p for p in parts if p)) for role, parts in turns if any(p for p in parts)
    ]
    if not utterances:
        raise ValueError("no speaker turns found in transcript")
    if utterances[0].role != USER:
        raise ValueError("transcript must open with the user turn")
    return utterances


_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    """Simple deterministic sentence split on terminal punctuation."""
    return [s.strip() for s in _SENTENCE_SPLIT_RE.split(text.strip()) if s.strip()]
