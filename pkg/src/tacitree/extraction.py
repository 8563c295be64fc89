"""Turn sessions into atomic facts, with near-duplicate suppression."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ExtractionEmpty, MissingEmbedding
from .gateway import BackendProfile, Gateway
from .model import ConversationHistory, Fact, Session, render_transcript
from .prompts import EXTRACT_SESSION_FACTS

logger = logging.getLogger(__name__)

_LINE_PREFIX_RE = re.compile(r"^\s*(?:[-*]|\d+[.):])\s*")


@dataclass(frozen=True)
class ExtractionResult:
    session_id: str
    facts: tuple[Fact, ...]
    dropped_duplicates: int


def _parse_fact_lines(raw: str) -> list[str]:
    lines = []
    for line in raw.splitlines():
        text = _LINE_PREFIX_RE.sub("", line).strip()
        if text:
            lines.append(text)
    return lines


class FactExtractor:
    """Extracts long-term facts from sessions through the gateway.

    By default only user turns carry persona signal and assistant turns are
    ignored; flip ``include_assistant`` to extract from both sides.
    """

    def __init__(
        self,
        gateway: Gateway,
        chat_profile: BackendProfile,
        include_assistant: bool = False,
        max_inflight: int = 4,
    ):
        self.gateway = gateway
        self.chat_profile = chat_profile
        self.include_assistant = include_assistant
        self.max_inflight = max_inflight

    def extract(self, session: Session) -> ExtractionResult:
        transcript = render_transcript(session)
        if self.include_assistant:
            transcript += "\n(Also extract facts the assistant stated about the user.)"
        vars = {"transcript": transcript}
        raw = self.gateway.chat(self.chat_profile, EXTRACT_SESSION_FACTS, vars).text
        lines = _parse_fact_lines(raw)
        if not lines:
            retry_vars = dict(vars, attempt="2")
            raw = self.gateway.chat(self.chat_profile, EXTRACT_SESSION_FACTS, retry_vars).text
            lines = _parse_fact_lines(raw)
            if not lines:
                raise ExtractionEmpty(session.session_id)

        facts: list[Fact] = []
        seen: set[str] = set()
        dropped = 0
        for text in lines:
            if text in seen:
                dropped += 1
                continue
            seen.add(text)
            facts.append(
                Fact(
                    fact_id=f"{session.session_id}/f{len(facts):03d}",
                    source_session_id=session.session_id,
                    text=text,
                    token_count=self.gateway.count_tokens(text),
                )
            )
        return ExtractionResult(session_id=session.session_id, facts=tuple(facts), dropped_duplicates=dropped)

    def extract_history(self, history: ConversationHistory) -> list[ExtractionResult]:
        """Extract all sessions; independent sessions run concurrently."""
        workers = max(1, min(self.max_inflight, len(history.sessions)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.extract, history.sessions))


def embed_facts(gateway: Gateway, embed_profile: BackendProfile, facts: list[Fact]) -> list[Fact]:
    """Attach embeddings to facts, preserving order."""
    if not facts:
        return []
    vectors = gateway.embed(embed_profile, [f.text for f in facts])
    return [f.with_embedding(v) for f, v in zip(facts, vectors)]


def dedupe_facts(facts: list[Fact], tau_dup: float = 0.95) -> list[Fact]:
    """Greedy first-wins near-duplicate removal.

    A fact is dropped iff its cosine similarity to some already-kept fact is
    >= ``tau_dup``. Kept facts come back in their original order; the pass is
    idempotent.
    """
    if not 0.0 < tau_dup <= 1.0:
        raise ValueError(f"tau_dup must be in (0, 1], got {tau_dup}")
    if not facts:
        return []
    for f in facts:
        if f.embedding is None:
            raise MissingEmbedding(f.fact_id)

    matrix = np.array([f.embedding.values for f in facts], dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = matrix / safe[:, None]
    sims = unit @ unit.T
    sims[norms == 0.0, :] = 0.0
    sims[:, norms == 0.0] = 0.0

    kept_idx: list[int] = []
    for i in range(len(facts)):
        if kept_idx and float(sims[i, kept_idx].max()) >= tau_dup:
            continue
        kept_idx.append(i)
    return [facts[i] for i in kept_idx]
