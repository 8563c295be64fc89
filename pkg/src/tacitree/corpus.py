"""Synthetic evaluation-corpus generation.

Pipeline per persona trait: generate implicit reasoning scenarios, filter
them by embedding similarity against the trait (threshold beta), pick or
verify the gold scenarios, derive a QA task, expand everything into
multi-turn sessions, and interleave with distractor and pool sessions into
an ~100-session history.

Human-in-the-loop checkpoints are replaced by deterministic automated
fallbacks; anything a reviewer might want to see lands in the builder's
review queue.
"""

from __future__ import annotations

import difflib
import json
import logging
import random
import re
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

from .errors import (
    ConstraintUnsatisfiable,
    CorpusAssemblyError,
    NoCandidates,
    PoolTooSmall,
    QuestionTooLong,
    TooFewScenarios,
    UnparseableOutput,
    UnparseableTranscript,
)
from .gateway import BackendProfile, Gateway, ProfileSet, pseudo_words
from .model import (
    BuildConfig,
    ConversationHistory,
    EmbeddingVector,
    Session,
    Utterance,
    content_words,
    parse_transcript,
    topical_words,
    words,
    ASSISTANT,
    USER,
)
from .prompts import (
    DISTRACTOR_SCENARIOS,
    OPPOSED_QUESTION,
    OPPOSED_REASONS,
    PERSONA_BREAKDOWN,
    SELECT_REASON,
    SESSION_DIALOGUE,
    SUPPORTIVE_REASONS,
    VERIFY_SUPPORTIVE,
)

logger = logging.getLogger(__name__)

KIND_OPPOSED = "opposed"
KIND_SUPPORTIVE = "supportive"
KIND_DISTRACTOR = "distractor"

STATUS_RAW = "raw"
STATUS_FILTERED = "filtered"
STATUS_SELECTED = "selected"
STATUS_VERIFIED = "verified"
STATUS_REJECTED = "rejected"

CATEGORY_DEMOGRAPHICS = "demographics"
CATEGORY_CAREER = "career"
CATEGORY_EVERYDAY = "everyday"

TRAIT_PREFIX = "This person"

NEAR_THRESHOLD_BAND = 0.02
MAX_QUESTION_WORDS = 20
MIN_SESSION_TURNS = 10
LATE_MENTION_TURNS = 4


@dataclass(frozen=True)
class PersonaTrait:
    trait_id: str
    text: str
    category: str

    def __post_init__(self):
        if not self.text.startswith(TRAIT_PREFIX):
            raise ValueError(f"trait text must start with {TRAIT_PREFIX!r}: {self.text!r}")

    @property
    def predicate(self) -> str:
        return self.text[len(TRAIT_PREFIX) :].strip().rstrip(".")


@dataclass(frozen=True)
class ReasoningScenario:
    scenario_id: str
    trait_id: str
    kind: str
    text: str
    similarity_to_trait: float | None = None
    similarity_to_question: float | None = None
    status: str = STATUS_RAW
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class QaTask:
    task_id: str
    trait_id: str
    kind: str
    question: str
    gold_answer: str
    evidence_session_ids: tuple[str, ...] = ()
    yes_no: bool = False

    def __post_init__(self):
        object.__setattr__(self, "evidence_session_ids", tuple(self.evidence_session_ids))
        if self.kind == KIND_SUPPORTIVE and not self.yes_no:
            raise ValueError("supportive tasks are yes/no tasks")
        if self.kind == KIND_OPPOSED:
            if self.yes_no:
                raise ValueError("opposed tasks are open questions")
            if len(self.question.split()) >= MAX_QUESTION_WORDS:
                raise QuestionTooLong(self.question)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "trait_id": self.trait_id,
            "kind": self.kind,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "evidence_session_ids": list(self.evidence_session_ids),
            "yes_no": self.yes_no,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "QaTask":
        return cls(
            task_id=obj["task_id"],
            trait_id=obj["trait_id"],
            kind=obj["kind"],
            question=obj["question"],
            gold_answer=obj["gold_answer"],
            evidence_session_ids=tuple(obj.get("evidence_session_ids", ())),
            yes_no=bool(obj.get("yes_no", False)),
        )


@dataclass(frozen=True)
class CorpusConfig:
    scenarios_per_kind: int = 20
    distractors_per_trait: int = 5
    pool_per_source: int = 5
    supportive_session_cap: int = 8
    min_sessions: int = 80
    max_sessions: int = 120
    window_days: int = 365
    start_date: str = "2024-01-01"
    session_hour: str = "09:00:00"

    def to_dict(self) -> dict:
        return {
            "scenarios_per_kind": self.scenarios_per_kind,
            "distractors_per_trait": self.distractors_per_trait,
            "pool_per_source": self.pool_per_source,
            "supportive_session_cap": self.supportive_session_cap,
            "min_sessions": self.min_sessions,
            "max_sessions": self.max_sessions,
            "window_days": self.window_days,
            "start_date": self.start_date,
            "session_hour": self.session_hour,
        }


@dataclass
class TraitBundle:
    """Everything one trait pipeline produced, before assembly."""

    trait: PersonaTrait
    kind: str
    scenarios: list[ReasoningScenario]
    gold_scenarios: list[ReasoningScenario]
    distractors: list[ReasoningScenario]
    task: QaTask


@dataclass
class _Entry:
    """One future session awaiting ordering, id and timestamp."""

    turns: tuple[Utterance, ...]
    tags: frozenset[str]
    trait_id: str
    role: str  # persona | evidence | distractor | pool
    warning: bool = False


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8")) & 0xFFFFFFFF


def _normalize(text: str) -> str:
    return " ".join(words(text))


def relabel_alternating(texts: list[str]) -> tuple[Utterance, ...]:
    """Reformat a human-human transcript into user/assistant alternation."""
    turns = []
    for i, text in enumerate(texts):
        if text.strip():
            turns.append(Utterance(USER if i % 2 == 0 else ASSISTANT, text.strip()))
    return tuple(turns)


class CorpusBuilder:
    """Drives the dataset pipeline through the gateway.

    All randomness (session interleaving, timestamps, pool sampling) comes
    from one seeded generator, so a fresh builder with the same seed and
    the mock backend reproduces a corpus byte for byte.
    """

    def __init__(
        self,
        gateway: Gateway,
        profiles: ProfileSet,
        build_cfg: BuildConfig,
        corpus_cfg: CorpusConfig | None = None,
    ):
        self.gateway = gateway
        self.profiles = profiles
        self.build_cfg = build_cfg
        self.corpus_cfg = corpus_cfg or CorpusConfig()
        self.rng = random.Random(build_cfg.seed)
        self.review_queue: list[dict] = []

    # .. small helpers ..

    def _chat(self, profile: BackendProfile, template, vars: dict[str, str]) -> str:
        return self.gateway.chat(profile, template, vars).text

    def _embed_one(self, text: str) -> EmbeddingVector:
        return self.gateway.embed(self.profiles.embedder, [text])[0]

    def _flag(self, kind: str, **detail) -> None:
        self.review_queue.append({"type": kind, **detail})

    # .. persona standardization ..

    def standardize_persona(self, raw: str) -> list[PersonaTrait]:
        """Break a free-text persona into standardized single-sentence traits."""
        if not raw.strip():
            raise ValueError("persona text is empty")
        response = self._chat(self.profiles.generator, PERSONA_BREAKDOWN, {"persona": raw})
        traits = self._parse_traits(raw, response)
        if not traits:
            response = self._chat(
                self.profiles.generator, PERSONA_BREAKDOWN, {"persona": raw, "attempt": "2"}
            )
            traits = self._parse_traits(raw, response)
        if not traits:
            raise UnparseableOutput(f"could not parse persona breakdown for {raw!r}")
        return traits

    _CATEGORY_MAP = {
        "demographics": CATEGORY_DEMOGRAPHICS,
        "career_life_and_goals": CATEGORY_CAREER,
        "everyday_life_and_hobbies": CATEGORY_EVERYDAY,
    }

    def _parse_traits(self, raw: str, response: str) -> list[PersonaTrait]:
        payload = self._extract_json(response)
        texts: list[tuple[str, str]] = []
        if isinstance(payload, dict):
            for key, category in self._CATEGORY_MAP.items():
                value = payload.get(key)
                if value is None:
                    continue
                items = list(value.values()) if isinstance(value, dict) else value
                if isinstance(items, str):
                    items = [items]
                for item in items:
                    if isinstance(item, str) and item.strip():
                        texts.append((item.strip(), category))
        else:
            for m in re.finditer(r"This person[^.\n]*\.", response):
                texts.append((m.group(0), CATEGORY_EVERYDAY))

        base = _crc(raw)
        traits = []
        for i, (text, category) in enumerate(texts):
            sentence = re.split(r"(?<=[.!?])\s+", text.strip())[0].strip()
            if not sentence.endswith("."):
                sentence += "."
            if not sentence.lower().startswith(TRAIT_PREFIX.lower()):
                body = sentence[0].lower() + sentence[1:] if sentence else sentence
                sentence = f"{TRAIT_PREFIX} {body}"
            else:
                sentence = TRAIT_PREFIX + sentence[len(TRAIT_PREFIX) :]
            traits.append(PersonaTrait(trait_id=f"p{base:08x}-t{i}", text=sentence, category=category))
        return traits

    @staticmethod
    def _extract_json(response: str):
        text = response.strip()
        fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
        if fence:
            text = fence.group(1)
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return None

    # .. scenario generation and filtering ..

    def generate_scenarios(self, trait: PersonaTrait, kind: str, n: int | None = None) -> list[ReasoningScenario]:
        """Generate n raw one-sentence scenarios of the given kind.

        Scenarios containing any content word of the trait predicate are
        dropped (the prompt bans them; this is the lexical backstop).
        """
        n = n or self.corpus_cfg.scenarios_per_kind
        banned = sorted(topical_words(trait.predicate))
        template = OPPOSED_REASONS if kind == KIND_OPPOSED else SUPPORTIVE_REASONS
        vars = {"trait": trait.text, "banned": ", ".join(banned), "n": str(n)}
        if kind == KIND_SUPPORTIVE:
            vars["trait_question"] = trait.predicate
        raw = self._chat(self.profiles.generator, template, vars)

        scenarios: list[ReasoningScenario] = []
        banned_set = set(banned)
        for idx, text in _parse_numbered_block(raw):
            if content_words(text) & banned_set:
                logger.info("dropping scenario with banned trait words: %r", text)
                self._flag("banned_word_drop", trait_id=trait.trait_id, text=text)
                continue
            scenarios.append(
                ReasoningScenario(
                    scenario_id=f"{trait.trait_id}-{kind[:3]}{idx:02d}",
                    trait_id=trait.trait_id,
                    kind=kind,
                    text=text,
                )
            )
        if len(scenarios) < 5:
            raise TooFewScenarios(len(scenarios))
        return scenarios

    def filter_by_similarity(
        self, scenarios: list[ReasoningScenario], trait: PersonaTrait, beta: float | None = None
    ) -> list[ReasoningScenario]:
        """Keep scenarios with cosine(trait, scenario) < beta.

        Returns the full list with statuses updated (kept -> filtered,
        dropped -> rejected); near-threshold cases are flagged for review
        either way but decided by the threshold alone.
        """
        beta = self.build_cfg.beta if beta is None else beta
        if not scenarios:
            return []
        vectors = self.gateway.embed(self.profiles.embedder, [trait.text] + [s.text for s in scenarios])
        trait_vec, rest = vectors[0], vectors[1:]
        out = []
        for scenario, vec in zip(scenarios, rest):
            sim = trait_vec.cosine(vec)
            flags = list(scenario.flags)
            if abs(sim - beta) <= NEAR_THRESHOLD_BAND:
                flags.append("near_threshold")
                self._flag("near_threshold", scenario_id=scenario.scenario_id, similarity=sim)
            status = STATUS_FILTERED if sim < beta else STATUS_REJECTED
            out.append(replace(scenario, similarity_to_trait=sim, status=status, flags=tuple(flags)))
        return out

    def select_opposed_best(
        self, scenarios: list[ReasoningScenario], trait: PersonaTrait | None = None
    ) -> ReasoningScenario:
        """Pick the single gold opposed scenario among the filtered ones.

        If the model names one candidate near-verbatim (normalized edit
        similarity >= 0.9) that candidate wins; otherwise the
        lowest-similarity candidate is the automated stand-in for a human
        annotator, and the choice is flagged.
        """
        cands = [s for s in scenarios if s.status == STATUS_FILTERED and s.kind == KIND_OPPOSED]
        if not cands:
            raise NoCandidates("no filtered opposed scenarios to select from")
        trait_text = trait.text if trait is not None else cands[0].trait_id
        options = "\n".join(f"{i}. {s.text}" for i, s in enumerate(cands, start=1))
        response = self._chat(
            self.profiles.generator, SELECT_REASON, {"trait": trait_text, "options": options}
        )
        scores = [
            difflib.SequenceMatcher(None, _normalize(response), _normalize(s.text)).ratio() for s in cands
        ]
        best = max(range(len(cands)), key=lambda i: (scores[i], -i))
        if scores[best] >= 0.9:
            chosen = cands[best]
            flags = chosen.flags
        else:
            chosen = min(cands, key=lambda s: (s.similarity_to_trait, s.scenario_id))
            flags = chosen.flags + ("fallback_selection",)
            self._flag("fallback_selection", scenario_id=chosen.scenario_id)
        return replace(chosen, status=STATUS_SELECTED, flags=flags)

    def verify_supportive(
        self, scenarios: list[ReasoningScenario], trait: PersonaTrait
    ) -> list[ReasoningScenario]:
        """Per-scenario yes/no/uncertain verification of filtered supportive scenarios."""
        out = []
        for scenario in scenarios:
            if scenario.status != STATUS_FILTERED or scenario.kind != KIND_SUPPORTIVE:
                out.append(scenario)
                continue
            answer = self._chat(
                self.profiles.generator,
                VERIFY_SUPPORTIVE,
                {"trait": trait.text, "scenario": scenario.text},
            ).strip().lower()
            verdict = answer.split()[0] if answer.split() else ""
            if verdict == "yes":
                out.append(replace(scenario, status=STATUS_VERIFIED))
            else:
                reason = "verify_uncertain" if verdict == "uncertain" else "verify_no"
                self._flag(reason, scenario_id=scenario.scenario_id)
                out.append(replace(scenario, status=STATUS_REJECTED, flags=scenario.flags + (reason,)))
        return out

    # .. QA construction ..

    def make_qa(self, trait: PersonaTrait, selected_or_verified) -> QaTask:
        """Build the QA task for a trait.

        Opposed (single selected scenario): an LLM-written first-person
        question under 20 words; the gold answer states the trait is
        blocked by the scenario. Supportive (list of verified scenarios):
        the trait recast as a yes/no question, gold "yes" iff any scenario
        verified.
        """
        if isinstance(selected_or_verified, ReasoningScenario):
            return self._make_opposed_qa(trait, selected_or_verified)
        return self._make_supportive_qa(trait, list(selected_or_verified))

    def _make_opposed_qa(self, trait: PersonaTrait, selected: ReasoningScenario) -> QaTask:
        vars = {"trait": trait.text, "reason": selected.text}
        question = self._chat(self.profiles.generator, OPPOSED_QUESTION, vars).strip()
        if len(question.split()) >= MAX_QUESTION_WORDS:
            question = self._chat(
                self.profiles.generator, OPPOSED_QUESTION, dict(vars, attempt="2")
            ).strip()
            if len(question.split()) >= MAX_QUESTION_WORDS:
                raise QuestionTooLong(question)
        if not question.endswith("?"):
            question += "?"
        gold = (
            f"They cannot {trait.predicate} at the moment, because of this: {selected.text}"
        )
        return QaTask(
            task_id=f"{trait.trait_id}-opp",
            trait_id=trait.trait_id,
            kind=KIND_OPPOSED,
            question=question,
            gold_answer=gold,
            yes_no=False,
        )

    def _make_supportive_qa(self, trait: PersonaTrait, verified: list[ReasoningScenario]) -> QaTask:
        gold = "yes" if any(s.status == STATUS_VERIFIED for s in verified) else "no"
        return QaTask(
            task_id=f"{trait.trait_id}-sup",
            trait_id=trait.trait_id,
            kind=KIND_SUPPORTIVE,
            question=f"Does this person {trait.predicate}?",
            gold_answer=gold,
            yes_no=True,
        )

    # .. distractors ..

    def generate_distractors(
        self,
        trait: PersonaTrait,
        question: str,
        r_star: ReasoningScenario,
        n: int | None = None,
    ) -> tuple[list[ReasoningScenario], bool]:
        """Scenarios strictly more similar to the question than the gold scenario.

        Regenerates up to 3 rounds to reach n; returns what was achieved and
        a shortfall flag.
        """
        n = n or self.corpus_cfg.distractors_per_trait
        q_vec = self._embed_one(question)
        bar = q_vec.cosine(self._embed_one(r_star.text))
        kept: list[ReasoningScenario] = []
        seen_texts: set[str] = set()
        for round_no in range(1, 4):
            if len(kept) >= n:
                break
            raw = self._chat(
                self.profiles.generator,
                DISTRACTOR_SCENARIOS,
                {
                    "trait": trait.text,
                    "question": question,
                    "topic": trait.predicate,
                    "n": str(n),
                    "attempt": str(round_no),
                },
            )
            texts = [t for _, t in _parse_numbered_block(raw) if t not in seen_texts]
            seen_texts.update(texts)
            if not texts:
                continue
            vectors = self.gateway.embed(self.profiles.embedder, texts)
            for text, vec in zip(texts, vectors):
                sim = q_vec.cosine(vec)
                if sim > bar and len(kept) < n:
                    kept.append(
                        ReasoningScenario(
                            scenario_id=f"{trait.trait_id}-dis{len(kept):02d}",
                            trait_id=trait.trait_id,
                            kind=KIND_DISTRACTOR,
                            text=text,
                            similarity_to_question=sim,
                        )
                    )
        shortfall = len(kept) < n
        if shortfall:
            self._flag("distractor_shortfall", trait_id=trait.trait_id, achieved=len(kept), wanted=n)
        return kept, shortfall

    # .. session expansion ..

    def expand_to_session(self, source_text: str, timestamp: str, session_id: str = "tmp") -> Session:
        """Expand a scenario or trait into a >=10-turn session.

        Validates turn count and the late-mention rule (no scenario content
        word in the first four turns); one regeneration on failure, after
        which the session is accepted with a validation-warning tag.
        """
        if not source_text.strip():
            raise ValueError("cannot expand empty text")
        turns, warned = self._expand_turns(source_text)
        tags = frozenset({"validation-warning"}) if warned else frozenset()
        return Session(session_id=session_id, timestamp=timestamp, turns=turns, tags=tags)

    def _expand_turns(self, source_text: str) -> tuple[tuple[Utterance, ...], bool]:
        key_terms = topical_words(source_text) - {"person"}

        def attempt(vars: dict[str, str]):
            raw = self._chat(self.profiles.generator, SESSION_DIALOGUE, vars)
            try:
                turns = tuple(parse_transcript(raw))
            except ValueError:
                return None, "unparseable"
            if len(turns) < MIN_SESSION_TURNS:
                return turns, "too_short"
            early = " ".join(t.text for t in turns[:LATE_MENTION_TURNS])
            if key_terms & content_words(early):
                return turns, "early_mention"
            return turns, None

        turns, problem = attempt({"scenario": source_text})
        if problem is None:
            return turns, False
        retry_turns, retry_problem = attempt({"scenario": source_text, "attempt": "2"})
        if retry_problem is None:
            return retry_turns, False
        final = retry_turns or turns
        if final is None:
            raise UnparseableTranscript(f"dialogue generation failed twice for {source_text!r}")
        self._flag("session_validation_warning", source=source_text, problem=retry_problem)
        return final, True

    # .. full per-trait pipeline ..

    def build_trait_bundle(self, trait: PersonaTrait, kind: str) -> TraitBundle:
        scenarios = self.generate_scenarios(trait, kind)
        scenarios = self.filter_by_similarity(scenarios, trait)
        if kind == KIND_OPPOSED:
            selected = self.select_opposed_best(scenarios, trait)
            scenarios = [selected if s.scenario_id == selected.scenario_id else s for s in scenarios]
            task = self.make_qa(trait, selected)
            distractors, _ = self.generate_distractors(trait, task.question, selected)
            gold = [selected]
        else:
            scenarios = self.verify_supportive(scenarios, trait)
            verified = [s for s in scenarios if s.status == STATUS_VERIFIED]
            task = self.make_qa(trait, verified)
            gold = verified[: self.corpus_cfg.supportive_session_cap]
            distractors = []
        return TraitBundle(
            trait=trait, kind=kind, scenarios=scenarios, gold_scenarios=gold, distractors=distractors, task=task
        )

    # .. assembly ..

    def assemble_example(
        self,
        bundles: list[TraitBundle],
        noisy_pool: str | Path | None,
        history_id: str,
    ) -> tuple[ConversationHistory, list[QaTask]]:
        """Merge trait bundles plus pool noise into one timestamped history.

        Hard constraints: session count within the configured band; for every
        opposed trait the gold-scenario session never immediately follows the
        persona session; injected distractor/pool sessions are strictly more
        similar to the question than the gold-scenario session.
        """
        if not bundles:
            raise ValueError("assemble_example requires at least one trait bundle")
        cfg = self.corpus_cfg
        placeholder_ts = f"{cfg.start_date}T{cfg.session_hour}"
        pool = load_pool(noisy_pool) if noisy_pool else {}

        entries: list[_Entry] = []
        evidence_entries: dict[str, list[_Entry]] = {}
        for bundle in bundles:
            trait_id = bundle.trait.trait_id
            q_vec = self._embed_one(bundle.task.question)

            p_session = self.expand_to_session(bundle.trait.text, placeholder_ts)
            entries.append(
                _Entry(p_session.turns, p_session.tags | {"persona"}, trait_id, "persona")
            )

            gold_sessions = []
            for scenario in bundle.gold_scenarios:
                s = self.expand_to_session(scenario.text, placeholder_ts)
                entry = _Entry(s.turns, s.tags | {"evidence"}, trait_id, "evidence")
                entries.append(entry)
                gold_sessions.append((entry, s))
            evidence_entries[trait_id] = [e for e, _ in gold_sessions]

            # The similarity bar all injected noise must clear: the gold
            # session itself, measured against the question.
            bar = max(
                (q_vec.cosine(self._embed_one(s.text())) for _, s in gold_sessions),
                default=-1.0,
            )

            for scenario in bundle.distractors:
                s = self.expand_to_session(scenario.text, placeholder_ts)
                sim = q_vec.cosine(self._embed_one(s.text()))
                if sim <= bar:
                    self._flag("distractor_below_bar", trait_id=trait_id, scenario_id=scenario.scenario_id)
                    continue
                entries.append(_Entry(s.turns, s.tags | {"noise", "distractor"}, trait_id, "distractor"))

            if pool:
                predicate_terms = topical_words(bundle.trait.predicate)
                for source in sorted(pool):
                    eligible = []
                    for session in pool[source]:
                        if bundle.kind == KIND_SUPPORTIVE and predicate_terms and predicate_terms <= content_words(session.text()):
                            continue  # lexically restates the trait; excluded
                        if q_vec.cosine(self._embed_one(session.text())) > bar:
                            eligible.append(session)
                    take = min(cfg.pool_per_source, len(eligible))
                    for session in self.rng.sample(eligible, take):
                        entries.append(
                            _Entry(session.turns, session.tags | {"noise", "pool"}, trait_id, "pool")
                        )

        order = self._interleave(entries, evidence_entries)
        timestamps = self._draw_timestamps(len(order))

        sessions: list[Session] = []
        entry_session_id: dict[int, str] = {}
        for i, entry in enumerate(order):
            sid = f"{history_id}-s{i:03d}"
            entry_session_id[id(entry)] = sid
            sessions.append(Session(session_id=sid, timestamp=timestamps[i], turns=entry.turns, tags=entry.tags))

        tasks = []
        for bundle in bundles:
            ids = tuple(
                entry_session_id[id(e)]
                for e in evidence_entries[bundle.trait.trait_id]
                if id(e) in entry_session_id
            )
            tasks.append(replace(bundle.task, evidence_session_ids=ids))

        history = ConversationHistory(
            history_id=history_id,
            sessions=tuple(sessions),
            persona_refs=tuple(b.trait.trait_id for b in bundles),
        )
        return history, tasks

    def _interleave(self, entries: list[_Entry], evidence_entries: dict[str, list[_Entry]]) -> list[_Entry]:
        cfg = self.corpus_cfg
        for _ in range(10):
            order = list(entries)
            self.rng.shuffle(order)
            while len(order) > cfg.max_sessions:
                drop_idx = max(
                    (i for i, e in enumerate(order) if e.role in ("distractor", "pool")),
                    default=None,
                )
                if drop_idx is None:
                    break
                order.pop(drop_idx)
            if len(order) < cfg.min_sessions:
                raise CorpusAssemblyError(
                    f"only {len(order)} sessions assembled; band is [{cfg.min_sessions}, {cfg.max_sessions}] "
                    "(supply more traits or a richer pool)"
                )
            if len(order) > cfg.max_sessions:
                raise CorpusAssemblyError(f"{len(order)} sessions exceed the band and none are droppable noise")
            if self._order_ok(order, evidence_entries):
                return order
        raise ConstraintUnsatisfiable("could not place gold sessions away from persona sessions in 10 shuffles")

    @staticmethod
    def _order_ok(order: list[_Entry], evidence_entries: dict[str, list[_Entry]]) -> bool:
        pos = {id(e): i for i, e in enumerate(order)}
        by_trait_persona = {e.trait_id: pos[id(e)] for e in order if e.role == "persona"}
        for trait_id, gold in evidence_entries.items():
            p_pos = by_trait_persona.get(trait_id)
            if p_pos is None:
                continue
            for entry in gold:
                if pos.get(id(entry)) == p_pos + 1:
                    return False
        return True

    def _draw_timestamps(self, n: int) -> list[str]:
        cfg = self.corpus_cfg
        if n > cfg.window_days:
            raise ConstraintUnsatisfiable(
                f"{n} sessions cannot get distinct days in a {cfg.window_days}-day window"
            )
        start = datetime.strptime(f"{cfg.start_date}T{cfg.session_hour}", "%Y-%m-%dT%H:%M:%S")
        offsets = sorted(self.rng.sample(range(cfg.window_days), n))
        return [(start + timedelta(days=off)).strftime("%Y-%m-%dT%H:%M:%S") for off in offsets]

    # .. end-to-end ..

    def generate_example(
        self,
        personas: list[str],
        noisy_pool: str | Path | None,
        kind: str = "both",
        history_id: str = "implex-000",
    ) -> tuple[ConversationHistory, list[QaTask]]:
        """One trait per persona, alternating kinds when kind == "both"."""
        if not personas:
            raise ValueError("need at least one persona")
        bundles = []
        for i, persona in enumerate(personas):
            traits = self.standardize_persona(persona)
            trait = next((t for t in traits if t.category == CATEGORY_EVERYDAY), traits[0])
            if kind == "both":
                trait_kind = KIND_OPPOSED if i % 2 == 0 else KIND_SUPPORTIVE
            else:
                trait_kind = kind
            bundles.append(self.build_trait_bundle(trait, trait_kind))
        return self.assemble_example(bundles, noisy_pool, history_id)


_NUMBERED_BLOCK_RE = re.compile(r"^\s*(\d+)[.):]\s*(.*\S)\s*$")


def _parse_numbered_block(raw: str) -> list[tuple[int, str]]:
    out = []
    for line in raw.splitlines():
        m = _NUMBERED_BLOCK_RE.match(line)
        if m:
            out.append((int(m.group(1)), m.group(2)))
    return out


# -- pool files ----------------------------------------------------------------


def load_pool(path: str | Path) -> dict[str, list[Session]]:
    """Load a directory of session JSONL files; each file is one pool source."""
    p = Path(path)
    if not p.is_dir():
        raise PoolTooSmall(f"pool directory not found: {path}")
    sources: dict[str, list[Session]] = {}
    for f in sorted(p.glob("*.jsonl")):
        sessions = []
        for line in f.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "session_id" not in obj:
                continue
            sessions.append(Session.from_dict(obj))
        if sessions:
            sources[f.stem] = sessions
    if not sources:
        raise PoolTooSmall(f"no usable sessions in pool directory {path}")
    return sources


def write_synthetic_pool(
    path: str | Path,
    n_sessions: int,
    seed: int,
    hint_words: list[str] | None = None,
    start_date: str = "2023-01-01",
) -> None:
    """Write one pool source of generated noise sessions.

    Every other session mixes in words from ``hint_words`` so that part of
    the pool lands close to future questions in embedding space.
    """
    hints = [w for w in (hint_words or []) if len(w) >= 4]
    lines = []
    base = datetime.strptime(start_date, "%Y-%m-%d")
    for i in range(n_sessions):
        w = pseudo_words(seed * 1000003 + i, 8)
        use_hints = hints and i % 2 == 0
        if use_hints:
            a = hints[i % len(hints)]
            b = hints[(i + 1) % len(hints)]
        else:
            a, b = w[5], w[6]
        turns = [
            Utterance(USER, f"Hi, my {w[0]} {w[1]} kept me busy."),
            Utterance(ASSISTANT, "Good to hear, go on."),
            Utterance(USER, f"Mostly {w[2]} {w[3]} and a bit of {w[4]}."),
            Utterance(ASSISTANT, "Sounds like a full stretch, anything else?"),
            Utterance(USER, f"Honestly, {a} {b} shapes my days now."),
            Utterance(ASSISTANT, "I see, that matters, tell me more."),
            Utterance(USER, f"Yes, {a} and {w[7]} keep coming up a lot."),
            Utterance(ASSISTANT, "Understood, noted for later."),
            Utterance(USER, f"I rely on {b} and {w[2]} these days."),
            Utterance(ASSISTANT, "Makes sense, good luck with it."),
        ]
        session = Session(
            session_id=f"pool-{seed}-{i:03d}",
            timestamp=(base + timedelta(days=i % 360)).strftime("%Y-%m-%dT%H:%M:%S"),
            turns=tuple(turns),
        )
        lines.append(json.dumps(session.to_dict(), sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- artifact emission ----------------------------------------------------------


def write_corpus(
    out_dir: str | Path,
    history: ConversationHistory,
    tasks: list[QaTask],
    review_queue: list[dict],
    config_snapshot: dict,
) -> dict[str, Path]:
    """Emit history JSONL, tasks JSONL and the review queue with embedded config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    history_path = out / "history.jsonl"
    header = {
        "history_id": history.history_id,
        "persona_refs": list(history.persona_refs),
        "config": config_snapshot,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines += [json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) for s in history.sessions]
    history_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    tasks_path = out / "tasks.jsonl"
    tlines = [json.dumps({"config": config_snapshot}, sort_keys=True, separators=(",", ":"))]
    tlines += [json.dumps(t.to_dict(), sort_keys=True, separators=(",", ":")) for t in tasks]
    tasks_path.write_text("\n".join(tlines) + "\n", encoding="utf-8")

    review_path = out / "review_queue.json"
    review_path.write_text(
        json.dumps({"config": config_snapshot, "items": review_queue}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    return {"history": history_path, "tasks": tasks_path, "review_queue": review_path}


def load_tasks(path: str | Path) -> list[QaTask]:
    tasks = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "task_id" in obj:
            tasks.append(QaTask.from_dict(obj))
    return tasks
