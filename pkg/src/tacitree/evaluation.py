"""Metrics and the evaluation harness: retrieval F1, implicitness score,
LLM-judged answer correctness, baselines and report emission."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field

from .errors import TacitreeError
from .gateway import BackendProfile, Gateway, ProfileSet
from .model import ConversationHistory, Fact, history_stats, render_transcript
from .prompts import ANSWER_QUESTION, JUDGE_ANSWER
from .corpus import QaTask
from .retrieval import (
    GRANULARITY_FACTS,
    GRANULARITY_SUMMARIES,
    RetrievalConfig,
    Retriever,
)
from .tree import MemoryTree

logger = logging.getLogger(__name__)

STRATEGY_TACITREE_SUMMARY = "tacitree_summary"
STRATEGY_TACITREE_FACTS = "tacitree_facts"
STRATEGY_FLAT_TOPK = "flat_topk"
STRATEGY_BRUTE_FORCE = "brute_force"
STRATEGY_FULL_CONTEXT = "full_context"

STRATEGIES = (
    STRATEGY_TACITREE_SUMMARY,
    STRATEGY_TACITREE_FACTS,
    STRATEGY_FLAT_TOPK,
    STRATEGY_BRUTE_FORCE,
    STRATEGY_FULL_CONTEXT,
)

F1_UNIT_SESSION = "session"
F1_UNIT_FACT = "fact"


def retrieval_f1(c_r: set, c_g: set) -> float:
    """2|Cr n Cg| / (|Cr| + |Cg|); both sets empty counts as perfect vacuous retrieval."""
    if not c_r and not c_g:
        return 1.0
    if not c_r or not c_g:
        return 0.0
    return 2.0 * len(set(c_r) & set(c_g)) / (len(c_r) + len(c_g))


def implicitness_score(
    gateway: Gateway, embed_profile: BackendProfile, question: str, answer: str
) -> float:
    """1 - cosine(embed(Q), embed(A)); higher means harder to reach by similarity."""
    if not question.strip() or not answer.strip():
        raise ValueError("implicitness_score requires non-empty question and answer")
    qv, av = gateway.embed(embed_profile, [question, answer])
    return 1.0 - qv.cosine(av)


def judge_answer(
    gateway: Gateway,
    judge_profile: BackendProfile,
    question: str,
    predicted: str,
    gold: str,
) -> bool:
    """LLM-judged semantic equivalence; byte-equal answers short-circuit to True."""
    if predicted == gold:
        return True
    vars = {"question": question, "predicted": predicted, "gold": gold}
    verdict = _parse_yes_no(gateway.chat(judge_profile, JUDGE_ANSWER, vars).text)
    if verdict is None:
        verdict = _parse_yes_no(gateway.chat(judge_profile, JUDGE_ANSWER, dict(vars, attempt="2")).text)
        if verdict is None:
            logger.warning("judge response unparseable twice; defaulting to incorrect")
            return False
    return verdict


def _parse_yes_no(text: str) -> bool | None:
    head = text.strip().split()
    if not head:
        return None
    word = head[0].strip(".,!").lower()
    if word == "yes":
        return True
    if word == "no":
        return False
    return None


def flat_topk_baseline(
    gateway: Gateway,
    embed_profile: BackendProfile,
    facts: list[Fact],
    query: str,
    k_top: int = 10,
) -> list[Fact]:
    """Top k facts by embedding cosine to the query; ties break by fact_id."""
    if not facts:
        return []
    for f in facts:
        if f.embedding is None:
            raise ValueError(f"flat_topk_baseline requires embedded facts ({f.fact_id})")
    qv = gateway.embed(embed_profile, [query])[0]
    scored = sorted(facts, key=lambda f: (-qv.cosine(f.embedding), f.fact_id))
    return scored[:k_top]


@dataclass(frozen=True)
class EvalRecord:
    task_id: str
    kind: str
    retrieved_session_ids: tuple[str, ...]
    gold_session_ids: tuple[str, ...]
    retrieval_f1: float
    predicted_answer: str
    correct: bool
    retrieved_tokens: int
    judge_calls: int
    judged_nodes: int
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "retrieved_session_ids": list(self.retrieved_session_ids),
            "gold_session_ids": list(self.gold_session_ids),
            "retrieval_f1": self.retrieval_f1,
            "predicted_answer": self.predicted_answer,
            "correct": self.correct,
            "retrieved_tokens": self.retrieved_tokens,
            "judge_calls": self.judge_calls,
            "judged_nodes": self.judged_nodes,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalRecord":
        return cls(
            task_id=obj["task_id"],
            kind=obj.get("kind", ""),
            retrieved_session_ids=tuple(obj["retrieved_session_ids"]),
            gold_session_ids=tuple(obj["gold_session_ids"]),
            retrieval_f1=float(obj["retrieval_f1"]),
            predicted_answer=obj["predicted_answer"],
            correct=bool(obj["correct"]),
            retrieved_tokens=int(obj["retrieved_tokens"]),
            judge_calls=int(obj["judge_calls"]),
            judged_nodes=int(obj["judged_nodes"]),
            error=obj.get("error", ""),
        )


@dataclass(frozen=True)
class Report:
    run_id: str
    config: dict
    records: tuple[EvalRecord, ...]
    aggregates: dict

    def to_json(self) -> bytes:
        doc = {
            "run_id": self.run_id,
            "config": self.config,
            "records": [r.to_dict() for r in self.records],
            "aggregates": self.aggregates,
        }
        return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["task_id", "kind", "retrieval_f1", "correct", "retrieved_tokens", "judge_calls", "judged_nodes", "error"]
        )
        for r in self.records:
            writer.writerow(
                [r.task_id, r.kind, repr(r.retrieval_f1), int(r.correct), r.retrieved_tokens, r.judge_calls, r.judged_nodes, r.error]
            )
        agg = self.aggregates
        ratio = agg["token_to_accuracy"]
        writer.writerow(
            [
                "AGGREGATE",
                "",
                repr(agg["mean_f1"]),
                repr(agg["accuracy"]),
                repr(agg["mean_tokens"]),
                "" if ratio is None else repr(ratio),
                "",
                "",
            ]
        )
        return buf.getvalue()


def compute_aggregates(records: list[EvalRecord], implicitness: dict[str, float]) -> dict:
    """Aggregate rows; tasks whose retrieval errored are excluded from every mean."""
    scored = [r for r in records if not r.error.startswith("retrieval:")]
    n = len(scored)
    mean_f1 = sum(r.retrieval_f1 for r in scored) / n if n else 0.0
    accuracy = sum(1 for r in scored if r.correct) / n if n else 0.0
    mean_tokens = sum(r.retrieved_tokens for r in scored) / n if n else 0.0
    per_task = {k: implicitness[k] for k in sorted(implicitness)}
    mean_is = sum(per_task.values()) / len(per_task) if per_task else 0.0
    return {
        "mean_f1": mean_f1,
        "accuracy": accuracy,
        "mean_tokens": mean_tokens,
        "token_to_accuracy": (mean_tokens / accuracy) if accuracy > 0 else None,
        "implicitness_stats": {"per_task": per_task, "mean": mean_is},
        "task_count": len(records),
        "scored_task_count": n,
    }


def load_report(data: bytes) -> Report:
    """Parse a report and verify the stored aggregates are recomputable bit-exactly."""
    doc = json.loads(data.decode("utf-8"))
    records = [EvalRecord.from_dict(o) for o in doc["records"]]
    report = Report(
        run_id=doc["run_id"], config=doc["config"], records=tuple(records), aggregates=doc["aggregates"]
    )
    recomputed = compute_aggregates(records, report.aggregates["implicitness_stats"]["per_task"])
    if recomputed != report.aggregates:
        raise TacitreeError("report aggregates do not match their records")
    return report


class Evaluator:
    """Runs QA tasks against a strategy and scores retrieval + answers."""

    def __init__(
        self,
        gateway: Gateway,
        profiles: ProfileSet,
        rcfg: RetrievalConfig | None = None,
        k_top: int = 10,
        f1_unit: str = F1_UNIT_SESSION,
    ):
        if f1_unit not in (F1_UNIT_SESSION, F1_UNIT_FACT):
            raise ValueError(f"unknown f1 unit: {f1_unit!r}")
        self.gateway = gateway
        self.profiles = profiles
        self.rcfg = rcfg or RetrievalConfig()
        self.k_top = k_top
        self.f1_unit = f1_unit
        self.retriever = Retriever(gateway, profiles.framework, profiles.embedder, self.rcfg)

    # .. fact substrate ..

    def _facts_for(self, tree: MemoryTree | None, facts: list[Fact] | None) -> list[Fact]:
        if facts is not None:
            return list(facts)
        if tree is not None:
            ordered = sorted(
                tree.fact_store.values(),
                key=lambda f: (tree.session_times.get(f.source_session_id, ""), f.fact_id),
            )
            return ordered
        return []

    def _embedded(self, facts: list[Fact]) -> list[Fact]:
        missing = [f for f in facts if f.embedding is None]
        if not missing:
            return facts
        vectors = self.gateway.embed(self.profiles.embedder, [f.text for f in facts])
        return [f.with_embedding(v) for f, v in zip(facts, vectors)]

    # .. single-task retrieval by strategy ..

    def _retrieve_for_task(
        self,
        strategy: str,
        question: str,
        history: ConversationHistory,
        tree: MemoryTree | None,
        facts: list[Fact],
        full_tokens: int,
    ) -> tuple[str, set[str], set[str], int, int, int]:
        """Returns (payload, session_ids, fact_ids, tokens, judge_calls, judged_nodes)."""
        if strategy in (STRATEGY_TACITREE_SUMMARY, STRATEGY_TACITREE_FACTS):
            if tree is None:
                raise ValueError(f"strategy {strategy} requires a built tree")
            granularity = (
                GRANULARITY_SUMMARIES if strategy == STRATEGY_TACITREE_SUMMARY else GRANULARITY_FACTS
            )
            rcfg = RetrievalConfig(
                max_selected_per_level=self.rcfg.max_selected_per_level,
                fallback_top_m=self.rcfg.fallback_top_m,
                answer_granularity=granularity,
                batch_size=self.rcfg.batch_size,
            )
            result = self.retriever.retrieve(tree, question, rcfg)
            if granularity == GRANULARITY_SUMMARIES:
                payload = "\n".join(result.leaf_summaries)
            else:
                payload = "\n".join(f.text for f in result.facts)
            fact_ids = {f.fact_id for f in result.facts}
            return payload, result.session_ids(), fact_ids, result.retrieved_tokens, result.judge_calls, result.judged_nodes

        if strategy == STRATEGY_FLAT_TOPK:
            top = flat_topk_baseline(self.gateway, self.profiles.embedder, facts, question, self.k_top)
            payload = "\n".join(f.text for f in top)
            tokens = sum(f.token_count for f in top)
            return payload, {f.source_session_id for f in top}, {f.fact_id for f in top}, tokens, 0, 0

        if strategy == STRATEGY_BRUTE_FORCE:
            result = self.retriever.brute_force_retrieve(facts, question, self.rcfg)
            payload = "\n".join(f.text for f in result.facts)
            fact_ids = {f.fact_id for f in result.facts}
            return payload, result.session_ids(), fact_ids, result.retrieved_tokens, result.judge_calls, result.judged_nodes

        if strategy == STRATEGY_FULL_CONTEXT:
            payload = "\n\n".join(render_transcript(s) for s in history.sessions)
            sessions = set(history.session_ids())
            fact_ids = {f.fact_id for f in facts}
            return payload, sessions, fact_ids, full_tokens, 0, 0

        raise ValueError(f"unknown strategy: {strategy!r}")

    # .. full run ..

    def run_eval(
        self,
        history: ConversationHistory,
        tasks: list[QaTask],
        strategy: str,
        tree: MemoryTree | None = None,
        facts: list[Fact] | None = None,
    ) -> Report:
        base_facts = self._facts_for(tree, facts)
        if strategy == STRATEGY_FLAT_TOPK:
            base_facts = self._embedded(base_facts)
        full_tokens = history_stats(history, self.gateway.count_tokens).total_tokens

        records: list[EvalRecord] = []
        implicitness: dict[str, float] = {}
        for task in sorted(tasks, key=lambda t: t.task_id):
            implicitness[task.task_id] = implicitness_score(
                self.gateway, self.profiles.embedder, task.question, task.gold_answer
            )
            gold = set(task.evidence_session_ids)
            try:
                payload, sessions, fact_ids, tokens, calls, judged = self._retrieve_for_task(
                    strategy, task.question, history, tree, base_facts, full_tokens
                )
            except TacitreeError as exc:
                records.append(
                    EvalRecord(
                        task_id=task.task_id,
                        kind=task.kind,
                        retrieved_session_ids=(),
                        gold_session_ids=tuple(sorted(gold)),
                        retrieval_f1=0.0,
                        predicted_answer="",
                        correct=False,
                        retrieved_tokens=0,
                        judge_calls=0,
                        judged_nodes=0,
                        error=f"retrieval:{type(exc).__name__}",
                    )
                )
                continue

            if self.f1_unit == F1_UNIT_SESSION:
                f1 = retrieval_f1(sessions, gold)
            else:
                gold_facts = {f.fact_id for f in base_facts if f.source_session_id in gold}
                f1 = retrieval_f1(fact_ids, gold_facts)

            error = ""
            try:
                predicted = self.gateway.chat(
                    self.profiles.framework,
                    ANSWER_QUESTION,
                    {"question": task.question, "context": payload or "(nothing retrieved)"},
                ).text.strip()
                correct = judge_answer(
                    self.gateway, self.profiles.judge, task.question, predicted, task.gold_answer
                )
            except TacitreeError as exc:
                predicted, correct, error = "", False, f"answer:{type(exc).__name__}"

            records.append(
                EvalRecord(
                    task_id=task.task_id,
                    kind=task.kind,
                    retrieved_session_ids=tuple(sorted(sessions)),
                    gold_session_ids=tuple(sorted(gold)),
                    retrieval_f1=f1,
                    predicted_answer=predicted,
                    correct=correct,
                    retrieved_tokens=tokens,
                    judge_calls=calls,
                    judged_nodes=judged,
                    error=error,
                )
            )

        config = {
            "strategy": strategy,
            "retrieval": self.rcfg.to_dict(),
            "k_top": self.k_top,
            "f1_unit": self.f1_unit,
            "history_id": history.history_id,
            "tree_id": tree.tree_id if tree is not None else None,
            "tokenizer": "bytes/4",
        }
        run_id = hashlib.sha256(
            json.dumps([config, [t.task_id for t in tasks]], sort_keys=True).encode()
        ).hexdigest()[:12]
        return Report(
            run_id=run_id,
            config=config,
            records=tuple(records),
            aggregates=compute_aggregates(records, implicitness),
        )
