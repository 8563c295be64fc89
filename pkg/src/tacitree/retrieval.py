"""Level-order tree retrieval with LLM relevance filtering and subtree pruning,
plus the per-fact brute-force oracle used as the recall reference."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .errors import EmptyTree
from .gateway import BackendProfile, Gateway
from .model import Fact
from .prompts import JUDGE_RELEVANCE
from .tree import MemoryTree, TreeNode

logger = logging.getLogger(__name__)

GRANULARITY_SUMMARIES = "summaries"
GRANULARITY_FACTS = "facts"

_INT_RE = re.compile(r"\d+")


@dataclass(frozen=True)
class RetrievalConfig:
    max_selected_per_level: int = 8
    fallback_top_m: int = 2
    answer_granularity: str = GRANULARITY_SUMMARIES
    batch_size: int = 15

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.fallback_top_m <= self.max_selected_per_level:
            raise ValueError("fallback_top_m must be in [0, max_selected_per_level]")
        if self.answer_granularity not in (GRANULARITY_SUMMARIES, GRANULARITY_FACTS):
            raise ValueError(f"unknown answer granularity: {self.answer_granularity!r}")

    def to_dict(self) -> dict:
        return {
            "max_selected_per_level": self.max_selected_per_level,
            "fallback_top_m": self.fallback_top_m,
            "answer_granularity": self.answer_granularity,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RetrievalConfig":
        return cls(**{k: obj[k] for k in cls().to_dict() if k in obj})


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    selected_per_level: dict[int, tuple[str, ...]]
    leaf_summaries: tuple[str, ...]
    facts: tuple[Fact, ...]
    judge_calls: int
    judged_nodes: int
    retrieved_tokens: int
    used_fallback: bool

    def session_ids(self) -> set[str]:
        return {f.source_session_id for f in self.facts}

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "selected_per_level": {str(k): list(v) for k, v in self.selected_per_level.items()},
            "leaf_summaries": list(self.leaf_summaries),
            "facts": [f.to_dict() for f in self.facts],
            "judge_calls": self.judge_calls,
            "judged_nodes": self.judged_nodes,
            "retrieved_tokens": self.retrieved_tokens,
            "used_fallback": self.used_fallback,
        }


@dataclass(frozen=True)
class BruteForceResult:
    facts: tuple[Fact, ...]
    judge_calls: int
    judged_nodes: int
    retrieved_tokens: int

    def session_ids(self) -> set[str]:
        return {f.source_session_id for f in self.facts}


def _chunks(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _render_candidates(candidates: list[tuple[str, str]]) -> str:
    return "\n".join(f"{i}. {text}" for i, (_, text) in enumerate(candidates, start=1))


class Retriever:
    """Runs queries against a MemoryTree through the judge backend."""

    def __init__(
        self,
        gateway: Gateway,
        judge_profile: BackendProfile,
        embed_profile: BackendProfile,
        rcfg: RetrievalConfig | None = None,
    ):
        self.gateway = gateway
        self.judge_profile = judge_profile
        self.embed_profile = embed_profile
        self.rcfg = rcfg or RetrievalConfig()

    # .. relevance judging ..

    def _parse_indices(self, text: str, n: int) -> list[int] | None:
        """Indices (1-based) from a judge response; None when wholly unparseable."""
        found = [int(m) for m in _INT_RE.findall(text)]
        valid: list[int] = []
        for idx in found:
            if 1 <= idx <= n and idx not in valid:
                valid.append(idx)
        if valid:
            return valid
        if "none" in text.lower():
            return []
        return None

    def _judge_batch(self, query: str, candidates: list[tuple[str, str]], rcfg: RetrievalConfig) -> tuple[list[str], int, int]:
        """Judge one batch; returns (selected ids, chat calls, candidates shown)."""
        if not 1 <= len(candidates) <= rcfg.batch_size:
            raise ValueError(f"batch must hold 1..{rcfg.batch_size} candidates")
        vars = {"query": query, "candidates": _render_candidates(candidates)}
        text = self.gateway.chat(self.judge_profile, JUDGE_RELEVANCE, vars).text
        calls = 1
        shown = len(candidates)
        indices = self._parse_indices(text, len(candidates))
        if indices is None:
            # Wholly unparseable: fall back to one yes/no-style call per candidate.
            logger.warning("unparseable relevance response; falling back to per-candidate judging")
            indices = []
            for i, cand in enumerate(candidates, start=1):
                single = {"query": query, "candidates": _render_candidates([cand])}
                resp = self.gateway.chat(self.judge_profile, JUDGE_RELEVANCE, single).text
                calls += 1
                shown += 1
                one = self._parse_indices(resp, 1)
                if one:
                    indices.append(i)
        indices = indices[: rcfg.max_selected_per_level]
        return [candidates[i - 1][0] for i in indices], calls, shown

    def judge_relevance(self, query: str, candidates: list[tuple[str, str]]) -> list[str]:
        """Ids of the candidates judged relevant (at most max_selected_per_level)."""
        ids, _, _ = self._judge_batch(query, candidates, self.rcfg)
        return ids

    # .. traversal ..

    def retrieve(self, tree: MemoryTree, query: str, rcfg: RetrievalConfig | None = None) -> RetrievalResult:
        """Descend from the root set, judging only children of selected parents.

        An empty root selection falls back (when fallback_top_m > 0) to the
        top root nodes by embedding cosine to the query, so answers are not
        systematically empty; lower levels never fall back, preserving
        pruning semantics.
        """
        rcfg = rcfg or self.rcfg
        if tree.node_count() == 0:
            raise EmptyTree("tree has no nodes")

        selected: dict[int, tuple[str, ...]] = {}
        judge_calls = 0
        judged_nodes = 0
        used_fallback = False

        candidates_nodes: list[TreeNode] = list(tree.root_nodes())
        for level in range(tree.root_level, -1, -1):
            picked: list[str] = []
            for batch in _chunks([(n.node_id, n.summary) for n in candidates_nodes], rcfg.batch_size):
                ids, calls, shown = self._judge_batch(query, batch, rcfg)
                picked.extend(ids)
                judge_calls += calls
                judged_nodes += shown

            if level == tree.root_level and not picked and rcfg.fallback_top_m > 0 and candidates_nodes:
                picked = self._fallback_roots(tree, query, rcfg.fallback_top_m)
                used_fallback = True

            # Deterministic merge: keep the level's node order, not judge order.
            order = {n.node_id: i for i, n in enumerate(tree.levels[level])}
            picked = sorted(set(picked), key=lambda nid: order[nid])
            selected[level] = tuple(picked)

            if level > 0:
                index = {n.node_id: n for n in tree.levels[level]}
                child_ids = [cid for nid in picked for cid in index[nid].child_node_ids]
                child_index = {n.node_id: n for n in tree.levels[level - 1]}
                candidates_nodes = [child_index[cid] for cid in child_ids]

        leaf_order = {n.node_id: i for i, n in enumerate(tree.levels[0])}
        leaves = [tree.levels[0][leaf_order[nid]] for nid in selected.get(0, ())]
        leaf_summaries = tuple(n.summary for n in leaves)

        seen: set[str] = set()
        facts: list[Fact] = []
        for node in leaves:
            for fact in tree.facts_of(node):
                if fact.fact_id not in seen:
                    seen.add(fact.fact_id)
                    facts.append(fact)
        facts.sort(key=lambda f: (tree.session_times.get(f.source_session_id, ""), f.fact_id))

        if rcfg.answer_granularity == GRANULARITY_SUMMARIES:
            retrieved_tokens = sum(n.summary_tokens for n in leaves)
        else:
            retrieved_tokens = sum(f.token_count for f in facts)

        return RetrievalResult(
            query=query,
            selected_per_level=selected,
            leaf_summaries=leaf_summaries,
            facts=tuple(facts),
            judge_calls=judge_calls,
            judged_nodes=judged_nodes,
            retrieved_tokens=retrieved_tokens,
            used_fallback=used_fallback,
        )

    def _fallback_roots(self, tree: MemoryTree, query: str, top_m: int) -> list[str]:
        roots = list(tree.root_nodes())
        vectors = self.gateway.embed(self.embed_profile, [query] + [n.summary for n in roots])
        qv, rest = vectors[0], vectors[1:]
        scored = sorted(zip(roots, rest), key=lambda pair: (-qv.cosine(pair[1]), pair[0].node_id))
        return [n.node_id for n, _ in scored[:top_m]]

    # .. the oracle ..

    def brute_force_retrieve(self, facts: list[Fact], query: str, rcfg: RetrievalConfig | None = None) -> BruteForceResult:
        """Judge every fact individually (batched only for call accounting)."""
        rcfg = rcfg or self.rcfg
        kept: list[Fact] = []
        calls = 0
        for batch_facts in _chunks(list(facts), rcfg.batch_size):
            candidates = [(f.fact_id, f.text) for f in batch_facts]
            vars = {"query": query, "candidates": _render_candidates(candidates)}
            text = self.gateway.chat(self.judge_profile, JUDGE_RELEVANCE, vars).text
            calls += 1
            indices = self._parse_indices(text, len(candidates)) or []
            by_pos = {i: f for i, f in enumerate(batch_facts, start=1)}
            kept.extend(by_pos[i] for i in indices)
        return BruteForceResult(
            facts=tuple(kept),
            judge_calls=calls,
            judged_nodes=len(facts),
            retrieved_tokens=sum(f.token_count for f in kept),
        )
