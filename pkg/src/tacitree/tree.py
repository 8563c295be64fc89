"""Recursive cluster-and-summarize tree construction and its JSON store."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .clustering import cluster_facts, cluster_vectors
from .errors import CorruptNodeRef, SchemaVersionMismatch
from .gateway import BackendProfile, Gateway
from .model import BuildConfig, Fact, split_sentences
from .prompts import SUMMARIZE_ONE_SENTENCE, SUMMARIZE_RETAIN_DETAILS

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TREE_FILE_SUFFIX = ".tacitree.json"


@dataclass(frozen=True)
class TreeNode:
    """One summary node; level-0 nodes own facts, higher levels own children."""

    node_id: str
    level: int
    summary: str
    child_node_ids: tuple[str, ...] = ()
    fact_ids: tuple[str, ...] = ()
    summary_tokens: int = 0

    def __post_init__(self):
        object.__setattr__(self, "child_node_ids", tuple(self.child_node_ids))
        object.__setattr__(self, "fact_ids", tuple(self.fact_ids))
        if not self.summary.strip():
            raise ValueError(f"node {self.node_id}: empty summary")
        if self.level == 0 and (self.child_node_ids or not self.fact_ids):
            raise ValueError(f"node {self.node_id}: level-0 nodes own facts, not children")
        if self.level > 0 and (self.fact_ids or not self.child_node_ids):
            raise ValueError(f"node {self.node_id}: level-{self.level} nodes own children, not facts")

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "level": self.level,
            "summary": self.summary,
            "child_node_ids": list(self.child_node_ids),
            "fact_ids": list(self.fact_ids),
            "summary_tokens": self.summary_tokens,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TreeNode":
        return cls(
            node_id=obj["node_id"],
            level=int(obj["level"]),
            summary=obj["summary"],
            child_node_ids=tuple(obj.get("child_node_ids", ())),
            fact_ids=tuple(obj.get("fact_ids", ())),
            summary_tokens=int(obj.get("summary_tokens", 0)),
        )


@dataclass(frozen=True)
class MemoryTree:
    """A leveled forest of summary nodes over a fact store.

    ``levels[j]`` holds the nodes of level j; ``levels[root_level]`` is the
    root set retrieval starts from. Stored facts carry no embeddings (they
    are recomputable from the configured embedder).
    """

    tree_id: str
    levels: tuple[tuple[TreeNode, ...], ...]
    root_level: int
    config_snapshot: BuildConfig
    fact_store: dict[str, Fact]
    session_times: dict[str, str] = field(default_factory=dict)

    def nodes(self):
        for level in self.levels:
            yield from level

    def node(self, node_id: str) -> TreeNode:
        got = self._index().get(node_id)
        if got is None:
            raise KeyError(node_id)
        return got

    def _index(self) -> dict[str, TreeNode]:
        return {n.node_id: n for n in self.nodes()}

    def root_nodes(self) -> tuple[TreeNode, ...]:
        return self.levels[self.root_level]

    def node_count(self) -> int:
        return sum(len(level) for level in self.levels)

    def facts_of(self, node: TreeNode) -> list[Fact]:
        return [self.fact_store[fid] for fid in node.fact_ids]


def validate_tree(tree: MemoryTree) -> None:
    """Structural well-formedness: unique parents, full fact coverage, fan-out cap."""
    index = tree._index()
    k = tree.config_snapshot.k
    parent_of: dict[str, str] = {}
    for node in tree.nodes():
        if len(node.child_node_ids) > k or len(node.fact_ids) > k:
            raise ValueError(f"node {node.node_id} exceeds fan-out cap {k}")
        for child_id in node.child_node_ids:
            child = index.get(child_id)
            if child is None:
                raise CorruptNodeRef(node.node_id, child_id)
            if child.level != node.level - 1:
                raise CorruptNodeRef(node.node_id, child_id)
            if child_id in parent_of:
                raise ValueError(f"node {child_id} has two parents")
            parent_of[child_id] = node.node_id
        for fid in node.fact_ids:
            if fid not in tree.fact_store:
                raise CorruptNodeRef(node.node_id, fid)

    for level_no, level in enumerate(tree.levels[: tree.root_level]):
        for node in level:
            if node.node_id not in parent_of:
                raise ValueError(f"non-root node {node.node_id} at level {level_no} is an orphan")

    covered: list[str] = [fid for n in tree.levels[0] for fid in n.fact_ids]
    if sorted(covered) != sorted(tree.fact_store):
        raise ValueError("level-0 fact coverage does not match the fact store")
    if len(set(covered)) != len(covered):
        raise ValueError("a fact is owned by more than one leaf")


class TreeBuilder:
    """Builds a MemoryTree from embedded facts through the gateway."""

    def __init__(
        self,
        gateway: Gateway,
        chat_profile: BackendProfile,
        embed_profile: BackendProfile,
        cfg: BuildConfig,
    ):
        self.gateway = gateway
        self.chat_profile = chat_profile
        self.embed_profile = embed_profile
        self.cfg = cfg

    # .. summarization ..

    def summarize_cluster(self, texts: list[str], level: int) -> str:
        """Summarize one cluster; level 0 keeps details, higher levels abstract."""
        if not texts:
            raise ValueError("summarize_cluster requires at least one text")
        template = SUMMARIZE_RETAIN_DETAILS if level == 0 else SUMMARIZE_ONE_SENTENCE
        vars = {"text": "\n".join(texts)}
        out = self.gateway.chat(self.chat_profile, template, vars).text.strip()
        if not out:
            out = self.gateway.chat(self.chat_profile, template, dict(vars, attempt="2")).text.strip()
        if not out:
            firsts = [s[0] for t in texts if (s := split_sentences(t))]
            out = " ".join(firsts) or texts[0]
            logger.warning("summarizer returned nothing twice; joined first sentences instead")
        return out.replace("\n", " ").strip()

    def _summarize_many(self, groups: list[list[str]], level: int) -> list[str]:
        workers = max(1, min(self.cfg.max_inflight, len(groups)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda g: self.summarize_cluster(g, level), groups))

    # .. level construction ..

    def _make_level0(self, facts: list[Fact]) -> tuple[TreeNode, ...]:
        assignment = cluster_facts(facts, self.cfg)
        by_id = {f.fact_id: f for f in facts}
        ordered_cids = sorted(assignment.clusters)
        groups = [[by_id[fid].text for fid in assignment.clusters[cid]] for cid in ordered_cids]
        summaries = self._summarize_many(groups, level=0)
        nodes = []
        for i, cid in enumerate(ordered_cids):
            summary = summaries[i]
            nodes.append(
                TreeNode(
                    node_id=f"L0-{i}",
                    level=0,
                    summary=summary,
                    fact_ids=assignment.clusters[cid],
                    summary_tokens=self.gateway.count_tokens(summary),
                )
            )
        return tuple(nodes)

    def build_level(self, prev_nodes: list[TreeNode]) -> tuple[TreeNode, ...]:
        """Cluster the previous level's summaries into parent nodes."""
        if not prev_nodes:
            raise ValueError("build_level requires at least one node")
        level = prev_nodes[0].level + 1
        vectors = self.gateway.embed(self.embed_profile, [n.summary for n in prev_nodes])
        if len(prev_nodes) == 1:
            assignment_clusters = {0: (prev_nodes[0].node_id,)}
        else:
            assignment = cluster_vectors(vectors, self.cfg, [n.node_id for n in prev_nodes])
            assignment_clusters = {cid: assignment.clusters[cid] for cid in sorted(assignment.clusters)}
        by_id = {n.node_id: n for n in prev_nodes}
        ordered_cids = sorted(assignment_clusters)
        groups = [[by_id[nid].summary for nid in assignment_clusters[cid]] for cid in ordered_cids]
        summaries = self._summarize_many(groups, level=level)
        nodes = []
        for i, cid in enumerate(ordered_cids):
            summary = summaries[i]
            nodes.append(
                TreeNode(
                    node_id=f"L{level}-{i}",
                    level=level,
                    summary=summary,
                    child_node_ids=assignment_clusters[cid],
                    summary_tokens=self.gateway.count_tokens(summary),
                )
            )
        return tuple(nodes)

    # .. full build ..

    def build_tree(self, facts: list[Fact], session_times: dict[str, str] | None = None) -> MemoryTree:
        """Construct levels until one has fewer than L nodes; that level is the root set."""
        if not facts:
            raise ValueError("build_tree requires at least one fact")
        levels: list[tuple[TreeNode, ...]] = [self._make_level0(facts)]
        while len(levels[-1]) >= self.cfg.L and len(levels[-1]) > 1:
            levels.append(self.build_level(list(levels[-1])))
        root_level = len(levels) - 1

        stored = {f.fact_id: Fact(f.fact_id, f.source_session_id, f.text, None, f.token_count) for f in facts}
        tree = MemoryTree(
            tree_id=self._tree_id(facts),
            levels=tuple(levels),
            root_level=root_level,
            config_snapshot=self.cfg,
            fact_store=stored,
            session_times=dict(session_times or {}),
        )
        validate_tree(tree)
        return tree

    def _tree_id(self, facts: list[Fact]) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for f in facts:
            h.update(f.fact_id.encode())
            h.update(f.text.encode())
        return h.hexdigest()[:16]


# -- persistence ---------------------------------------------------------------


def persist(tree: MemoryTree) -> bytes:
    """Lossless canonical-JSON snapshot of the tree."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tree_id": tree.tree_id,
        "config": tree.config_snapshot.to_dict(),
        "root_level": tree.root_level,
        "session_times": tree.session_times,
        "nodes": [n.to_dict() for level in tree.levels for n in level],
        "facts": [tree.fact_store[fid].to_dict() for fid in sorted(tree.fact_store)],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def load(data: bytes) -> MemoryTree:
    """Parse a persisted tree and re-validate its structure."""
    doc = json.loads(data.decode("utf-8"))
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(version)

    nodes = [TreeNode.from_dict(o) for o in doc["nodes"]]
    max_level = max(n.level for n in nodes)
    levels = tuple(tuple(n for n in nodes if n.level == j) for j in range(max_level + 1))
    tree = MemoryTree(
        tree_id=doc["tree_id"],
        levels=levels,
        root_level=int(doc["root_level"]),
        config_snapshot=BuildConfig.from_dict(doc["config"]),
        fact_store={o["fact_id"]: Fact.from_dict(o) for o in doc["facts"]},
        session_times=dict(doc.get("session_times", {})),
    )
    if tree.root_level != max_level:
        raise SchemaVersionMismatch(f"root_level {tree.root_level} != top level {max_level}")
    validate_tree(tree)
    return tree
