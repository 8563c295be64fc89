"""Command-line surface: build, retrieve, answer, gen, eval, score-implicitness.

Exit codes: 0 ok, 1 configuration error, 2 input error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import corpus as corpus_mod
from .corpus import CorpusBuilder, CorpusConfig, load_tasks, write_corpus
from .errors import (
    BackendUnavailable,
    BadTimestamp,
    ConstraintUnsatisfiable,
    CorpusAssemblyError,
    CorruptNodeRef,
    DuplicateSessionId,
    EmptySession,
    MalformedLine,
    PoolTooSmall,
    SchemaVersionMismatch,
    TacitreeError,
)
from .evaluation import (
    Evaluator,
    STRATEGIES,
    STRATEGY_BRUTE_FORCE,
    STRATEGY_TACITREE_FACTS,
    STRATEGY_TACITREE_SUMMARY,
    implicitness_score,
)
from .extraction import FactExtractor, dedupe_facts, embed_facts
from .gateway import FixtureStore, Gateway, ProfileSet
from .model import BuildConfig, history_stats, parse_history_path
from .prompts import ANSWER_QUESTION
from .retrieval import RetrievalConfig, Retriever
from .tree import TREE_FILE_SUFFIX, TreeBuilder, load as load_tree, persist

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INPUT = 2
EXIT_BACKEND = 3

_INPUT_ERRORS = (
    MalformedLine,
    DuplicateSessionId,
    EmptySession,
    BadTimestamp,
    SchemaVersionMismatch,
    CorruptNodeRef,
    PoolTooSmall,
    CorpusAssemblyError,
    ConstraintUnsatisfiable,
    FileNotFoundError,
    NotADirectoryError,
)


class ConfigError(TacitreeError):
    pass


@dataclass
class RunConfig:
    """Everything a command needs: backend bindings plus module knobs."""

    backend: str = "mock"
    profiles: ProfileSet = field(default_factory=ProfileSet.mock)
    build: BuildConfig = field(default_factory=BuildConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    k_top: int = 10
    f1_unit: str = "session"
    fixtures_path: str | None = None

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        try:
            cfg = cls()
            if "backend" in doc:
                cfg.backend = doc["backend"]
            if cfg.backend == "http":
                if "profiles" not in doc:
                    raise ConfigError("http backend requires a profiles block")
                cfg.profiles = ProfileSet.from_dict(doc["profiles"])
            if "build" in doc:
                cfg.build = BuildConfig.from_dict(doc["build"])
            if "retrieval" in doc:
                cfg.retrieval = RetrievalConfig.from_dict(doc["retrieval"])
            if "corpus" in doc:
                cfg.corpus = CorpusConfig(**doc["corpus"])
            cfg.k_top = int(doc.get("k_top", cfg.k_top))
            cfg.f1_unit = doc.get("f1_unit", cfg.f1_unit)
            cfg.fixtures_path = doc.get("fixtures")
            return cfg
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config file: {exc}") from exc

    def apply_flags(self, args: argparse.Namespace) -> None:
        if getattr(args, "backend", None):
            self.backend = args.backend
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown backend: {self.backend!r}")
        if self.backend == "mock":
            self.profiles = ProfileSet.mock()
        if getattr(args, "seed", None) is not None:
            self.build = replace(self.build, seed=args.seed)
        if getattr(args, "fixtures", None):
            self.fixtures_path = args.fixtures

    def make_gateway(self) -> Gateway:
        fixtures = FixtureStore(self.fixtures_path) if self.fixtures_path else None
        return Gateway(max_inflight=self.build.max_inflight, fixtures=fixtures)

    def snapshot(self) -> dict:
        return {
            "backend": self.backend,
            "build": self.build.to_dict(),
            "retrieval": self.retrieval.to_dict(),
            "corpus": self.corpus.to_dict(),
            "k_top": self.k_top,
            "f1_unit": self.f1_unit,
        }


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--backend", choices=["mock", "http"], help="backend kind (default mock)")
    parser.add_argument("--seed", type=int, help="override the build seed")
    parser.add_argument("--fixtures", help="recorded-response fixture file (replay mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tacitree", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="parse a history, extract facts and build a memory tree")
    p.add_argument("history", help="history JSONL file or directory")
    p.add_argument("--out", help=f"output tree path (default: alongside input, {TREE_FILE_SUFFIX})")
    _add_common(p)

    p = sub.add_parser("retrieve", help="query a built tree")
    p.add_argument("tree", help="tree file")
    p.add_argument("query")
    p.add_argument("--granularity", choices=["summaries", "facts"], default="summaries")
    p.add_argument("--oracle", action="store_true", help="brute-force judge every fact instead")
    p.add_argument("--fallback-top-m", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("answer", help="retrieve and answer one query")
    p.add_argument("tree")
    p.add_argument("query")
    p.add_argument("--granularity", choices=["summaries", "facts"], default="summaries")
    _add_common(p)

    p = sub.add_parser("gen", help="generate a synthetic evaluation corpus")
    p.add_argument("personas", help="file with one raw persona per line")
    p.add_argument("--pool", help="directory of noisy-session JSONL sources")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=["opposed", "supportive", "both"], default="both")
    p.add_argument("--history-id", default="implex-000")
    _add_common(p)

    p = sub.add_parser("eval", help="run the QA evaluation harness")
    p.add_argument("--history", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--tree", help="tree file (required for tacitree strategies)")
    p.add_argument("--strategies", default=STRATEGY_TACITREE_SUMMARY, help="comma-separated list")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--f1-unit", choices=["session", "fact"], default=None)
    _add_common(p)

    p = sub.add_parser("score-implicitness", help="implicitness score over a tasks file")
    p.add_argument("tasks")
    _add_common(p)

    return parser


# -- commands -------------------------------------------------------------------


def _build_facts(cfg: RunConfig, gateway: Gateway, history):
    extractor = FactExtractor(gateway, cfg.profiles.framework, max_inflight=cfg.build.max_inflight)
    results = extractor.extract_history(history)
    facts = [f for r in results for f in r.facts]
    facts = embed_facts(gateway, cfg.profiles.embedder, facts)
    return dedupe_facts(facts)


def cmd_build(args: argparse.Namespace, cfg: RunConfig) -> int:
    history = parse_history_path(args.history)
    gateway = cfg.make_gateway()
    facts = _build_facts(cfg, gateway, history)
    builder = TreeBuilder(gateway, cfg.profiles.framework, cfg.profiles.embedder, cfg.build)
    tree = builder.build_tree(facts, session_times=history.session_times())

    out = Path(args.out) if args.out else Path(args.history).with_suffix(TREE_FILE_SUFFIX)
    out.write_bytes(persist(tree))

    stats = history_stats(history, gateway.count_tokens)
    print(f"tree {tree.tree_id} -> {out}")
    print(f"sessions={stats.session_count} turns={stats.turn_count} tokens={stats.total_tokens}")
    print(f"facts={len(tree.fact_store)} root_level={tree.root_level}")
    for level_no, level in enumerate(tree.levels):
        print(f"level {level_no}: {len(level)} nodes")
    return EXIT_OK


def _load_tree_file(path: str):
    return load_tree(Path(path).read_bytes())


def cmd_retrieve(args: argparse.Namespace, cfg: RunConfig) -> int:
    tree = _load_tree_file(args.tree)
    gateway = cfg.make_gateway()
    rcfg = replace(cfg.retrieval, answer_granularity=args.granularity)
    if args.fallback_top_m is not None:
        rcfg = replace(rcfg, fallback_top_m=args.fallback_top_m)
    retriever = Retriever(gateway, cfg.profiles.framework, cfg.profiles.embedder, rcfg)

    if args.oracle:
        facts = sorted(
            tree.fact_store.values(),
            key=lambda f: (tree.session_times.get(f.source_session_id, ""), f.fact_id),
        )
        result = retriever.brute_force_retrieve(facts, args.query)
        doc = {
            "query": args.query,
            "facts": [f.to_dict() for f in result.facts],
            "judge_calls": result.judge_calls,
            "judged_nodes": result.judged_nodes,
            "retrieved_tokens": result.retrieved_tokens,
            "oracle": True,
        }
    else:
        doc = retriever.retrieve(tree, args.query).to_dict()
    print(json.dumps(doc, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_answer(args: argparse.Namespace, cfg: RunConfig) -> int:
    tree = _load_tree_file(args.tree)
    gateway = cfg.make_gateway()
    rcfg = replace(cfg.retrieval, answer_granularity=args.granularity)
    retriever = Retriever(gateway, cfg.profiles.framework, cfg.profiles.embedder, rcfg)
    result = retriever.retrieve(tree, args.query)
    if args.granularity == "summaries":
        context = "\n".join(result.leaf_summaries)
    else:
        context = "\n".join(f.text for f in result.facts)
    answer = gateway.chat(
        cfg.profiles.framework,
        ANSWER_QUESTION,
        {"question": args.query, "context": context or "(nothing retrieved)"},
    ).text.strip()
    print(json.dumps({"answer": answer, "retrieval": result.to_dict()}, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_gen(args: argparse.Namespace, cfg: RunConfig) -> int:
    personas_path = Path(args.personas)
    personas = [
        line.strip()
        for line in personas_path.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    if not personas:
        raise MalformedLine(1, "personas file is empty")
    gateway = cfg.make_gateway()
    builder = CorpusBuilder(gateway, cfg.profiles, cfg.build, cfg.corpus)
    history, tasks = builder.generate_example(
        personas, args.pool, kind=args.kind, history_id=args.history_id
    )
    paths = write_corpus(args.out, history, tasks, builder.review_queue, cfg.snapshot())
    print(f"history: {paths['history']} ({len(history.sessions)} sessions)")
    print(f"tasks: {paths['tasks']} ({len(tasks)} tasks)")
    print(f"review queue: {paths['review_queue']} ({len(builder.review_queue)} items)")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown strategies: {unknown}; choose from {list(STRATEGIES)}")
    needs_tree = {STRATEGY_TACITREE_SUMMARY, STRATEGY_TACITREE_FACTS} & set(strategies)
    if needs_tree and not args.tree:
        raise ConfigError(f"strategies {sorted(needs_tree)} require --tree")

    history = parse_history_path(args.history)
    tasks = load_tasks(args.tasks)
    tree = _load_tree_file(args.tree) if args.tree else None
    gateway = cfg.make_gateway()

    facts = None
    if tree is None:
        facts = _build_facts(cfg, gateway, history)

    evaluator = Evaluator(
        gateway,
        cfg.profiles,
        rcfg=cfg.retrieval,
        k_top=cfg.k_top,
        f1_unit=args.f1_unit or cfg.f1_unit,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    comparison = {}
    for strategy in strategies:
        report = evaluator.run_eval(history, tasks, strategy, tree=tree, facts=facts)
        (out_dir / f"report_{strategy}.json").write_bytes(report.to_json())
        (out_dir / f"report_{strategy}.csv").write_text(report.to_csv(), encoding="utf-8")
        comparison[strategy] = report.aggregates
        agg = report.aggregates
        ratio = agg["token_to_accuracy"]
        print(
            f"{strategy}: mean_f1={agg['mean_f1']:.4f} accuracy={agg['accuracy']:.4f} "
            f"mean_tokens={agg['mean_tokens']:.1f} token_to_accuracy="
            + ("n/a" if ratio is None else f"{ratio:.1f}")
        )
    (out_dir / "comparison.json").write_text(
        json.dumps({"config": cfg.snapshot(), "strategies": comparison}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    return EXIT_OK


def cmd_score_implicitness(args: argparse.Namespace, cfg: RunConfig) -> int:
    tasks = load_tasks(args.tasks)
    gateway = cfg.make_gateway()
    scores = {
        t.task_id: implicitness_score(gateway, cfg.profiles.embedder, t.question, t.gold_answer)
        for t in tasks
    }
    mean = sum(scores.values()) / len(scores) if scores else 0.0
    print(json.dumps({"per_task": scores, "mean": mean}, sort_keys=True, indent=1))
    return EXIT_OK


_COMMANDS = {
    "build": cmd_build,
    "retrieve": cmd_retrieve,
    "answer": cmd_answer,
    "gen": cmd_gen,
    "eval": cmd_eval,
    "score-implicitness": cmd_score_implicitness,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(getattr(args, "config", None))
        cfg.apply_flags(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendUnavailable as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except _INPUT_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
