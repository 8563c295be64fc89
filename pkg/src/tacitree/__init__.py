"""Hierarchical long-term conversational memory.

Facts extracted from multi-session dialogue are clustered and recursively
summarized into a tree; retrieval walks the tree level by level, pruning
subtrees an LLM judges irrelevant. Ships with a synthetic-corpus generator
and a QA evaluation harness.
"""

from .model import (
    BuildConfig,
    ConversationHistory,
    EmbeddingVector,
    Fact,
    Session,
    Utterance,
    history_stats,
    parse_history,
    serialize_history,
)
from .gateway import BackendProfile, CallRecord, Gateway, ProfileSet
from .prompts import PromptTemplate, TEMPLATES
from .extraction import ExtractionResult, FactExtractor, dedupe_facts, embed_facts
from .clustering import (
    ClusterAssignment,
    GmmModel,
    ReducedMatrix,
    cluster_facts,
    fit_gmm,
    initial_cluster_count,
    reduce_embeddings,
)
from .tree import MemoryTree, TreeBuilder, TreeNode, load, persist, validate_tree
from .retrieval import RetrievalConfig, RetrievalResult, Retriever
from .corpus import CorpusBuilder, CorpusConfig, PersonaTrait, QaTask, ReasoningScenario
from .evaluation import (
    Evaluator,
    Report,
    STRATEGIES,
    flat_topk_baseline,
    implicitness_score,
    judge_answer,
    retrieval_f1,
)

__version__ = "0.1.0"
