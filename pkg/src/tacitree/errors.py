"""Exception taxonomy shared across the package."""

from __future__ import annotations


class TacitreeError(Exception):
    """Base class for all package errors."""


# -- conversation ingestion --


class MalformedLine(TacitreeError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"malformed line {line_no}" + (f": {reason}" if reason else ""))


class DuplicateSessionId(TacitreeError):
    def __init__(self, session_id: str):
        self.session_id = session_id
        super().__init__(f"duplicate session id: {session_id}")


class EmptySession(TacitreeError):
    def __init__(self, session_id: str):
        self.session_id = session_id
        super().__init__(f"session has no turns: {session_id}")


class BadTimestamp(TacitreeError):
    def __init__(self, session_id: str, value: str = ""):
        self.session_id = session_id
        self.value = value
        super().__init__(f"bad timestamp for session {session_id}: {value!r}")


# -- backend gateway --


class BackendUnavailable(TacitreeError):
    """All retries against a backend were exhausted."""


class TemplateVarMissing(TacitreeError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"template variable not bound: {name}")


class EmptyInput(TacitreeError):
    """An operation received an empty input it cannot act on."""


# -- fact extraction --


class ExtractionEmpty(TacitreeError):
    def __init__(self, session_id: str):
        self.session_id = session_id
        super().__init__(f"no parseable facts extracted from session {session_id}")


class MissingEmbedding(TacitreeError):
    def __init__(self, fact_id: str):
        self.fact_id = fact_id
        super().__init__(f"fact has no embedding: {fact_id}")


# -- clustering --


class TooFewPoints(TacitreeError):
    def __init__(self, n: int):
        self.n = n
        super().__init__(f"need at least 2 points to reduce, got {n}")


# -- tree store --


class SchemaVersionMismatch(TacitreeError):
    def __init__(self, found):
        self.found = found
        super().__init__(f"unsupported tree schema version: {found!r}")


class CorruptNodeRef(TacitreeError):
    def __init__(self, node_id: str, ref: str):
        self.node_id = node_id
        self.ref = ref
        super().__init__(f"node {node_id} references unknown id {ref}")


class EmptyTree(TacitreeError):
    """Retrieval was asked to run against a tree with no nodes."""


# -- corpus generation --


class UnparseableOutput(TacitreeError):
    """Model output could not be parsed even after a re-ask."""


class UnparseableTranscript(UnparseableOutput):
    """Generated dialogue did not parse into speaker turns."""


class TooFewScenarios(TacitreeError):
    def __init__(self, usable: int):
        self.usable = usable
        super().__init__(f"fewer than 5 usable scenarios generated ({usable})")


class NoCandidates(TacitreeError):
    """Selection was requested over an empty candidate set."""


class QuestionTooLong(TacitreeError):
    def __init__(self, question: str):
        self.question = question
        super().__init__(f"generated question exceeds 20 words: {question!r}")


class PoolTooSmall(TacitreeError):
    """The noisy-session pool cannot satisfy the requested injection."""


class ConstraintUnsatisfiable(TacitreeError):
    """Session ordering/timestamp constraints failed after bounded retries."""


class CorpusAssemblyError(TacitreeError):
    """Assembled history violated a hard constraint (e.g. session-count band)."""
