"""Prompt templates used by every chat-completion call site.

Placeholders use ``{name}`` syntax; a template's required variables are
derived from its body, and rendering fails if any is unbound.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import TemplateVarMissing

_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")

# Behavioural families; the mock backend dispatches on these.
FAMILY_EXTRACT = "extract"
FAMILY_SUMMARIZE = "summarize"
FAMILY_RELEVANCE = "relevance"
FAMILY_VERIFY = "verify"
FAMILY_JUDGE = "judge"
FAMILY_ANSWER = "answer"
FAMILY_GENERATE = "generate"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    family: str = FAMILY_GENERATE
    required_vars: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        found = frozenset(_PLACEHOLDER_RE.findall(self.body))
        object.__setattr__(self, "required_vars", found)

    def render(self, vars: dict[str, str]) -> str:
        for name in sorted(self.required_vars):
            if name not in vars:
                raise TemplateVarMissing(name)

        def _sub(m: re.Match) -> str:
            return str(vars[m.group(1)])

        return _PLACEHOLDER_RE.sub(_sub, self.body)


EXTRACT_SESSION_FACTS = PromptTemplate(
    "extract_session_facts",
    family=FAMILY_EXTRACT,
    body=(
        "Below is one session of a conversation between a user (Speaker1) and an assistant.\n"
        "Extract every fact about the user that matters for long-term context: habits,\n"
        "preferences, life events, plans, constraints.\n"
        "Write each fact as one standalone declarative sentence. Refer to the user as\n"
        '"The user" instead of pronouns. Output one fact per line with no numbering\n'
        "and no commentary.\n\n"
        "{transcript}\n"
    ),
)

SUMMARIZE_RETAIN_DETAILS = PromptTemplate(
    "summarize_retain_details",
    family=FAMILY_SUMMARIZE,
    body=(
        "Condense the following statements about a user into a compact summary that\n"
        "retains all essential details: keep every distinct activity, event, place and\n"
        "constraint mentioned. Output only the summary.\n\n"
        "{text}\n"
    ),
)

SUMMARIZE_ONE_SENTENCE = PromptTemplate(
    "summarize_one_sentence",
    family=FAMILY_SUMMARIZE,
    body=(
        "Can you summarize the following text in one sentence that only contains the\n"
        "high-level information? Please output only the summary without anything else.\n\n"
        "{text}\n"
    ),
)

JUDGE_RELEVANCE = PromptTemplate(
    "judge_relevance",
    family=FAMILY_RELEVANCE,
    body=(
        "A user asked: {query}\n\n"
        "Below are numbered memory summaries. Which of them could contain information\n"
        "relevant to answering the question, directly or indirectly?\n"
        'Reply with the matching numbers separated by commas, or the single word "NONE".\n\n'
        "{candidates}\n"
    ),
)

PERSONA_BREAKDOWN = PromptTemplate(
    "persona_breakdown",
    family=FAMILY_GENERATE,
    body=(
        "Here is a brief description of a person:\n"
        "{persona}\n\n"
        'Break it down into components: "demographics" (name, age, location, birthplace,\n'
        'marital status, occupation), "career_life_and_goals" (only career-related items)\n'
        'and "everyday_life_and_hobbies" (nothing career-related). List only what the\n'
        "description supports and leave unknown parts out. Make each point separate and\n"
        'self-explanatory, phrased as a single sentence starting with "This person".\n'
        "Output only a JSON object, for example:\n"
        "```json\n"
        '{ "everyday_life_and_hobbies": [ "This person enjoys listening to pop music." ] }\n'
        "```\n"
    ),
)

OPPOSED_REASONS = PromptTemplate(
    "opposed_reasons",
    family=FAMILY_GENERATE,
    body=(
        "{trait} However, they have not been able to do it recently. Give me at least\n"
        "{n} implicit reasons why that person cannot do it.\n"
        "The reasons must be completely different from each other and belong to\n"
        "different categories. Each reason must be specific, with detail on why it\n"
        'happens. A reason cannot include words related to "{banned}".\n'
        "Explain each reason in only one sentence. Output only the reasons, formatted:\n"
        "1: \n"
        "2: \n"
    ),
)

SUPPORTIVE_REASONS = PromptTemplate(
    "supportive_reasons",
    family=FAMILY_GENERATE,
    body=(
        "{trait} Give me at least {n} pieces of implicit reason information that support\n"
        'this claim, so that if I asked "Does {trait_question}?" you would answer "yes".\n'
        "The reasons must be completely different from each other and belong to\n"
        "different categories. Each reason must be specific, with detail on why it\n"
        'happens. A reason cannot include words related to "{banned}".\n'
        "Explain each reason in only one sentence. Output only the reasons, formatted:\n"
        "1: \n"
        "2: \n"
    ),
)

OPPOSED_QUESTION = PromptTemplate(
    "opposed_question",
    family=FAMILY_GENERATE,
    body=(
        "A user (Speaker1) has the persona trait: {trait}. However, they can no longer\n"
        "act on that trait because {reason}.\n"
        "Write the question Speaker1 would ask an assistant about daily life, such that\n"
        "the reason above should change the assistant's answer.\n"
        "Requirements: the trait must be mentioned in the question; the question must\n"
        'not mention the reason or its effects; ask in the first person and include "I";\n'
        "it must not be a yes/no question; keep it diverse.\n"
        "Output only the question, in fewer than 20 words, with no extra sentences.\n"
    ),
)

SELECT_REASON = PromptTemplate(
    "select_reason",
    family=FAMILY_GENERATE,
    body=(
        "{trait}. Here are potential implicit reasons why this person is unable to\n"
        "follow this trait:\n{options}\n"
        "Select the reason that is both the most logically sound and the most subtly\n"
        "implied. Choose only from the provided options and output that reason only.\n"
    ),
)

DISTRACTOR_SCENARIOS = PromptTemplate(
    "distractor_scenarios",
    family=FAMILY_GENERATE,
    body=(
        "Consider a person with the trait {trait}, and this question they asked:\n"
        "{question}\n"
        "Generate {n} scenarios that reflect or align with the trait and could plausibly\n"
        "relate to the question. Each scenario is one sentence. The scenarios may talk\n"
        "about {topic} or other closely related things, but must not all be identical.\n"
        "Output only the scenarios, one per line, numbered.\n"
    ),
)

SESSION_DIALOGUE = PromptTemplate(
    "session_dialogue",
    family=FAMILY_GENERATE,
    body=(
        'There are two speakers. Speaker1 encounters the scenario that "{scenario}".\n'
        "The other speaker is an AI assistant. Generate a conversation with at least 10\n"
        "turns based on this information.\n"
        "Speaker1 must not mention the scenario too early: the opening turns are a\n"
        "natural warm-up, and the scenario appears only in the later section. Speaker1\n"
        "is exactly the person who encounters the scenario, and the conversation centres\n"
        "on the scenario without unrelated information. Vary the style: explanations,\n"
        "small talk, humour, problem-solving. Output the conversation as:\n"
        "Speaker1: ...\n"
        "Assistant: ...\n"
    ),
)

VERIFY_SUPPORTIVE = PromptTemplate(
    "verify_supportive",
    family=FAMILY_VERIFY,
    body=(
        "Trait: {trait}\n"
        "Situation: {scenario}\n"
        "Does the situation indirectly support the claim in the trait? Answer only if\n"
        'you are certain. Reply with exactly one word: "yes", "no" or "uncertain".\n'
    ),
)

JUDGE_ANSWER = PromptTemplate(
    "judge_answer",
    family=FAMILY_JUDGE,
    body=(
        "Question: {question}\n"
        "Reference answer: {gold}\n"
        "Predicted answer: {predicted}\n"
        "Is the predicted answer semantically equivalent to the reference answer for\n"
        'this question? Reply with exactly one word: "YES" or "NO".\n'
    ),
)

ANSWER_QUESTION = PromptTemplate(
    "answer_question",
    family=FAMILY_ANSWER,
    body=(
        "You are an assistant with access to retrieved notes from the user's past\n"
        "conversations. Use them to answer; if they contain a reason the user cannot do\n"
        "something, say so.\n\n"
        "Retrieved notes:\n{context}\n\n"
        "Question: {question}\n"
        "Answer:"
    ),
)

_ALL = [
    EXTRACT_SESSION_FACTS,
    SUMMARIZE_RETAIN_DETAILS,
    SUMMARIZE_ONE_SENTENCE,
    JUDGE_RELEVANCE,
    PERSONA_BREAKDOWN,
    OPPOSED_REASONS,
    SUPPORTIVE_REASONS,
    OPPOSED_QUESTION,
    SELECT_REASON,
    DISTRACTOR_SCENARIOS,
    SESSION_DIALOGUE,
    VERIFY_SUPPORTIVE,
    JUDGE_ANSWER,
    ANSWER_QUESTION,
]

TEMPLATES: dict[str, PromptTemplate] = {t.template_id: t for t in _ALL}


def get_template(template_id: str) -> PromptTemplate:
    return TEMPLATES[template_id]
