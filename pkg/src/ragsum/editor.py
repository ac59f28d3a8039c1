"""Editorial synthesis of answered question-answer pairs into one cited summary."""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass

from .corpus import SurveyTask
from .errors import AllAbstained, EmptyInput
from .providers import ChatRequest, GenerationSettings, Message
from .question_gen import GeneratedQuestion
from .retrieval_qa import Answer, extract_citations

EDITOR_PROMPT_TEMPLATE = """### CONTEXT ###
You are writing the final script of an interview with an expert on the topic '{topic}'.
The final script should summarize the key insights and findings from the questions and answers provided.
Keep the target audience in mind, which includes researchers, students, and professionals in the field.

### QUESTIONS AND ANSWERS ###
{questions_and_answers}

### INSTRUCTIONS ###
Include the most relevant and important points discussed.
Be aware of plagiarism, i.e., you should not copy the text, but use them as inspiration.
Avoid using markdown formatting in the text.
Avoid splitting into subsections, or creating an introduction and conclusion for it.
Avoid introducing new information and focus on summarizing the existing content.
Always include the citations (e.g., [BIBREF14], [BIBREF16]) mentioned in the answers in the final section."""


@dataclass(frozen=True)
class Summary:
    task_ref: str
    text: str
    citations: frozenset[str]
    qa_count_used: int


def build_editor_prompt(topic: str, qa_pairs: Sequence[tuple[str, str]]) -> ChatRequest:
    """Instantiate the editor template with Q:/A: blocks in the given order."""
    if not qa_pairs:
        raise EmptyInput("editor prompt requires at least one question-answer pair")
    rendered = "\n\n".join(f"Q: {q}\nA: {a}" for q, a in qa_pairs)
    # str.replace, not str.format: answer text may legitimately contain braces.
    content = EDITOR_PROMPT_TEMPLATE.replace("{topic}", topic).replace(
        "{questions_and_answers}", rendered
    )
    return ChatRequest(model="", messages=(Message("user", content),))


def compose_summary(
    task: SurveyTask,
    qa_pairs: Sequence[tuple[GeneratedQuestion, Answer]],
    chat,
    *,
    settings: GenerationSettings | None = None,
    counters=None,
) -> Summary:
    """Synthesize the non-abstained pairs; strip citations outside the answers' set."""
    answered = [(q, a) for q, a in qa_pairs if not a.abstained]
    if not answered:
        raise AllAbstained(f"every answer abstained for task {task.section_title!r}")
    req = build_editor_prompt(
        task.section_title, [(q.text, a.text) for q, a in answered]
    )
    if settings is not None:
        req = settings.apply(req)
    resp = chat.chat(req)
    text = resp.text.strip()
    allowed = frozenset().union(*(a.cited_bibrefs for _, a in answered))
    for key in sorted(extract_citations(text) - allowed):
        text = re.sub(rf"\s?\[{key}\]", "", text)
        if counters is not None:
            counters.log_stripped(task.section_title, key)
    return Summary(
        task_ref=f"{task.survey_title} / {task.section_title}",
        text=text.strip(),
        citations=frozenset(extract_citations(text)),
        qa_count_used=len(answered),
    )
