"""Summary scoring: ROUGE recall, citation F1, embedding recall, LLM judges.

Lexical metrics use the corpus tokenizer (lowercased tokens, no stemming or
stopword removal) so results are deterministic and model-free. The embedding
recall score is greedy token matching without IDF weighting, computed with
the pipeline's own token-embedding provider; reports note this configuration.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

from .corpus import tokenize
from .errors import EmptyInput, EmptyReference, EmptyTruth, ParseError, ValidationError
from .providers import ChatRequest, GenerationSettings, Message
from .question_gen import parse_questions

# Ground-truth survey sections mention references as bare BIBREF keys, while
# generated text brackets them; this matcher accepts both spellings.
MENTION_RE = re.compile(r"\bBIBREF\d+\b")

GEVAL_SYSTEM = "You are a careful evaluator of generated summaries."
CHECKEVAL_SYSTEM = "You evaluate summaries by answering strict yes/no checklists."


@dataclass(frozen=True)
class ScoreReport:
    rouge1_recall: float
    rouge2_recall: float
    rougeL_recall: float
    ref_precision: float | None
    ref_recall: float | None
    ref_f1: float | None
    embed_recall: float
    geval: float | None = None
    checkeval: float | None = None

    def to_dict(self) -> dict:
        return {
            "rouge1_recall": self.rouge1_recall,
            "rouge2_recall": self.rouge2_recall,
            "rougeL_recall": self.rougeL_recall,
            "ref_precision": self.ref_precision,
            "ref_recall": self.ref_recall,
            "ref_f1": self.ref_f1,
            "embed_recall": self.embed_recall,
            "geval": self.geval,
            "checkeval": self.checkeval,
        }


def citation_mentions(text: str) -> set[str]:
    """Bibref keys mentioned in text, with or without brackets."""
    return set(MENTION_RE.findall(text or ""))


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n_recall(generated: str, reference: str, n: int) -> float:
    """Clipped n-gram matches over reference n-gram count.

    A non-empty reference with fewer than n tokens has no n-grams of that
    order and scores 0.0.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    ref_tokens = [t.text for t in tokenize(reference)]
    if not ref_tokens:
        raise EmptyReference("reference text has no tokens")
    ref_counts = _ngram_counts(ref_tokens, n)
    total = sum(ref_counts.values())
    if total == 0:
        return 0.0
    gen_counts = _ngram_counts([t.text for t in tokenize(generated)], n)
    clipped = sum(min(count, gen_counts[gram]) for gram, count in ref_counts.items())
    return clipped / total


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def rouge_l_recall(generated: str, reference: str) -> float:
    """Summary-level LCS token length over reference token length."""
    ref_tokens = [t.text for t in tokenize(reference)]
    if not ref_tokens:
        raise EmptyReference("reference text has no tokens")
    gen_tokens = [t.text for t in tokenize(generated)]
    return _lcs_length(gen_tokens, ref_tokens) / len(ref_tokens)


def ref_f1(generated_citations: set[str], truth_citations: set[str]) -> tuple[float, float, float]:
    """Citation precision, recall and F1 between generated and ground truth sets."""
    if not truth_citations:
        raise EmptyTruth("ground truth carries no citations")
    common = generated_citations & truth_citations
    precision = len(common) / len(generated_citations) if generated_citations else 0.0
    recall = len(common) / len(truth_citations)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def embed_recall(generated: str, reference: str, embedder) -> float:
    """Mean over reference tokens of the best cosine to any generated token."""
    if not generated or not generated.strip():
        raise EmptyInput("generated text is empty")
    if not reference or not reference.strip():
        raise EmptyInput("reference text is empty")
    gen = embedder.embed_tokens(generated)
    ref = embedder.embed_tokens(reference)
    sim = ref.vectors @ gen.vectors.T
    return min(1.0, max(0.0, float(sim.max(axis=1).mean())))


def build_geval_prompt(summary: str, ground_truth: str) -> ChatRequest:
    user = (
        "Criterion: coverage. Judge how completely the candidate summary covers "
        "the content of the reference section.\n\n"
        "Evaluation steps:\n"
        "1. Read the reference section and list its main points.\n"
        "2. Read the candidate summary and check which of those points it covers.\n"
        "3. Weigh omissions of central points more heavily than omissions of detail.\n"
        "4. Decide an overall coverage rating.\n\n"
        f"Reference section:\n{ground_truth}\n\n"
        f"Candidate summary:\n{summary}\n\n"
        "Think through the steps, then give the rating. The final line of your "
        "reply must contain only a single integer from 1 to 5."
    )
    return ChatRequest(
        model="", messages=(Message("system", GEVAL_SYSTEM), Message("user", user))
    )


def _parse_scale_score(text: str) -> float:
    lines = [line.strip() for line in (text or "").splitlines() if line.strip()]
    if not lines:
        raise ParseError("judge returned no text")
    m = re.fullmatch(r"(\d+)", lines[-1])
    if not m:
        raise ParseError(f"final judge line is not a bare integer: {lines[-1]!r}")
    score = int(m.group(1))
    if not 1 <= score <= 5:
        raise ParseError(f"judge score {score} outside the 1-5 scale")
    return float(score)


def geval_coverage(
    summary: str,
    ground_truth: str,
    chat,
    *,
    settings: GenerationSettings | None = None,
) -> float:
    """Coverage rating on a 1-5 scale; one retry when the reply cannot be parsed.

    An out-of-scale integer is a semantic violation, not noise, and fails
    immediately.
    """
    req = build_geval_prompt(summary, ground_truth)
    if settings is not None:
        req = settings.apply(req)
    resp = chat.chat(req)
    try:
        return _parse_scale_score(resp.text)
    except ParseError as exc:
        if "outside the 1-5 scale" in str(exc):
            raise
        retry = ChatRequest(
            model=req.model,
            messages=req.messages
            + (
                Message("assistant", resp.text or ""),
                Message(
                    "user",
                    "Reply again. The final line must contain only a single "
                    "integer from 1 to 5.",
                ),
            ),
            temperature=req.temperature,
            top_p=req.top_p,
        )
        return _parse_scale_score(chat.chat(retry).text)


def build_checklist_prompt(ground_truth: str, n: int) -> ChatRequest:
    user = (
        f"Read the reference text and write exactly {n} yes/no questions that test "
        "whether a summary covers its key content. Output a numbered list, one "
        f"question per line, no preamble.\n\nReference text:\n{ground_truth}"
    )
    return ChatRequest(
        model="", messages=(Message("system", CHECKEVAL_SYSTEM), Message("user", user))
    )


def build_checklist_answer_prompt(summary: str, items: list[str]) -> ChatRequest:
    rendered = "\n".join(f"{i}. {q}" for i, q in enumerate(items, 1))
    user = (
        f"Checklist:\n{rendered}\n\n"
        f"Summary:\n{summary}\n\n"
        "Answer each checklist item with yes or no, based only on the summary. "
        "Output one line per item, numbered, each ending in yes or no."
    )
    return ChatRequest(
        model="", messages=(Message("system", CHECKEVAL_SYSTEM), Message("user", user))
    )


def _parse_yes_no(lines_text: str, expected: int) -> list[bool]:
    answers = []
    for raw in (lines_text or "").splitlines():
        line = raw.strip()
        if not line:
            continue
        verdict = re.sub(r"^\d+[.)]\s*", "", line).strip().rstrip(".").lower()
        item = len(answers) + 1
        if verdict == "yes":
            answers.append(True)
        elif verdict == "no":
            answers.append(False)
        else:
            raise ParseError(f"checklist item {item}: unrecognized answer {line!r}")
    if len(answers) != expected:
        raise ParseError(f"expected {expected} checklist answers, got {len(answers)}")
    return answers


def checkeval_coverage(
    summary: str,
    ground_truth: str,
    checklist_size: int,
    chat,
    *,
    settings: GenerationSettings | None = None,
) -> float:
    """Reference-based checklist score: share of yes answers over the checklist."""
    if checklist_size < 1:
        raise ValidationError(f"checklist_size must be >= 1, got {checklist_size}")
    gen_req = build_checklist_prompt(ground_truth, checklist_size)
    ans_settings = settings
    if settings is not None:
        gen_req = settings.apply(gen_req)
    items = parse_questions(chat.chat(gen_req).text, checklist_size)
    ans_req = build_checklist_answer_prompt(summary, items)
    if ans_settings is not None:
        ans_req = ans_settings.apply(ans_req)
    answers = _parse_yes_no(chat.chat(ans_req).text, checklist_size)
    return sum(answers) / checklist_size


def score_summary(
    generated_text: str,
    ground_truth: str,
    embedder,
    *,
    judge=None,
    checklist_size: int = 10,
    judge_settings: GenerationSettings | None = None,
) -> ScoreReport:
    """Full report for one summary; judge metrics only when a judge is configured.

    Citation metrics are reported as None when the ground truth mentions no
    bibref keys at all (Ref-F1 is undefined there).
    """
    truth_citations = citation_mentions(ground_truth)
    if truth_citations:
        precision, recall, f1 = ref_f1(citation_mentions(generated_text), truth_citations)
    else:
        precision = recall = f1 = None
    geval = checkeval = None
    if judge is not None:
        geval = geval_coverage(generated_text, ground_truth, judge, settings=judge_settings)
        checkeval = checkeval_coverage(
            generated_text, ground_truth, checklist_size, judge, settings=judge_settings
        )
    return ScoreReport(
        rouge1_recall=rouge_n_recall(generated_text, ground_truth, 1),
        rouge2_recall=rouge_n_recall(generated_text, ground_truth, 2),
        rougeL_recall=rouge_l_recall(generated_text, ground_truth),
        ref_precision=precision,
        ref_recall=recall,
        ref_f1=f1,
        embed_recall=embed_recall(generated_text, ground_truth, embedder),
        geval=geval,
        checkeval=checkeval,
    )
