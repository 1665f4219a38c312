"""Multiple-choice evaluation: prompt rendering, answer extraction, grading.

Items are graded at temperature 0. The extractor prefers the last
well-formed ``<answer>X</answer>`` span and falls back to phrasing like
"Answer: C"; responses yielding neither count as unparsable and score
as incorrect.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import prompts
from .backend import ChatMessage, ChatRequest, ChatResponse, LlmBackend
from .dataset import ASSISTANT_DELIM, SYSTEM_DELIM, USER_DELIM
from .errors import BackendError, SchemaViolation
from .jsonl import read_jsonl
from .tinylm import BOS_ID, ByteTokenizer, Parameters, greedy_decode

QUIZ_KEYS = ("item_id", "stem", "options", "correct")


@dataclass(frozen=True)
class McqItem:
    item_id: str
    stem: str
    options: dict[str, str]
    correct: str

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError(f"item {self.item_id}: need at least 2 options")
        if self.correct not in self.options:
            raise ValueError(f"item {self.item_id}: correct letter not among options")


@dataclass(frozen=True)
class EvalItemResult:
    item_id: str
    extracted: str | None
    correct_flag: bool


@dataclass(frozen=True)
class EvalReport:
    per_item: list[EvalItemResult]
    accuracy: float
    answered: int
    unparsable: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "counts": {"answered": self.answered, "unparsable": self.unparsable},
            "per_item": [
                {
                    "item_id": r.item_id,
                    "extracted": r.extracted,
                    "correct_flag": r.correct_flag,
                }
                for r in self.per_item
            ],
        }


def render_eval_prompt(item: McqItem, max_tokens: int = 512) -> ChatRequest:
    """Deterministic grading request: options in letter order, temperature 0."""
    lines = [item.stem, ""]
    for letter in sorted(item.options):
        lines.append(f"{letter}) {item.options[letter]}")
    return ChatRequest(
        messages=(
            ChatMessage("system", prompts.EVAL_PROMPT),
            ChatMessage("user", "\n".join(lines)),
        ),
        temperature=0.0,
        seed=0,
        max_tokens=max_tokens,
    )


_ANSWER_SPAN_RE = re.compile(r"<answer>(.*?)</answer>", re.S)
_FALLBACK_RE = re.compile(
    r"\b(?:answer|choice|option)\s*(?:is|:)?\s*\(?([A-Z])\)?(?![A-Za-z])", re.I
)


def extract_answer(text: str) -> str | None:
    """Pull the chosen option letter out of a model response.

    First choice: the single letter inside the last well-formed answer
    span (whitespace-trimmed, case preserved). Fallback: the last capital
    letter in an "Answer: C"-style phrase. None when neither matches.
    """
    spans = _ANSWER_SPAN_RE.findall(text)
    if spans:
        candidate = spans[-1].strip()
        if re.fullmatch(r"[A-Za-z]", candidate):
            return candidate
    matches = _FALLBACK_RE.findall(text)
    if matches:
        return matches[-1]
    return None


def grade(items: list[McqItem], backend: LlmBackend, parallelism: int = 1) -> EvalReport:
    """Evaluate each item once; unparsable or failed items count as wrong."""
    if not items:
        raise ValueError("no items to grade")

    def run(item: McqItem) -> EvalItemResult:
        try:
            response = backend.complete(render_eval_prompt(item))
        except BackendError:
            return EvalItemResult(item_id=item.item_id, extracted=None, correct_flag=False)
        extracted = extract_answer(response.content)
        correct = extracted is not None and extracted.upper() == item.correct.upper()
        return EvalItemResult(item_id=item.item_id, extracted=extracted, correct_flag=correct)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]

    correct_count = sum(r.correct_flag for r in results)
    unparsable = sum(r.extracted is None for r in results)
    return EvalReport(
        per_item=results,
        accuracy=correct_count / len(items),
        answered=len(items) - unparsable,
        unparsable=unparsable,
    )


class TinyLmResponder:
    """Adapter letting the tiny model answer chat requests by greedy decode.

    Prompts longer than the model context are left-truncated; output stops
    at EOS or the new-token budget. Purely deterministic.
    """

    supports_seed = True

    def __init__(self, params: Parameters, max_new_tokens: int = 48):
        self.params = params
        self.max_new_tokens = max_new_tokens
        self._tokenizer = ByteTokenizer()

    def complete(self, request: ChatRequest) -> ChatResponse:
        text = ""
        for message in request.messages:
            if message.role == "system" and message.content:
                text += SYSTEM_DELIM + message.content
            elif message.role == "user":
                text += USER_DELIM + message.content
            elif message.role == "assistant":
                text += ASSISTANT_DELIM + message.content
        text += ASSISTANT_DELIM
        ids = [BOS_ID] + self._tokenizer.encode(text)
        generated = greedy_decode(self.params, ids, self.max_new_tokens)
        return ChatResponse(content=self._tokenizer.decode(generated, errors="replace"))


def read_quiz(path: str | Path) -> list[McqItem]:
    items = []
    for rec in read_jsonl(path, schema=QUIZ_KEYS):
        if not isinstance(rec["options"], dict):
            raise SchemaViolation(f"quiz item {rec['item_id']}: options must be an object")
        items.append(
            McqItem(
                item_id=rec["item_id"],
                stem=rec["stem"],
                options=dict(rec["options"]),
                correct=rec["correct"],
            )
        )
    return items


def default_quiz_path() -> Path:
    from importlib import resources

    return Path(str(resources.files("granary").joinpath("assets/quiz.jsonl")))
