"""Multi-agent distillation of learning nodes into Q/T/S/A records.

Three agents cooperate per (node, sample) task: a question writer, an
answerer that reasons inside ``<think>`` tags and wraps the final answer
in ``<answer>`` tags, and a postprocessor that rejects malformed output
and rewrites dangling references ("Eq. (4.1)", "this section", ...) so
each record stands alone. Every task is journaled, so interrupted runs
resume without re-querying the backend.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from threading import Lock

from . import prompts
from .backend import ChatMessage, ChatRequest, LlmBackend, RetryPolicy
from .corpus import LearningNode
from .errors import BackendError, EmptyGeneration, SchemaViolation

QTSA_KEYS = (
    "entry_id",
    "node_id",
    "sample_idx",
    "question",
    "thinking",
    "solution",
    "answer",
    "status",
    "reject_reason",
)
JOURNAL_KEYS = ("node_id", "sample_idx", "status", "timestamp")

STATUS_KEPT = "kept"
STATUS_REJECTED = "rejected"

QUESTION_TEMPERATURE = 0.7
ANSWER_TEMPERATURE = 0.7
REWRITE_TEMPERATURE = 0.0


@dataclass(frozen=True)
class QtsaEntry:
    """One distilled question/thinking/solution/answer record."""

    entry_id: str
    node_id: str
    sample_idx: int
    question: str
    thinking: str
    solution: str
    answer: str
    status: str
    reject_reason: str | None = None

    @property
    def kept(self) -> bool:
        return self.status == STATUS_KEPT


@dataclass(frozen=True)
class RawAnswer:
    thinking: str
    solution: str
    answer: str


@dataclass(frozen=True)
class DistillConfig:
    """Sampling and execution knobs for a distillation run."""

    n_samples: int = 5
    parallelism: int = 1
    retry: RetryPolicy = RetryPolicy()
    journal_path: Path | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def entry_id_for(node_id: str, sample_idx: int) -> str:
    return hashlib.sha256(f"{node_id}:{sample_idx}".encode("utf-8")).hexdigest()[:16]


def sample_seed(*parts: object) -> int:
    """Distinct deterministic backend seed, e.g. per (node, sample) task."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


_THINK_RE = re.compile(r"<think>(.*?)</think>", re.S)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.S)

DANGLING_PATTERNS = (
    re.compile(r"\bEq(?:uation)?\.?\s*\(?\s*\d+(?:\.\d+)*\s*\)?", re.I),
    re.compile(r"\bTable\s+\d+(?:\.\d+)*", re.I),
    re.compile(r"\bFig(?:ure)?\.?\s*\d+(?:\.\d+)*", re.I),
    re.compile(r"\bas shown (?:above|below)\b", re.I),
    re.compile(r"\bthis (?:section|chapter)\b", re.I),
)


def find_dangling(text: str) -> str | None:
    """Return the first dangling-reference match in ``text``, if any."""
    for pattern in DANGLING_PATTERNS:
        match = pattern.search(text)
        if match:
            return match.group(0)
    return None


def render_assistant(thinking: str, solution: str, answer: str) -> str:
    """Canonical serialized form of a Q/T/S/A record's response side."""
    return f"<think>\n{thinking}\n</think>\n\n{solution}\n\n<answer>{answer}</answer>"


def parse_answer_spans(text: str) -> RawAnswer:
    """Split a raw model response into thinking / solution / answer.

    Thinking is the content of the first well-formed ``<think>`` span,
    solution the text between ``</think>`` and the first ``<answer>``,
    answer the content of the first well-formed ``<answer>`` span. Absent
    spans yield empty fields; whitespace is trimmed.
    """
    think_match = _THINK_RE.search(text)
    thinking = think_match.group(1).strip() if think_match else ""
    rest = text[think_match.end():] if think_match else text
    answer_match = _ANSWER_RE.search(rest)
    answer = answer_match.group(1).strip() if answer_match else ""
    solution = (rest[: answer_match.start()] if answer_match else rest).strip()
    return RawAnswer(thinking=thinking, solution=solution, answer=answer)


def generate_question(node: LearningNode, sample_idx: int, backend: LlmBackend) -> str:
    """Ask the question agent for one question grounded in ``node.text``."""
    if not node.text:
        raise ValueError("node text must be nonempty")
    request = ChatRequest(
        messages=(
            ChatMessage("system", prompts.QUESTION_PROMPT),
            ChatMessage(
                "user",
                prompts.QUESTION_USER_TEMPLATE.format(
                    node_id=node.node_id, sample_idx=sample_idx, node_text=node.text
                ),
            ),
        ),
        temperature=QUESTION_TEMPERATURE,
        seed=sample_seed(node.node_id, sample_idx),
    )
    content = backend.complete(request).content.strip()
    if not content:
        raise EmptyGeneration(
            f"question agent returned blank content for node {node.node_id[:12]}"
        )
    return content


def answer_question(node: LearningNode, question: str, backend: LlmBackend) -> RawAnswer:
    """Ask the answering agent and split its response into T/S/A spans."""
    if not question:
        raise ValueError("question must be nonempty")
    request = ChatRequest(
        messages=(
            ChatMessage("system", prompts.ANSWER_PROMPT),
            ChatMessage(
                "user",
                prompts.ANSWER_USER_TEMPLATE.format(node_text=node.text, question=question),
            ),
        ),
        temperature=ANSWER_TEMPERATURE,
        seed=sample_seed(node.node_id, question),
        max_tokens=2048,
    )
    return parse_answer_spans(backend.complete(request).content)


def _request_rewrite(
    question: str, solution: str, node: LearningNode, backend: LlmBackend
) -> tuple[str, str]:
    request = ChatRequest(
        messages=(
            ChatMessage("system", prompts.REWRITE_PROMPT),
            ChatMessage(
                "user",
                prompts.REWRITE_USER_TEMPLATE.format(
                    question=question, solution=solution, node_text=node.text
                ),
            ),
        ),
        temperature=REWRITE_TEMPERATURE,
        seed=sample_seed(node.node_id, 0),
    )
    content = backend.complete(request).content
    q_match = re.search(r"<question>(.*?)</question>", content, re.S)
    s_match = re.search(r"<solution>(.*?)</solution>", content, re.S)
    new_q = q_match.group(1).strip() if q_match else ""
    new_s = s_match.group(1).strip() if s_match else ""
    return new_q, new_s


def postprocess(
    raw: RawAnswer,
    question: str,
    node: LearningNode,
    sample_idx: int,
    backend: LlmBackend,
) -> QtsaEntry:
    """Screen one raw record: reject empties, rewrite dangling references.

    A record whose question or solution cites unavailable material gets one
    rewrite attempt through the backend; if any field still matches a
    dangling pattern afterwards the record is rejected rather than retried.
    Kept records are guaranteed to round-trip through the assistant
    template and ``parse_answer_spans`` unchanged.
    """

    def rejected(reason: str) -> QtsaEntry:
        return QtsaEntry(
            entry_id=entry_id_for(node.node_id, sample_idx),
            node_id=node.node_id,
            sample_idx=sample_idx,
            question=question.strip(),
            thinking=raw.thinking,
            solution=raw.solution,
            answer=raw.answer,
            status=STATUS_REJECTED,
            reject_reason=reason,
        )

    q = question.strip()
    t = raw.thinking.strip()
    s = raw.solution.strip()
    a = raw.answer.strip()
    for value, reason in (
        (q, "missing_question"),
        (t, "missing_thinking"),
        (s, "missing_solution"),
        (a, "missing_answer"),
    ):
        if not value:
            return rejected(reason)

    if find_dangling(q) or find_dangling(s):
        try:
            q, s = _request_rewrite(q, s, node, backend)
        except BackendError:
            return rejected("backend_failure")
        if not q or not s:
            return rejected("rewrite_failed")
    if any(find_dangling(part) for part in (q, t, s, a)):
        return rejected("dangling_reference")

    reparsed = parse_answer_spans(render_assistant(t, s, a))
    if (reparsed.thinking, reparsed.solution, reparsed.answer) != (t, s, a):
        return rejected("malformed_tags")

    return QtsaEntry(
        entry_id=entry_id_for(node.node_id, sample_idx),
        node_id=node.node_id,
        sample_idx=sample_idx,
        question=q,
        thinking=t,
        solution=s,
        answer=a,
        status=STATUS_KEPT,
        reject_reason=None,
    )


class DistillJournal:
    """Append-only commit log plus a results sidecar.

    The journal line is the commit point: a task counts as completed only
    once its ``{node_id, sample_idx, status, timestamp}`` record is on
    disk. Entry payloads live in a ``.results`` sidecar written just
    before the commit, so a crash between the two writes simply re-runs
    that task. Passing ``path=None`` keeps everything in memory.
    """

    def __init__(self, path: Path | None):
        self.path = Path(path) if path is not None else None
        self.results: dict[tuple[str, int], QtsaEntry] = {}
        self._lock = Lock()
        self._journal_fh = None
        self._results_fh = None
        if self.path is not None:
            self._load()
            self._journal_fh = self.path.open("a", encoding="utf-8")
            self._results_fh = self._results_path().open("a", encoding="utf-8")

    def _results_path(self) -> Path:
        return self.path.with_name(self.path.name + ".results")

    def _load(self) -> None:
        committed: set[tuple[str, int]] = set()
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    committed.add((rec["node_id"], rec["sample_idx"]))
        if self._results_path().exists():
            with self._results_path().open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    key = (rec["node_id"], rec["sample_idx"])
                    if key in committed:
                        self.results[key] = entry_from_record(rec)

    def completed(self) -> set[tuple[str, int]]:
        return set(self.results)

    def commit(self, entry: QtsaEntry) -> None:
        with self._lock:
            key = (entry.node_id, entry.sample_idx)
            self.results[key] = entry
            if self.path is None:
                return
            self._results_fh.write(json.dumps(entry_to_record(entry), ensure_ascii=False) + "\n")
            self._results_fh.flush()
            self._journal_fh.write(
                json.dumps(
                    {
                        "node_id": entry.node_id,
                        "sample_idx": entry.sample_idx,
                        "status": entry.status,
                        "timestamp": time.time(),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            self._journal_fh.flush()

    def close(self) -> None:
        if self._journal_fh is not None:
            self._journal_fh.close()
        if self._results_fh is not None:
            self._results_fh.close()


def _run_task(
    node: LearningNode, sample_idx: int, backend: LlmBackend
) -> QtsaEntry:
    def failed(reason: str) -> QtsaEntry:
        return QtsaEntry(
            entry_id=entry_id_for(node.node_id, sample_idx),
            node_id=node.node_id,
            sample_idx=sample_idx,
            question="",
            thinking="",
            solution="",
            answer="",
            status=STATUS_REJECTED,
            reject_reason=reason,
        )

    try:
        question = generate_question(node, sample_idx, backend)
        raw = answer_question(node, question, backend)
    except EmptyGeneration:
        return failed("empty_generation")
    except BackendError:
        return failed("backend_failure")
    return postprocess(raw, question, node, sample_idx, backend)


def distill_corpus(
    nodes: list[LearningNode], cfg: DistillConfig, backend: LlmBackend
) -> list[QtsaEntry]:
    """Distill every (node, sample) pair, resuming from the journal.

    Exactly ``len(nodes) * cfg.n_samples`` entries come back (kept plus
    rejected), sorted by node order then sample index. Tasks already
    committed in the journal are never re-queried. Backend failures reject
    the affected task and the run continues; only journal I/O is fatal.
    """
    journal = DistillJournal(cfg.journal_path)
    try:
        done = journal.completed()
        pending = [
            (node, k)
            for node in nodes
            for k in range(cfg.n_samples)
            if (node.node_id, k) not in done
        ]
        if cfg.parallelism == 1:
            for node, k in pending:
                journal.commit(_run_task(node, k, backend))
        else:
            with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
                for entry in pool.map(
                    lambda task: _run_task(task[0], task[1], backend), pending
                ):
                    journal.commit(entry)
        return [
            journal.results[(node.node_id, k)]
            for node in nodes
            for k in range(cfg.n_samples)
        ]
    finally:
        journal.close()


def entry_to_record(entry: QtsaEntry) -> dict:
    return {
        "entry_id": entry.entry_id,
        "node_id": entry.node_id,
        "sample_idx": entry.sample_idx,
        "question": entry.question,
        "thinking": entry.thinking,
        "solution": entry.solution,
        "answer": entry.answer,
        "status": entry.status,
        "reject_reason": entry.reject_reason,
    }


def entry_from_record(rec: dict) -> QtsaEntry:
    extra = set(rec) - set(QTSA_KEYS)
    missing = set(QTSA_KEYS) - set(rec)
    if extra or missing:
        raise SchemaViolation(
            f"qtsa record keys mismatch (missing={sorted(missing)}, unknown={sorted(extra)})"
        )
    return QtsaEntry(**rec)
