"""Chat-completion backends: a deterministic mock and an HTTP client.

The HTTP client speaks the OpenAI-compatible ``/chat/completions`` JSON
protocol. The mock is a pure function of (request, configuration), which
is what makes the whole distillation pipeline reproducible in tests.
"""

from __future__ import annotations

import hashlib
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests

from . import prompts
from .errors import BackendError

API_KEY_ENV = "GRANARY_API_KEY"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    seed: int = 0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"


class LlmBackend(Protocol):
    """Anything that can answer a chat request."""

    supports_seed: bool

    def complete(self, request: ChatRequest) -> ChatResponse: ...


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with jitter for transient failures."""

    max_attempts: int = 5
    base_backoff: float = 0.5
    backoff_cap: float = 30.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int, rng: random.Random) -> float:
        # attempt is 0-based; jitter up to +25% avoids lockstep retries
        base = min(self.base_backoff * (2**attempt), self.backoff_cap)
        return base * (1.0 + 0.25 * rng.random())


def _stable_digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


class HttpLlmBackend:
    """OpenAI-compatible chat-completions client with retries.

    Authentication uses a bearer token from the ``GRANARY_API_KEY``
    environment variable unless an explicit key is given. 429 and 5xx
    responses and connection errors are retried per the policy; other
    HTTP errors fail immediately.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        retry: RetryPolicy = RetryPolicy(),
        timeout: float = 60.0,
        supports_seed: bool = True,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.retry = retry
        self.timeout = timeout
        self.supports_seed = supports_seed
        # Sessions are not thread-safe; workers each get their own unless
        # an explicit session is injected (tests).
        self._injected_session = session
        self._local = threading.local()
        self._sleep = sleep
        self._rng = random.Random(0)

    def _session(self) -> requests.Session:
        if self._injected_session is not None:
            return self._injected_session
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if self.supports_seed:
            payload["seed"] = request.seed
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        url = f"{self.base_url}/chat/completions"
        last_error = None
        for attempt in range(self.retry.max_attempts):
            try:
                resp = self._session().post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"connection error: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = f"transient HTTP {resp.status_code}"
                else:
                    raise BackendError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            if attempt + 1 < self.retry.max_attempts:
                self._sleep(self.retry.delay(attempt, self._rng))
        raise BackendError(
            f"{url} failed after {self.retry.max_attempts} attempts ({last_error})"
        )

    @staticmethod
    def _parse(resp: requests.Response) -> ChatResponse:
        try:
            body = resp.json()
            choice = body["choices"][0]
            return ChatResponse(
                content=choice["message"]["content"],
                finish_reason=choice.get("finish_reason", "stop"),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc


_MARKER_RE = re.compile(r"\[([0-9a-f]{8})#(\d+)\]")
_OPTION_LINE_RE = re.compile(r"^([A-Z])\) ", re.M)
_PASSAGE_ID_RE = re.compile(r"^Passage id: (\S+)$", re.M)
_VARIATION_RE = re.compile(r"^Variation: (\d+)$", re.M)

# Substitutions the mock rewrite agent applies; mirrors the dangling
# patterns the postprocessor screens for.
_MOCK_REWRITES = (
    (re.compile(r"\bEq(?:uation)?\.?\s*\(?\s*\d+(?:\.\d+)*\s*\)?", re.I), "the governing relation"),
    (re.compile(r"\bTable\s+\d+(?:\.\d+)*", re.I), "the tabulated component values"),
    (re.compile(r"\bFig(?:ure)?\.?\s*\d+(?:\.\d+)*", re.I), "the described circuit diagram"),
    (re.compile(r"\bas shown (?:above|below)\b", re.I), "as derived here"),
    (re.compile(r"\b(?:in\s+)?this (?:section|chapter)\b", re.I), "in this material"),
)


@dataclass
class MockLlmBackend:
    """Deterministic stand-in for a remote model.

    Responses are pure functions of the request plus this configuration,
    so runs are reproducible and resumable runs re-derive identical
    content. When ``malform_answer_every`` is set, every Nth answering
    task (counted by the task's fixed position in node order x sample
    index, not by call arrival) omits the ``<answer>`` block; that keeps
    the injected failures stable across interrupted and resumed runs.
    ``node_ids`` must then list the corpus nodes in distillation order.
    """

    seed: int = 0
    node_ids: list[str] | None = None
    n_samples: int = 5
    malform_answer_every: int | None = None
    supports_seed: bool = True
    transcript: list[ChatRequest] = field(default_factory=list)

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.transcript.append(request)
        system = request.messages[0].content
        user = request.messages[-1].content
        if system.startswith(prompts.QUESTION_TAG):
            return self._question(user)
        if system.startswith(prompts.ANSWER_TAG):
            return self._answer(user)
        if system.startswith(prompts.REWRITE_TAG):
            return self._rewrite(user)
        if system.startswith(prompts.EVAL_TAG):
            return self._eval(user)
        return ChatResponse(content=f"ok:{_stable_digest(f'{self.seed}:{user}') % 10**8}")

    # -- agents ----------------------------------------------------------

    def _question(self, user: str) -> ChatResponse:
        node_id = _PASSAGE_ID_RE.search(user)
        variation = _VARIATION_RE.search(user)
        if node_id is None or variation is None:
            return ChatResponse(content="What does the passage establish?")
        marker = f"[{node_id.group(1)[:8]}#{int(variation.group(1))}]"
        return ChatResponse(content=f"{marker} State the key relation the passage establishes.")

    def _task_ordinal(self, node_prefix: str, sample_idx: int) -> int | None:
        if self.node_ids is None:
            return None
        for i, nid in enumerate(self.node_ids):
            if nid.startswith(node_prefix):
                return i * self.n_samples + sample_idx + 1
        return None

    def _answer(self, user: str) -> ChatResponse:
        marker = _MARKER_RE.search(user)
        prefix, k = (marker.group(1), int(marker.group(2))) if marker else ("unknown0", 0)
        thinking = f"Trace the passage's definitions for variation {k}."
        solution = "Combine the defined quantities as the passage directs."
        answer = f"relation-{prefix}-{k}"
        if self.malform_answer_every:
            ordinal = self._task_ordinal(prefix, k)
            if ordinal is not None and ordinal % self.malform_answer_every == 0:
                return ChatResponse(
                    content=f"<think>\n{thinking}\n</think>\n\n{solution}\n"
                )
        return ChatResponse(
            content=f"<think>\n{thinking}\n</think>\n\n{solution}\n\n<answer>{answer}</answer>"
        )

    def _rewrite(self, user: str) -> ChatResponse:
        q_match = re.search(r"<question>(.*?)</question>", user, re.S)
        s_match = re.search(r"<solution>(.*?)</solution>", user, re.S)
        question = q_match.group(1) if q_match else ""
        solution = s_match.group(1) if s_match else ""
        for pattern, replacement in _MOCK_REWRITES:
            question = pattern.sub(replacement, question)
            solution = pattern.sub(replacement, solution)
        return ChatResponse(
            content=f"<question>{question}</question>\n<solution>{solution}</solution>"
        )

    def _eval(self, user: str) -> ChatResponse:
        letters = _OPTION_LINE_RE.findall(user) or ["A"]
        pick = letters[_stable_digest(f"{self.seed}:{user}") % len(letters)]
        return ChatResponse(content=f"Considering the options, I pick one.\n<answer>{pick}</answer>")
