"""Backends: request validation, mock determinism, and the HTTP wire protocol."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from granary import prompts
from granary.backend import (
    ChatMessage,
    ChatRequest,
    HttpLlmBackend,
    MockLlmBackend,
    RetryPolicy,
)
from granary.errors import BackendError


def qrequest(node_id="a" * 16, sample_idx=0, text="some passage text"):
    return ChatRequest(
        messages=(
            ChatMessage("system", prompts.QUESTION_PROMPT),
            ChatMessage(
                "user",
                prompts.QUESTION_USER_TEMPLATE.format(
                    node_id=node_id, sample_idx=sample_idx, node_text=text
                ),
            ),
        ),
        temperature=0.7,
        seed=7,
    )


class TestChatTypes:
    def test_needs_messages(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=())

    def test_rejects_negative_temperature(self):
        with pytest.raises(ValueError):
            ChatRequest(messages=(ChatMessage("user", "x"),), temperature=-1)

    def test_rejects_unknown_role(self):
        with pytest.raises(ValueError):
            ChatMessage("wizard", "x")


class TestMock:
    def test_same_request_same_response(self):
        backend = MockLlmBackend(seed=0)
        assert backend.complete(qrequest()).content == backend.complete(qrequest()).content

    def test_distinct_samples_distinct_questions(self):
        backend = MockLlmBackend(seed=0)
        q0 = backend.complete(qrequest(sample_idx=0)).content
        q1 = backend.complete(qrequest(sample_idx=1)).content
        assert q0 != q1

    def test_transcript_records_requests(self):
        backend = MockLlmBackend(seed=0)
        backend.complete(qrequest())
        assert len(backend.transcript) == 1

    def test_eval_answers_carry_a_tagged_letter(self):
        backend = MockLlmBackend(seed=3)
        request = ChatRequest(
            messages=(
                ChatMessage("system", prompts.EVAL_PROMPT),
                ChatMessage("user", "Pick.\n\nA) one\nB) two"),
            )
        )
        content = backend.complete(request).content
        assert "<answer>" in content and content.split("<answer>")[1][0] in "AB"


class _Script(BaseHTTPRequestHandler):
    """Replays a scripted list of (status, body) responses."""

    script = []
    seen = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).seen.append(
            {"path": self.path, "auth": self.headers.get("Authorization"), "body": body}
        )
        status, payload = self.script[min(len(self.seen) - 1, len(self.script) - 1)]
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def scripted_server():
    server = HTTPServer(("127.0.0.1", 0), _Script)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Script.seen = []
    yield server
    server.shutdown()


def _ok_payload(content="hello"):
    return {"choices": [{"message": {"content": content}, "finish_reason": "stop"}]}


def _backend(server, **kwargs):
    kwargs.setdefault("retry", RetryPolicy(max_attempts=3, base_backoff=0.0))
    kwargs.setdefault("sleep", lambda s: None)
    return HttpLlmBackend(
        base_url=f"http://127.0.0.1:{server.server_address[1]}/v1",
        model="teach",
        api_key="sekrit",
        **kwargs,
    )


def _plain_request():
    return ChatRequest(messages=(ChatMessage("user", "hi"),), temperature=0.5, seed=11)


class TestHttpBackend:
    def test_success_speaks_chat_completions(self, scripted_server):
        _Script.script = [(200, _ok_payload("fine"))]
        response = _backend(scripted_server).complete(_plain_request())
        assert response.content == "fine"
        seen = _Script.seen[0]
        assert seen["path"] == "/v1/chat/completions"
        assert seen["auth"] == "Bearer sekrit"
        assert seen["body"]["messages"] == [{"role": "user", "content": "hi"}]
        assert seen["body"]["temperature"] == 0.5
        assert seen["body"]["seed"] == 11
        assert "max_tokens" in seen["body"]

    def test_seed_omitted_when_unsupported(self, scripted_server):
        _Script.script = [(200, _ok_payload())]
        _backend(scripted_server, supports_seed=False).complete(_plain_request())
        assert "seed" not in _Script.seen[0]["body"]

    def test_retries_transient_then_succeeds(self, scripted_server):
        _Script.script = [(500, {}), (200, _ok_payload("second"))]
        response = _backend(scripted_server).complete(_plain_request())
        assert response.content == "second"
        assert len(_Script.seen) == 2

    def test_exhausted_retries_raise(self, scripted_server):
        _Script.script = [(503, {})]
        with pytest.raises(BackendError, match="after 3 attempts"):
            _backend(scripted_server).complete(_plain_request())
        assert len(_Script.seen) == 3

    def test_client_error_fails_fast(self, scripted_server):
        _Script.script = [(400, {"error": "bad"})]
        with pytest.raises(BackendError, match="HTTP 400"):
            _backend(scripted_server).complete(_plain_request())
        assert len(_Script.seen) == 1

    def test_api_key_from_environment(self, scripted_server, monkeypatch):
        monkeypatch.setenv("GRANARY_API_KEY", "env-key")
        _Script.script = [(200, _ok_payload())]
        backend = HttpLlmBackend(
            base_url=f"http://127.0.0.1:{scripted_server.server_address[1]}/v1",
            model="teach",
            retry=RetryPolicy(max_attempts=1),
        )
        backend.complete(_plain_request())
        assert _Script.seen[0]["auth"] == "Bearer env-key"

    def test_malformed_body_raises(self, scripted_server):
        _Script.script = [(200, {"weird": True})]
        with pytest.raises(BackendError, match="malformed"):
            _backend(scripted_server).complete(_plain_request())
