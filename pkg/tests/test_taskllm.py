import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from toao.taskllm import (
    Backend,
    BackendUnavailable,
    StubMiss,
    TaskQuery,
    UnparseableAnswer,
    build_prompt,
    parse_answer,
    resolve_part,
)


class TestBuildPrompt:
    def test_contains_object_and_task_lines(self):
        q = TaskQuery("a bouquet of sunflowers", "put it into the vase")
        prompt = build_prompt(q)
        assert "O: a bouquet of sunflowers" in prompt
        assert "T: put it into the vase" in prompt

    def test_template_substitution(self):
        prompt = build_prompt(TaskQuery("cup", "drink"))
        assert prompt.endswith("O: cup\nT: drink")

    def test_byte_stable(self):
        q = TaskQuery("cup", "drink")
        assert build_prompt(q) == build_prompt(q)
        assert build_prompt(q).encode() == build_prompt(q).encode()

    def test_empty_object_rejected(self):
        with pytest.raises(ValueError):
            TaskQuery("", "drink")

    def test_empty_task_rejected(self):
        with pytest.raises(ValueError):
            TaskQuery("cup", "")


class TestParseAnswer:
    def test_published_stem_reply(self):
        assert parse_answer("-A: The stem.") == "stem"

    def test_published_blossoms_reply(self):
        assert parse_answer("-A: The blossoms.") == "blossoms"

    def test_unparseable(self):
        with pytest.raises(UnparseableAnswer):
            parse_answer("no idea")

    def test_bare_marker_accepted(self):
        assert parse_answer("A: handle") == "handle"

    def test_articles_and_case(self):
        assert parse_answer("-A: An Opening.") == "opening"
        assert parse_answer("-A: a spout") == "spout"

    def test_multiword_part(self):
        assert parse_answer("-A: The flower stem.") == "flower stem"

    def test_only_first_line_is_used(self):
        assert parse_answer("-A: The lid.\nBecause lids open.") == "lid"

    def test_empty_remainder(self):
        with pytest.raises(UnparseableAnswer):
            parse_answer("-A:   ")

    def test_round_trip_over_tokens(self):
        for token in ("stem", "handle", "spout", "lid", "blade", "x"):
            assert parse_answer(f"-A: The {token.capitalize()}.") == token


class TestStubBackend:
    def test_lookup_hit(self):
        backend = Backend(
            kind="stub",
            lookup={("a bouquet of sunflowers", "put it into the vase"): "The stem."},
        )
        q = TaskQuery("a bouquet of sunflowers", "put it into the vase")
        assert resolve_part(q, backend).part_text == "stem"

    def test_miss(self):
        backend = Backend(kind="stub")
        with pytest.raises(StubMiss):
            resolve_part(TaskQuery("cup", "drink"), backend)

    def test_from_json_file(self, tmp_path):
        table = [{"o": "cup", "t": "drink", "a": "The opening."}]
        path = tmp_path / "stub.json"
        path.write_text(json.dumps(table))
        backend = Backend.from_stub_json(path)
        assert resolve_part(TaskQuery("cup", "drink"), backend).part_text == "opening"


class _MockHandler(BaseHTTPRequestHandler):
    replies: list = []
    requests_seen: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).requests_seen.append(body)
        status, payload = type(self).replies[min(len(type(self).requests_seen) - 1, len(type(self).replies) - 1)]
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def mock_server():
    server = HTTPServer(("127.0.0.1", 0), _MockHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _MockHandler.requests_seen = []
    yield f"http://127.0.0.1:{server.server_port}", _MockHandler
    server.shutdown()


class TestHttpBackend:
    def test_success(self, mock_server):
        endpoint, handler = mock_server
        handler.replies = [
            (200, {"choices": [{"message": {"content": "-A: The handle."}}]})
        ]
        backend = Backend(kind="http", endpoint=endpoint, model_name="test-model", timeout=5)
        q = resolve_part(TaskQuery("mug", "pour"), backend)
        assert q.part_text == "handle"
        assert len(handler.requests_seen) == 1
        sent = handler.requests_seen[0]
        assert sent["model"] == "test-model"
        assert sent["messages"][0]["role"] == "user"
        assert "O: mug" in sent["messages"][0]["content"]

    def test_retry_once_then_succeed(self, mock_server):
        endpoint, handler = mock_server
        handler.replies = [
            (500, {"error": "boom"}),
            (200, {"choices": [{"message": {"content": "-A: The spout."}}]}),
        ]
        backend = Backend(kind="http", endpoint=endpoint, timeout=5)
        q = resolve_part(TaskQuery("kettle", "pour"), backend)
        assert q.part_text == "spout"
        assert len(handler.requests_seen) == 2

    def test_never_more_than_two_requests(self, mock_server):
        endpoint, handler = mock_server
        handler.replies = [(500, {"error": "boom"})]
        backend = Backend(kind="http", endpoint=endpoint, timeout=5)
        with pytest.raises(BackendUnavailable):
            resolve_part(TaskQuery("kettle", "pour"), backend)
        assert len(handler.requests_seen) == 2

    def test_unreachable_endpoint(self):
        backend = Backend(kind="http", endpoint="http://127.0.0.1:9", timeout=0.2)
        with pytest.raises(BackendUnavailable):
            resolve_part(TaskQuery("kettle", "pour"), backend)

    def test_unparseable_reply(self, mock_server):
        endpoint, handler = mock_server
        handler.replies = [(200, {"choices": [{"message": {"content": "beats me"}}]})]
        backend = Backend(kind="http", endpoint=endpoint, timeout=5)
        with pytest.raises(UnparseableAnswer):
            resolve_part(TaskQuery("kettle", "pour"), backend)

    def test_cache_avoids_second_request(self, mock_server):
        endpoint, handler = mock_server
        handler.replies = [
            (200, {"choices": [{"message": {"content": "-A: The handle."}}]})
        ]
        backend = Backend(kind="http", endpoint=endpoint, timeout=5, cache_enabled=True)
        q = TaskQuery("mug", "pour")
        assert resolve_part(q, backend).part_text == "handle"
        assert resolve_part(q, backend).part_text == "handle"
        assert len(handler.requests_seen) == 1

    def test_http_kind_requires_endpoint(self, monkeypatch):
        monkeypatch.delenv("TOAO_LLM_ENDPOINT", raising=False)
        with pytest.raises(ValueError):
            Backend(kind="http")


class TestTaskQueryInvariants:
    def test_normalized_part_accepted(self):
        q = TaskQuery("cup", "drink", part_text="opening")
        assert q.part_text == "opening"

    def test_unnormalized_part_rejected(self):
        with pytest.raises(ValueError):
            TaskQuery("cup", "drink", part_text="The Opening.")
