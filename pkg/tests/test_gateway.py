import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, strategies as st

from execforge.gateway import (
    ConflictingDuplicate,
    EndpointUnavailable,
    FileStore,
    FunctionEndpoint,
    GatewayError,
    HttpEndpoint,
    KeyConflict,
    MemoryStore,
    MetricsSink,
    ModelRequest,
    ScriptedEndpoint,
    ScriptExhausted,
    UnknownKey,
    artifact_key,
    sha256_hex,
    split_thinking,
)


def test_split_thinking():
    c = split_thinking("<think>plan it</think>\nset x=(1,2,3,4)")
    assert c.thinking_text == "plan it" and c.body_text == "set x=(1,2,3,4)"
    assert split_thinking("plain").thinking_text is None


def test_request_validation():
    with pytest.raises(ValueError):
        ModelRequest("p", 0)
    assert ModelRequest("p", 1).max_output_tokens == 8192


def test_scripted_endpoint_lookup_order():
    ep = ScriptedEndpoint({"hello": ["a", "b"], "sha256:" + sha256_hex("hashed"): [{"body": "h", "thinking": "t"}], "*": ["z"]})
    assert [c.body_text for c in ep.generate(ModelRequest("hello", 2))] == ["a", "b"]
    (h,) = ep.generate(ModelRequest("hashed", 1))
    assert (h.body_text, h.thinking_text) == ("h", "t")
    assert ep.generate(ModelRequest("other", 1))[0].body_text == "z"
    with pytest.raises(ScriptExhausted):
        ep.generate(ModelRequest("hello", 3))
    assert len(ep.calls) == 4


def test_function_endpoint_passes_sample_index():
    ep = FunctionEndpoint(lambda prompt, i: f"{prompt}:{i}")
    assert [c.body_text for c in ep.generate(ModelRequest("p", 3))] == ["p:0", "p:1", "p:2"]


class _Handler(BaseHTTPRequestHandler):
    failures_left = 0
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((body, self.headers.get("Authorization")))
        if type(self).failures_left > 0:
            type(self).failures_left -= 1
            self.send_response(503)
            self.end_headers()
            return
        choices = [{"message": {"content": f"<think>t{i}</think>idea {i}"}} for i in range(body["n"])]
        data = json.dumps({"choices": choices}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    _Handler.failures_left = 0
    _Handler.seen = []
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/v1/chat/completions"
    server.shutdown()


def test_http_endpoint_retries_then_succeeds(http_server):
    _Handler.failures_left = 2
    sleeps = []
    ep = HttpEndpoint(http_server, "m", api_key="k", attempts=3, backoff_s=0.5, sleep=sleeps.append)
    out = ep.generate(ModelRequest("hi", 2, 100))
    assert [(c.body_text, c.thinking_text) for c in out] == [("idea 0", "t0"), ("idea 1", "t1")]
    assert sleeps == [0.5, 1.0]
    body, auth = _Handler.seen[-1]
    assert auth == "Bearer k" and body["max_tokens"] == 100 and body["messages"][0]["content"] == "hi"


def test_http_endpoint_gives_up(http_server):
    _Handler.failures_left = 10
    ep = HttpEndpoint(http_server, attempts=2, backoff_s=0, sleep=lambda s: None)
    with pytest.raises(EndpointUnavailable):
        ep.generate(ModelRequest("hi", 1))
    assert len(_Handler.seen) == 2


def test_http_endpoint_unreachable():
    ep = HttpEndpoint("http://127.0.0.1:9/x", attempts=2, backoff_s=0, sleep=lambda s: None, timeout_s=1)
    with pytest.raises(GatewayError):
        ep.generate(ModelRequest("hi", 1))


def test_artifact_key_layout():
    assert artifact_key("r", 3, 7) == "runs/r/epoch3/idea7.zip"


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    return MemoryStore() if request.param == "memory" else FileStore(tmp_path / "store")


def test_store_put_get_and_listing(store):
    d = store.put_artifact("a.zip", b"one")
    assert d == sha256_hex(b"one") and store.digest_of("a.zip") == d
    assert store.put_artifact("a.zip", b"one") == d  # idempotent
    with pytest.raises(KeyConflict):
        store.put_artifact("a.zip", b"two")
    store.put_artifact("b.zip", b"one")
    keys, cur = store.list_new(0)
    assert keys == ["a.zip", "b.zip"]
    store.put_artifact("c.zip", b"three")
    assert store.list_new(cur) == (["c.zip"], cur + 1)
    with pytest.raises(UnknownKey):
        store.get_artifact("nope")


def test_file_store_survives_reopen(tmp_path):
    FileStore(tmp_path).put_artifact("k", b"data")
    again = FileStore(tmp_path)
    assert again.get_artifact("k") == b"data" and again.list_new(0) == (["k"], 1)


@given(st.lists(st.tuples(st.sampled_from("abcde"), st.binary(max_size=4)), max_size=20))
def test_memory_store_listing_matches_first_puts(puts):
    store, expected, contents = MemoryStore(), [], {}
    for key, data in puts:
        if key in contents and contents[key] != data:
            with pytest.raises(KeyConflict):
                store.put_artifact(key, data)
            continue
        store.put_artifact(key, data)
        if key not in contents:
            expected.append(key)
            contents[key] = data
    assert store.list_new(0)[0] == expected


@pytest.mark.parametrize("root", [None, "dir"])
def test_metrics_sink_idempotent(tmp_path, root):
    sink = MetricsSink(tmp_path / root if root else None)
    recs = [(0, "val_loss", 3.5), (10, "val_loss", 3.4)]
    assert sink.log_metrics("run", recs) == 2
    assert sink.log_metrics("run", recs) == 0
    with pytest.raises(ConflictingDuplicate):
        sink.log_metrics("run", [(10, "val_loss", 3.0)])
    assert sink.read_metrics("run") == [(0, "val_loss", 3.5), (10, "val_loss", 3.4)]
