"""In-process stub of the scoring service, for tests and offline demos.

Speaks the same wire protocol as a real endpoint and answers with the
deterministic mock values from ``datacull.llm``, so client results can be
checked exactly.  Instrumentation exposed at ``GET /v1/stats`` records the
maximum number of concurrently served requests, which lets tests assert
the client's in-flight cap.  Transient faults can be injected: the first
attempt of any request whose prompt/text contains ``fail_marker`` is
answered with a 503, later attempts succeed.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .llm import (
    SEQUENCE_NLL_PATH,
    TOKEN_SCORE_PATH,
    mock_sequence_nll,
    mock_token_logprob,
)

STATS_PATH = "/v1/stats"


class StubLlmServer:
    """Runs a scoring stub on localhost in a daemon thread."""

    def __init__(self, fail_marker: str | None = None, delay: float = 0.0):
        self.fail_marker = fail_marker
        self.delay = delay
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0
        self.total_requests = 0
        self._attempts: dict[str, int] = {}
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _reply(self, status: int, payload: dict):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == STATS_PATH:
                    with outer._lock:
                        self._reply(
                            200,
                            {
                                "max_in_flight": outer.max_in_flight,
                                "total_requests": outer.total_requests,
                            },
                        )
                else:
                    self._reply(404, {"error": f"unknown path {self.path}"})

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                with outer._lock:
                    outer._in_flight += 1
                    outer.total_requests += 1
                    outer.max_in_flight = max(outer.max_in_flight, outer._in_flight)
                try:
                    if outer.delay > 0:
                        time.sleep(outer.delay)
                    try:
                        body = json.loads(raw.decode("utf-8"))
                    except (ValueError, UnicodeDecodeError):
                        self._reply(400, {"error": "invalid JSON body"})
                        return
                    if outer._should_fail(raw, body):
                        self._reply(503, {"error": "injected transient failure"})
                        return
                    if self.path == TOKEN_SCORE_PATH:
                        prompt, target = body.get("prompt"), body.get("target")
                        if not prompt or not target:
                            self._reply(400, {"error": "missing 'prompt' or 'target'"})
                            return
                        self._reply(200, {"logprob": mock_token_logprob(prompt, target)})
                    elif self.path == SEQUENCE_NLL_PATH:
                        text = body.get("text")
                        if text is None or not text.strip():
                            self._reply(400, {"error": "missing or empty 'text'"})
                            return
                        resp = mock_sequence_nll(text)
                        self._reply(200, {"nll": resp.nll, "token_count": resp.token_count})
                    else:
                        self._reply(404, {"error": f"unknown path {self.path}"})
                finally:
                    with outer._lock:
                        outer._in_flight -= 1

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def _should_fail(self, raw: bytes, body: dict) -> bool:
        if not self.fail_marker:
            return False
        content = str(body.get("prompt", "")) + str(body.get("text", ""))
        if self.fail_marker not in content:
            return False
        key = hashlib.blake2b(raw, digest_size=8).hexdigest()
        with self._lock:
            attempt = self._attempts.get(key, 0)
            self._attempts[key] = attempt + 1
        return attempt == 0

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def start(self) -> "StubLlmServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "StubLlmServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
