"""Client for token-level scoring against an external LLM inference service.

The wire protocol is a minimal HTTP POST exchange with flat JSON bodies:

* ``/v1/token_score``:   {"prompt": ..., "target": ..., "model": ...}
                         -> {"logprob": <float <= 0>}
* ``/v1/sequence_nll``:  {"text": ..., "model": ...}
                         -> {"nll": <float >= 0>, "token_count": <int >= 1>}

``MockLlmClient`` answers the same questions deterministically from a
stable hash, so full pipelines can be tested offline; the bundled stub
server (``datacull.stubserver``) speaks the wire protocol with the same
deterministic answers.
"""

from __future__ import annotations

import hashlib
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import requests

TOKEN_SCORE_PATH = "/v1/token_score"
SEQUENCE_NLL_PATH = "/v1/sequence_nll"


class LlmError(Exception):
    """Base class for scoring-service failures; carries the request id."""

    def __init__(self, message: str, request_id: str = ""):
        super().__init__(message)
        self.request_id = request_id


class TransportError(LlmError):
    """Could not reach the service, even after the retry budget."""


class ServiceError(LlmError):
    """The service answered with a non-2xx status."""


class ProtocolError(LlmError):
    """The service answered 2xx but the body violates the protocol."""


@dataclass(frozen=True)
class TokenScoreRequest:
    """Ask for log P(target_token | prompt) under the scoring model."""

    prompt: str
    target_token: str

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not self.target_token:
            raise ValueError("target_token must be non-empty")


@dataclass(frozen=True)
class SequenceNllRequest:
    text: str


@dataclass(frozen=True)
class SequenceNllResponse:
    """Total negative log-likelihood in nats plus the token count."""

    nll: float
    token_count: int

    def __post_init__(self):
        if not math.isfinite(self.nll) or self.nll < 0:
            raise ValueError(f"nll must be finite and >= 0, got {self.nll}")
        if self.token_count < 1:
            raise ValueError(f"token_count must be >= 1, got {self.token_count}")


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = ""
    model: str = "mock"
    max_in_flight: int = 4
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.1
    backoff_factor: float = 2.0
    auth_token: str | None = None

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


# ---------------------------------------------------------------------------
# Deterministic mock scoring, shared with the stub server
# ---------------------------------------------------------------------------

def _unit_hash(*parts: str) -> float:
    """Stable map of strings into (0, 1], identical across runs and hosts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    value = int.from_bytes(h.digest(), "little")
    return (value + 1) / 2.0**64


def mock_token_logprob(prompt: str, target_token: str) -> float:
    """Pseudo log-probability in [-5, 0), a pure function of the pair."""
    return -5.0 * _unit_hash("token", prompt, target_token)


def mock_sequence_nll(text: str) -> SequenceNllResponse:
    """Pseudo sequence NLL: hash-derived per-token nll times token count."""
    if not text.strip():
        raise ValueError("cannot compute sequence NLL of empty text")
    token_count = len(text.split())
    per_token = 5.0 * _unit_hash("nll", text)
    return SequenceNllResponse(nll=per_token * token_count, token_count=token_count)


class MockLlmClient:
    """Offline client with deterministic, order-free answers."""

    def __init__(self, config: ClientConfig | None = None):
        self.config = config or ClientConfig(model="mock")

    def score_token(self, req: TokenScoreRequest, request_id: str = "") -> float:
        return mock_token_logprob(req.prompt, req.target_token)

    def sequence_nll(self, req: SequenceNllRequest, request_id: str = "") -> SequenceNllResponse:
        try:
            return mock_sequence_nll(req.text)
        except ValueError as exc:
            raise ProtocolError(str(exc), request_id=request_id) from exc

    def score_token_many(
        self, reqs: Sequence[TokenScoreRequest], ids: Sequence[str] | None = None
    ) -> list[float | LlmError]:
        ids = ids or [f"req-{i}" for i in range(len(reqs))]
        return [self.score_token(r, request_id=i) for r, i in zip(reqs, ids)]

    def sequence_nll_many(
        self, reqs: Sequence[SequenceNllRequest], ids: Sequence[str] | None = None
    ) -> list[SequenceNllResponse | LlmError]:
        ids = ids or [f"req-{i}" for i in range(len(reqs))]
        out: list[SequenceNllResponse | LlmError] = []
        for req, rid in zip(reqs, ids):
            try:
                out.append(self.sequence_nll(req, request_id=rid))
            except LlmError as exc:
                out.append(exc)
        return out


class HttpLlmClient:
    """HTTP client with bounded concurrency, retries, and typed errors.

    Completion order is unordered; batch helpers re-align results to the
    input order, so every response stays attributable to its request id.
    The client is shareable across threads.
    """

    def __init__(self, config: ClientConfig):
        if not config.endpoint:
            raise ValueError("HttpLlmClient needs a non-empty endpoint")
        self.config = config
        self._local = threading.local()

    def _session(self) -> requests.Session:
        # One session per worker thread; requests sessions are not
        # documented thread-safe.
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, path: str, body: dict, request_id: str) -> dict:
        cfg = self.config
        url = cfg.endpoint.rstrip("/") + path
        headers = {}
        if cfg.auth_token:
            headers["Authorization"] = f"Bearer {cfg.auth_token}"
        last_exc: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt > 0:
                time.sleep(cfg.backoff_base * cfg.backoff_factor ** (attempt - 1))
            try:
                resp = self._session().post(url, json=body, headers=headers, timeout=cfg.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code in (429, 500, 502, 503, 504):
                last_exc = ServiceError(
                    f"{url} answered {resp.status_code}", request_id=request_id
                )
                continue
            if not 200 <= resp.status_code < 300:
                raise ServiceError(
                    f"{url} answered {resp.status_code}: {resp.text[:200]}",
                    request_id=request_id,
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(
                    f"{url} returned unparsable body: {exc}", request_id=request_id
                ) from exc
        if isinstance(last_exc, ServiceError):
            raise last_exc
        raise TransportError(
            f"{url} unreachable after {cfg.max_retries + 1} attempts: {last_exc}",
            request_id=request_id,
        )

    def score_token(self, req: TokenScoreRequest, request_id: str = "") -> float:
        body = {"prompt": req.prompt, "target": req.target_token, "model": self.config.model}
        payload = self._post(TOKEN_SCORE_PATH, body, request_id)
        if "logprob" not in payload:
            raise ProtocolError("response missing 'logprob'", request_id=request_id)
        logprob = payload["logprob"]
        if not isinstance(logprob, (int, float)) or not math.isfinite(logprob):
            raise ProtocolError(f"non-finite logprob {logprob!r}", request_id=request_id)
        if logprob > 0:
            raise ProtocolError(
                f"service returned logprob {logprob} > 0, violating the probability bound",
                request_id=request_id,
            )
        return float(logprob)

    def sequence_nll(self, req: SequenceNllRequest, request_id: str = "") -> SequenceNllResponse:
        body = {"text": req.text, "model": self.config.model}
        payload = self._post(SEQUENCE_NLL_PATH, body, request_id)
        try:
            nll = float(payload["nll"])
            token_count = int(payload["token_count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad NLL response: {exc}", request_id=request_id) from exc
        try:
            return SequenceNllResponse(nll=nll, token_count=token_count)
        except ValueError as exc:
            raise ProtocolError(str(exc), request_id=request_id) from exc

    def _run_many(self, fn, reqs, ids):
        ids = ids or [f"req-{i}" for i in range(len(reqs))]
        results: list = [None] * len(reqs)

        def worker(idx: int):
            try:
                results[idx] = fn(reqs[idx], request_id=ids[idx])
            except LlmError as exc:
                results[idx] = exc

        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            list(pool.map(worker, range(len(reqs))))
        return results

    def score_token_many(
        self, reqs: Sequence[TokenScoreRequest], ids: Sequence[str] | None = None
    ) -> list[float | LlmError]:
        return self._run_many(self.score_token, reqs, ids)

    def sequence_nll_many(
        self, reqs: Sequence[SequenceNllRequest], ids: Sequence[str] | None = None
    ) -> list[SequenceNllResponse | LlmError]:
        return self._run_many(self.sequence_nll, reqs, ids)
