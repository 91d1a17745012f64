"""Upstream provider adapters and the fallback token estimator.

Adapters translate the gateway's chat shape to a provider's wire format and
back, reporting token usage from upstream metadata when present. When an
upstream omits usage, counts fall back to a deterministic whitespace and
punctuation approximation and the usage is flagged estimated.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

import httpx

from .errors import Timeout, UpstreamError

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


def estimate_tokens(text: str) -> int:
    """Deterministic token approximation: words and punctuation marks."""
    return len(_TOKEN_RE.findall(text))


def estimate_message_tokens(messages: Iterable[dict]) -> int:
    """Token estimate for a chat payload; content is read for counting only."""
    total = 0
    for message in messages:
        content = message.get("content", "")
        if isinstance(content, str):
            total += estimate_tokens(content)
        else:  # multi-part content: count textual parts
            total += estimate_tokens(json.dumps(content, ensure_ascii=False))
        total += 3  # per-message framing overhead
    return total


@dataclass
class TokenUsage:
    input_tokens: int
    output_tokens: int
    cached_tokens: int = 0
    estimated: bool = False


@dataclass
class UpstreamResult:
    """One unary upstream completion."""

    content: str
    usage: TokenUsage


# Streaming contract: ``stream()`` yields content chunks as they arrive
# (bounded buffering, one chunk in flight) and *returns* the TokenUsage via
# the generator's StopIteration value once the upstream finishes.
StreamGenerator = Iterator[str]


class MockAdapter:
    """Deterministic in-process provider for tests and local runs.

    ``script`` pins exact token usage and reply text; without it the reply
    is synthesized and usage is derived from the estimator.
    """

    kind = "mock"

    def __init__(self, script: dict | None = None, chunk_count: int = 4,
                 fail_with: Exception | None = None):
        self.script = script or {}
        self.chunk_count = chunk_count
        self.fail_with = fail_with
        self.calls = 0

    def _result(self, model_id: str, messages: list[dict],
                max_output_tokens: int | None) -> UpstreamResult:
        content = self.script.get("content", f"mock reply from {model_id}")
        input_tokens = int(self.script.get("input_tokens", estimate_message_tokens(messages)))
        output_tokens = int(self.script.get("output_tokens", estimate_tokens(content)))
        cached_tokens = int(self.script.get("cached_tokens", 0))
        if max_output_tokens is not None:
            output_tokens = min(output_tokens, max_output_tokens)
        usage = TokenUsage(input_tokens, output_tokens, cached_tokens,
                           estimated=bool(self.script.get("estimated", False)))
        return UpstreamResult(content=content, usage=usage)

    def complete(self, model_id: str, messages: list[dict],
                 max_output_tokens: int | None = None,
                 timeout: float = 120.0) -> UpstreamResult:
        self.calls += 1
        if self.fail_with is not None:
            raise self.fail_with
        return self._result(model_id, messages, max_output_tokens)

    def stream(self, model_id: str, messages: list[dict],
               max_output_tokens: int | None = None,
               timeout: float = 120.0):
        self.calls += 1
        if self.fail_with is not None:
            raise self.fail_with
        result = self._result(model_id, messages, max_output_tokens)
        n = max(1, self.chunk_count)
        size = max(1, -(-len(result.content) // n))
        for i in range(0, len(result.content), size):
            yield result.content[i:i + size]
        return result.usage


class GenericHttpAdapter:
    """Adapter for any upstream speaking the standard chat-completions shape.

    POSTs ``{base}/chat/completions``; relays streamed SSE chunks in order
    with bounded buffering (one chunk at a time).
    """

    kind = "generic_http"

    def __init__(self, base_endpoint: str, api_key: str | None = None,
                 client: httpx.Client | None = None):
        self.base_endpoint = base_endpoint.rstrip("/")
        self.api_key = api_key
        self._client = client or httpx.Client()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, model_id: str, messages: list[dict],
                 max_output_tokens: int | None = None,
                 timeout: float = 120.0) -> UpstreamResult:
        payload: dict = {"model": model_id, "messages": messages, "stream": False}
        if max_output_tokens is not None:
            payload["max_tokens"] = max_output_tokens
        url = f"{self.base_endpoint}/chat/completions"
        try:
            response = self._client.post(url, json=payload, headers=self._headers(),
                                         timeout=timeout)
        except httpx.TimeoutException as exc:
            raise Timeout(f"upstream timed out after {timeout}s") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"upstream unreachable: {exc}") from exc
        if response.status_code >= 400:
            raise UpstreamError(f"upstream returned {response.status_code}",
                                status=response.status_code)
        body = response.json()
        content = ""
        choices = body.get("choices") or []
        if choices:
            content = (choices[0].get("message") or {}).get("content", "") or ""
        usage = self._usage_from(body.get("usage"), messages, content)
        return UpstreamResult(content=content, usage=usage)

    def stream(self, model_id: str, messages: list[dict],
               max_output_tokens: int | None = None, timeout: float = 120.0):
        """Yield upstream SSE deltas as they arrive; return TokenUsage at the end."""
        payload: dict = {"model": model_id, "messages": messages, "stream": True}
        if max_output_tokens is not None:
            payload["max_tokens"] = max_output_tokens
        url = f"{self.base_endpoint}/chat/completions"
        usage_raw: Optional[dict] = None
        relayed: list[str] = []
        try:
            with self._client.stream("POST", url, json=payload,
                                     headers=self._headers(), timeout=timeout) as response:
                if response.status_code >= 400:
                    response.read()
                    raise UpstreamError(f"upstream returned {response.status_code}",
                                        status=response.status_code)
                for line in response.iter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[len("data:"):].strip()
                    if data == "[DONE]":
                        break
                    try:
                        obj = json.loads(data)
                    except ValueError:
                        continue
                    if "usage" in obj and obj["usage"]:
                        usage_raw = obj["usage"]
                    for choice in obj.get("choices") or []:
                        delta = (choice.get("delta") or {}).get("content")
                        if delta:
                            relayed.append(delta)
                            yield delta
        except httpx.TimeoutException as exc:
            raise Timeout(f"upstream timed out after {timeout}s") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"upstream stream failed: {exc}") from exc
        return self._usage_from(usage_raw, messages, "".join(relayed))

    def _usage_from(self, raw: Optional[dict], messages: list[dict],
                    content: str) -> TokenUsage:
        if raw:
            details = raw.get("prompt_tokens_details") or {}
            return TokenUsage(
                input_tokens=int(raw.get("prompt_tokens", 0)),
                output_tokens=int(raw.get("completion_tokens", 0)),
                cached_tokens=int(details.get("cached_tokens", raw.get("cached_tokens", 0) or 0)),
                estimated=False)
        return TokenUsage(
            input_tokens=estimate_message_tokens(messages),
            output_tokens=estimate_tokens(content),
            cached_tokens=0,
            estimated=True)


def build_adapter(kind: str, base_endpoint: str, api_key: str | None = None,
                  **options) -> MockAdapter | GenericHttpAdapter:
    if kind == "mock":
        return MockAdapter(**options)
    if kind == "generic_http":
        return GenericHttpAdapter(base_endpoint, api_key=api_key)
    raise ValueError(f"unknown adapter kind {kind!r}")
