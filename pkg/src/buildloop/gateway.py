"""LLM gateway: chat sessions, token accounting, and swappable transports.

Every model call in the agent flows through a :class:`ChatSession` bound to
a transport.  Transports are interchangeable:

* :class:`HttpChatTransport` talks to an OpenAI-style chat-completions API.
* :class:`ScriptedTransport` serves canned responses for tests and dry runs.
* :class:`RecordingTransport` wraps another transport and persists one
  transcript entry per call.
* :class:`ReplayTransport` serves a recorded transcript back, verifying on
  each call that the outbound request still matches what was recorded.

A transcript is a line-oriented file of JSON records, one call per line,
holding the sequence number, a digest of the outbound messages, the response
text, and the token usage the provider reported.  Replaying a transcript
against the same code and inputs reproduces every response byte for byte.

Sessions enforce a token budget.  When the estimated size of the history
exceeds the budget, whole user/assistant exchanges are dropped: exchanges
tagged resolved go first, oldest first, then the oldest unpinned exchange.
System messages, pinned messages, and the most recent unresolved error
exchange are never dropped.  If the budget still cannot be met the session
raises ``context-overflow``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .errors import (
    ContextOverflowError,
    LlmUnavailableError,
    ReplayMismatchError,
    TransportError,
)

logger = logging.getLogger(__name__)

TAG_PINNED = "pinned"
TAG_RESOLVED = "resolved"
TAG_ERROR_EXCHANGE = "error-exchange"

API_KEY_ENV_VARS = ("BUILDLOOP_API_KEY", "OPENAI_API_KEY")

# Hand-written transcripts may use this in place of a real request digest
# to opt out of strict matching for that entry.  Recorded transcripts
# always carry real digests.
DIGEST_ANY = "*"


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: one token per four characters, rounded up.

    Used whenever the provider reports no usage, and for all budget
    bookkeeping, so that replayed runs account identically to recorded ones.
    """
    return -(-len(text) // 4)


@dataclass(frozen=True)
class RateCard:
    """Dollar prices per million tokens."""

    input_per_million: float = 0.0
    output_per_million: float = 0.0


@dataclass
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0
    cost: float = 0.0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0 or self.cost < 0:
            raise ValueError("token usage must be non-negative")

    def add(self, other: "TokenUsage") -> None:
        # Accumulation only ever grows; deltas are validated at construction.
        self.input_tokens += other.input_tokens
        self.output_tokens += other.output_tokens
        self.cost = round(self.cost + other.cost, 2)


def compute_cost(usage: TokenUsage, rates: RateCard) -> float:
    """Dollar cost of `usage` under `rates`, rounded to whole cents."""
    raw = (
        Decimal(usage.input_tokens) * Decimal(str(rates.input_per_million))
        + Decimal(usage.output_tokens) * Decimal(str(rates.output_per_million))
    ) / Decimal(1_000_000)
    return float(raw.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ChatMessage:
    role: Role
    content: str
    tags: set[str] = field(default_factory=set)
    uid: int = -1

    def __post_init__(self) -> None:
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class TranscriptEntry:
    sequence_no: int
    request_digest: str
    response: str
    input_tokens: int | None = None
    output_tokens: int | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.sequence_no,
                "digest": self.request_digest,
                "response": self.response,
                "input_tokens": self.input_tokens,
                "output_tokens": self.output_tokens,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "TranscriptEntry":
        raw = json.loads(line)
        return cls(
            sequence_no=raw["seq"],
            request_digest=raw["digest"],
            response=raw["response"],
            input_tokens=raw.get("input_tokens"),
            output_tokens=raw.get("output_tokens"),
        )


def request_digest(messages: list[dict[str, str]]) -> str:
    """Stable digest of an outbound message list."""
    canonical = json.dumps(
        [[m["role"], m["content"]] for m in messages],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_transcript(path: Path | str) -> list[TranscriptEntry]:
    entries = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                entries.append(TranscriptEntry.from_json(line))
    return entries


class Transport(Protocol):
    def complete(
        self, model: str, messages: list[dict[str, str]]
    ) -> tuple[str, int | None, int | None]:
        """Return (response_text, input_tokens, output_tokens).

        Token counts are None when the provider does not report usage;
        the session then falls back to the char/4 estimate.
        """


class HttpChatTransport:
    """Blocking OpenAI-style chat-completions client.

    Credentials come from the environment only (BUILDLOOP_API_KEY, then
    OPENAI_API_KEY); they are never read from flags or config files.
    Safe for concurrent use from multiple sessions.
    """

    def __init__(
        self,
        api_base: str = "https://api.openai.com/v1",
        api_key: str | None = None,
        timeout: float = 120.0,
    ):
        self.api_base = api_base.rstrip("/")
        key = api_key
        if key is None:
            for var in API_KEY_ENV_VARS:
                key = os.environ.get(var)
                if key:
                    break
        self._client = httpx.Client(
            timeout=timeout,
            headers={"Authorization": f"Bearer {key}"} if key else {},
        )
        self.has_credentials = bool(key)

    def complete(
        self, model: str, messages: list[dict[str, str]]
    ) -> tuple[str, int | None, int | None]:
        try:
            resp = self._client.post(
                f"{self.api_base}/chat/completions",
                json={"model": model, "messages": messages},
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"chat request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"chat request returned {resp.status_code}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc
        usage = data.get("usage") or {}
        return text, usage.get("prompt_tokens"), usage.get("completion_tokens")


class ScriptedTransport:
    """Serves a fixed list of responses in order.

    Entries may be strings or callables taking the outbound message list,
    which lets tests shape a response from the prompt.  Token counts are
    the char/4 estimates so that scripted runs still exercise accounting.
    """

    def __init__(self, responses):
        self._responses = list(responses)
        self._lock = threading.Lock()
        self._cursor = 0
        self.calls: list[list[dict[str, str]]] = []

    @property
    def remaining(self) -> int:
        return len(self._responses) - self._cursor

    def complete(
        self, model: str, messages: list[dict[str, str]]
    ) -> tuple[str, int | None, int | None]:
        with self._lock:
            if self._cursor >= len(self._responses):
                raise TransportError("scripted transport exhausted")
            response = self._responses[self._cursor]
            self._cursor += 1
            self.calls.append(messages)
        if callable(response):
            response = response(messages)
        if isinstance(response, Exception):
            raise response
        prompt_tokens = sum(estimate_tokens(m["content"]) for m in messages)
        return response, prompt_tokens, estimate_tokens(response)


class RecordingTransport:
    """Wraps another transport and appends one transcript entry per call."""

    def __init__(self, inner: Transport, path: Path | str):
        self._inner = inner
        self._path = Path(path)
        self._lock = threading.Lock()
        self._seq = 0
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._path.write_text("", encoding="utf-8")

    def complete(
        self, model: str, messages: list[dict[str, str]]
    ) -> tuple[str, int | None, int | None]:
        text, in_tok, out_tok = self._inner.complete(model, messages)
        with self._lock:
            entry = TranscriptEntry(
                sequence_no=self._seq,
                request_digest=request_digest(messages),
                response=text,
                input_tokens=in_tok,
                output_tokens=out_tok,
            )
            self._seq += 1
            with open(self._path, "a", encoding="utf-8") as handle:
                handle.write(entry.to_json() + "\n")
        return text, in_tok, out_tok


class ReplayTransport:
    """Serves a recorded transcript back in order.

    A digest mismatch means the code path diverged from the recording and
    is fatal; it is deliberately not retryable.
    """

    def __init__(self, path: Path | str):
        self._entries = load_transcript(path)
        self._lock = threading.Lock()
        self._cursor = 0

    def complete(
        self, model: str, messages: list[dict[str, str]]
    ) -> tuple[str, int | None, int | None]:
        with self._lock:
            if self._cursor >= len(self._entries):
                raise ReplayMismatchError(
                    f"transcript exhausted after {self._cursor} calls"
                )
            entry = self._entries[self._cursor]
            self._cursor += 1
        digest = request_digest(messages)
        if entry.request_digest not in (DIGEST_ANY, digest):
            raise ReplayMismatchError(
                f"entry {entry.sequence_no}: recorded digest "
                f"{entry.request_digest} != request digest {digest}"
            )
        return entry.response, entry.input_tokens, entry.output_tokens


class ChatSession:
    """Ordered message history bound to one transport and one model.

    Sessions are single-threaded by design; run concurrent builds with one
    session per project, sharing a thread-safe transport.
    """

    def __init__(
        self,
        transport: Transport,
        model: str,
        token_budget: int = 100_000,
        rates: RateCard = RateCard(),
        retry_attempts: int = 3,
        retry_backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if token_budget <= 0:
            raise ValueError("token budget must be positive")
        self._transport = transport
        self.model = model
        self.token_budget = token_budget
        self.rates = rates
        self.retry_attempts = retry_attempts
        self.retry_backoff = retry_backoff
        self._sleep = sleep
        self.messages: list[ChatMessage] = []
        self.usage = TokenUsage()
        self._next_uid = 0

    # -- history ------------------------------------------------------

    def _append(self, message: ChatMessage) -> ChatMessage:
        message.uid = self._next_uid
        self._next_uid += 1
        self.messages.append(message)
        return message

    def add_system(self, content: str) -> ChatMessage:
        return self._append(ChatMessage(Role.SYSTEM, content))

    def find(self, uid: int) -> ChatMessage | None:
        for message in self.messages:
            if message.uid == uid:
                return message
        return None

    def tag_message(self, uid: int, *tags: str) -> None:
        message = self.find(uid)
        if message is not None:
            message.tags.update(tags)

    def estimated_tokens(self) -> int:
        return sum(estimate_tokens(m.content) for m in self.messages)

    # -- pruning ------------------------------------------------------

    def _exchange_groups(self) -> list[list[ChatMessage]]:
        """History split into system singletons and user/assistant pairs."""
        groups: list[list[ChatMessage]] = []
        i = 0
        while i < len(self.messages):
            message = self.messages[i]
            if (
                message.role is Role.USER
                and i + 1 < len(self.messages)
                and self.messages[i + 1].role is Role.ASSISTANT
            ):
                groups.append([message, self.messages[i + 1]])
                i += 2
            else:
                groups.append([message])
                i += 1
        return groups

    @staticmethod
    def _is_error_exchange(group: list[ChatMessage]) -> bool:
        return any(TAG_ERROR_EXCHANGE in m.tags for m in group)

    @staticmethod
    def _is_resolved(group: list[ChatMessage]) -> bool:
        return any(TAG_RESOLVED in m.tags for m in group)

    def _prunable_groups(self) -> list[list[ChatMessage]]:
        groups = self._exchange_groups()
        protected: set[int] = set()
        for idx, group in enumerate(groups):
            if any(m.role is Role.SYSTEM for m in group):
                protected.add(idx)
            if any(TAG_PINNED in m.tags for m in group):
                protected.add(idx)
        # The newest unresolved error exchange is the active repair context.
        for idx in range(len(groups) - 1, -1, -1):
            if self._is_error_exchange(groups[idx]) and not self._is_resolved(
                groups[idx]
            ):
                protected.add(idx)
                break
        # Never drop an in-flight request that has no response yet.
        if groups and groups[-1][-1].role is Role.USER:
            protected.add(len(groups) - 1)
        return [g for i, g in enumerate(groups) if i not in protected]

    def prune(self) -> None:
        """Drop oldest removable exchanges until the history fits the budget.

        Raises ``context-overflow`` when nothing more may be removed and the
        history still exceeds the budget.
        """
        while self.estimated_tokens() > self.token_budget:
            candidates = self._prunable_groups()
            resolved = [g for g in candidates if self._is_resolved(g)]
            victim = resolved[0] if resolved else (candidates[0] if candidates else None)
            if victim is None:
                raise ContextOverflowError(
                    f"history needs {self.estimated_tokens()} tokens, "
                    f"budget is {self.token_budget}, nothing prunable left"
                )
            for message in victim:
                self.messages.remove(message)
            logger.debug(
                "pruned exchange of %d message(s); %d tokens remain",
                len(victim),
                self.estimated_tokens(),
            )

    # -- calls --------------------------------------------------------

    def send(
        self, message: str | ChatMessage, tags: tuple[str, ...] = ()
    ) -> tuple[str, TokenUsage]:
        """Append a user message, call the transport, append the reply.

        Retries transport failures and empty responses up to
        ``retry_attempts`` times with exponential backoff, then raises
        ``llm-unavailable``.  Replay mismatches are never retried.
        Returns the response text and the usage of this one call.
        """
        if isinstance(message, str):
            message = ChatMessage(Role.USER, message)
        message.tags.update(tags)
        self._append(message)
        self.prune()

        outbound = [
            {"role": m.role.value, "content": m.content} for m in self.messages
        ]
        last_error: Exception | None = None
        text = ""
        in_tok = out_tok = None
        for attempt in range(self.retry_attempts):
            try:
                text, in_tok, out_tok = self._transport.complete(
                    self.model, outbound
                )
                if not text.strip():
                    raise TransportError("empty response")
                break
            except TransportError as exc:
                last_error = exc
                logger.warning(
                    "llm call attempt %d/%d failed: %s",
                    attempt + 1,
                    self.retry_attempts,
                    exc,
                )
                if attempt + 1 < self.retry_attempts:
                    self._sleep(self.retry_backoff * (2**attempt))
        else:
            raise LlmUnavailableError(
                f"llm call failed after {self.retry_attempts} attempts: "
                f"{last_error}"
            ) from last_error

        if in_tok is None:
            in_tok = sum(estimate_tokens(m["content"]) for m in outbound)
        if out_tok is None:
            out_tok = estimate_tokens(text)
        delta = TokenUsage(in_tok, out_tok)
        delta.cost = compute_cost(delta, self.rates)
        self.usage.add(delta)

        reply = ChatMessage(Role.ASSISTANT, text)
        reply.tags.update(tags)
        self._append(reply)
        self.prune()
        return text, delta
