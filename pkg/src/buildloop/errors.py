"""Exception types shared across the agent.

Every error carries a stable machine-readable ``code``.  The orchestrator
maps fatal codes into the run report; the CLI maps them to exit status 2.
"""

from __future__ import annotations


class AgentError(Exception):
    """Base class for all agent failures."""

    code = "agent-error"

    def __init__(self, message: str = "", *, code: str | None = None):
        super().__init__(message or self.__class__.code)
        if code is not None:
            self.code = code


class TransportError(AgentError):
    """A single LLM call failed; the gateway may retry it."""

    code = "transport-failure"


class LlmUnavailableError(AgentError):
    """Consecutive transport failures exhausted the retry budget."""

    code = "llm-unavailable"


class ReplayMismatchError(AgentError):
    """The replay transcript does not match the code path.  Never retried."""

    code = "replay-mismatch"


class ContextOverflowError(AgentError):
    """The session cannot be pruned down to its token budget."""

    code = "context-overflow"


class ScanFailedError(AgentError):
    code = "scan-failed"


class NoBuildSystemError(AgentError):
    code = "no-build-system"


class GenerationFailedError(AgentError):
    code = "generation-failed"


class NoDockerfileError(AgentError):
    code = "no-dockerfile-in-response"


class BackendUnavailableError(AgentError):
    code = "backend-unavailable"


class TemplateIncompleteError(AgentError):
    code = "template-incomplete"
