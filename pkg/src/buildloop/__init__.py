"""Agent that builds C/C++ repositories inside containers.

Parse the repo, have a model write the build script, execute it in
isolation, judge the result, and repair from the failure window, within
step and wall-clock budgets.  A record/replay transport makes every run
reproducible offline.
"""

from .catalog import Catalog, CatalogEntry, load_catalog
from .errors import AgentError
from .gateway import (
    ChatSession,
    HttpChatTransport,
    RateCard,
    RecordingTransport,
    ReplayTransport,
    ScriptedTransport,
    TokenUsage,
    compute_cost,
    estimate_tokens,
)
from .orchestrator import AgentConfig, Outcome, SessionReport, run_project

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "AgentError",
    "Catalog",
    "CatalogEntry",
    "ChatSession",
    "HttpChatTransport",
    "Outcome",
    "RateCard",
    "RecordingTransport",
    "ReplayTransport",
    "ScriptedTransport",
    "SessionReport",
    "TokenUsage",
    "compute_cost",
    "estimate_tokens",
    "load_catalog",
    "run_project",
]
