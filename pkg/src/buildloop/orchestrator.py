"""The build loop: parse once, generate, execute, judge, repair, bounded.

One run owns one generator session whose history carries every revision and
failure exchange; parsing and judging use ephemeral sessions on the same
transport so their chatter never crowds the repair context.  `max_steps`
counts repair rounds, so a run performs at most max_steps + 1 executions.
The wall clock is checked before every execution and the remaining budget
is passed down as the execution timeout.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from .backends import make_backend
from .catalog import DEFAULT_BASE_IMAGE, Catalog, load_catalog
from .errors import AgentError
from .executor import (
    Backend,
    ErrorLabel,
    ExitStatus,
    FailureExtract,
    FailureKind,
    LogCapture,
    Verdict,
    classify_error,
    execute,
    judge,
    select_failure_window,
)
from .gateway import (
    TAG_RESOLVED,
    ChatSession,
    RateCard,
    TokenUsage,
    Transport,
)
from .generator import (
    BuildSolution,
    assemble_generation_prompt,
    generate_initial,
    repair,
)
from .parsing import ProjectContext, parse_project

logger = logging.getLogger(__name__)

GENERATOR_SYSTEM_PROMPT = (
    "You are a build engineer who writes and repairs Dockerfiles that "
    "compile C/C++ projects from source. You answer with complete "
    "Dockerfiles in fenced code blocks."
)


class Outcome(str, Enum):
    SUCCESS = "success"
    STEPS_EXHAUSTED = "failure-steps-exhausted"
    TIMEOUT = "failure-timeout"
    FATAL = "failure-fatal"


@dataclass
class AgentConfig:
    model: str = "gpt-4o"
    max_steps: int = 10
    wall_clock_limit: float = 14_400.0
    backend: str = "container"
    engine: str = "unix:///var/run/docker.sock"
    token_budget: int = 100_000
    artifact_dir: Path = Path("runs")
    base_image: str = DEFAULT_BASE_IMAGE
    keep_images: bool = False
    catalog_path: Path | None = None
    rates: RateCard = field(default_factory=RateCard)

    def __post_init__(self) -> None:
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.wall_clock_limit <= 0:
            raise ValueError("wall_clock_limit must be positive")
        self.artifact_dir = Path(self.artifact_dir)


@dataclass(frozen=True)
class AttemptRecord:
    revision: int
    exit_status: ExitStatus
    verdict: Verdict
    taxonomy: ErrorLabel | None = None

    def to_dict(self) -> dict:
        return {
            "revision": self.revision,
            "exit_status": self.exit_status.value,
            "verdict": {
                "outcome": self.verdict.outcome,
                "static_ok": self.verdict.static_ok,
                "dynamic_ok": self.verdict.dynamic_ok,
                "reflection_ok": self.verdict.reflection_ok,
                "judgment": self.verdict.judgment,
            },
            "taxonomy": (
                {
                    "category": self.taxonomy.category.value,
                    "subcategory": self.taxonomy.subcategory.value,
                }
                if self.taxonomy
                else None
            ),
        }


@dataclass
class SessionReport:
    project: str
    outcome: Outcome
    attempts: list[AttemptRecord]
    usage: TokenUsage
    duration: float
    final_dockerfile: str | None = None
    fatal_code: str | None = None

    def to_dict(self) -> dict:
        return {
            "project": self.project,
            "outcome": self.outcome.value,
            "attempts": [a.to_dict() for a in self.attempts],
            "usage": {
                "input_tokens": self.usage.input_tokens,
                "output_tokens": self.usage.output_tokens,
                "cost": self.usage.cost,
            },
            "duration": self.duration,
            "final_dockerfile": self.final_dockerfile,
            "fatal_code": self.fatal_code,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# error signatures


_LEXICON_RE = re.compile(
    r"(error:|\berror\b|fatal|undefined reference|No such file|cannot find|"
    r"Could NOT find|command not found|\*\*\*)",
    re.IGNORECASE,
)
_LOCATION_PREFIX_RE = re.compile(r"^\S*?:\d+(?::\d+)?:\s*")
_ABS_PATH_RE = re.compile(r"(?:/[\w.+\-]+){2,}/?")
_HEX_RE = re.compile(r"0x[0-9a-fA-F]+")
_LINE_REF_RE = re.compile(r":(\d+)")


def mask_line(line: str) -> str:
    """Scrub locations out of an error line; stable under reapplication."""
    line = _LOCATION_PREFIX_RE.sub("", line.strip())
    line = _ABS_PATH_RE.sub("<path>", line)
    line = _HEX_RE.sub("<hex>", line)
    line = _LINE_REF_RE.sub(":<n>", line)
    return " ".join(line.split())


def normalize_signature(window: tuple[str, ...] | list[str]) -> str:
    """Stable signature of a failure: its first error-looking line, masked.

    Falls back to the masked last line when nothing matches the error
    lexicon, so every non-empty window has a signature.
    """
    for line in window:
        if _LEXICON_RE.search(line):
            return mask_line(line)
    return mask_line(window[-1]) if window else ""


def mark_resolved(
    session: ChatSession,
    history: list[tuple[str, tuple[int, ...]]],
    new_signature: str | None,
) -> None:
    """Tag past failure exchanges whose error did not just recur.

    A recurring signature stays unresolved, keeping its exchange pinned in
    context; success (None) resolves everything.
    """
    for signature, uids in history:
        if new_signature is not None and signature == new_signature:
            continue
        for uid in uids:
            session.tag_message(uid, TAG_RESOLVED)


# ---------------------------------------------------------------------------
# run loop


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def run_project(
    repo: Path | str,
    config: AgentConfig,
    transport: Transport,
    backend: Backend | None = None,
    clock: Callable[[], float] = time.monotonic,
    catalog: Catalog | None = None,
) -> SessionReport:
    """Build one project end to end and persist everything it produced.

    Artifacts land under ``<artifact_dir>/<project>/``: the parsed context,
    every script revision, every build log, every verdict, and the final
    report.  Fatal errors (no build system, generation failure, unreachable
    backend, context overflow, replay mismatch) end the run with a
    failure-fatal report instead of propagating, except when there is no
    run directory to report into.
    """
    repo = Path(repo)
    catalog = catalog or load_catalog(config.catalog_path)
    project = repo.name
    run_dir = config.artifact_dir / project
    run_dir.mkdir(parents=True, exist_ok=True)

    sessions: list[ChatSession] = []

    def new_session() -> ChatSession:
        session = ChatSession(
            transport,
            config.model,
            token_budget=config.token_budget,
            rates=config.rates,
        )
        sessions.append(session)
        return session

    start = clock()
    attempts: list[AttemptRecord] = []
    history: list[tuple[str, tuple[int, ...]]] = []
    outcome = Outcome.FATAL
    fatal_code: str | None = None
    solution: BuildSolution | None = None
    final_dockerfile: str | None = None

    try:
        context = parse_project(repo, new_session, catalog, project)
        _write(
            run_dir / "context.json",
            json.dumps(context.to_dict(), indent=2, sort_keys=True) + "\n",
        )

        generator = new_session()
        generator.add_system(GENERATOR_SYSTEM_PROMPT)
        prompt = assemble_generation_prompt(context, config.base_image)
        solution = generate_initial(generator, prompt, catalog)

        if backend is None:
            backend = make_backend(
                config.backend, engine=config.engine, keep_images=config.keep_images
            )

        repairs_done = 0
        while True:
            _write(
                run_dir / f"dockerfile.rev{solution.revision}",
                solution.dockerfile_text,
            )
            remaining = config.wall_clock_limit - (clock() - start)
            if remaining <= 0:
                outcome = Outcome.TIMEOUT
                break

            logs = execute(solution, backend, remaining, repo)
            _write(
                run_dir / f"build.rev{solution.revision}.log",
                "\n".join(logs.lines) + "\n",
            )

            verdict = judge(new_session(), solution.dockerfile_text, logs, catalog)
            failure: FailureExtract | None = None
            taxonomy: ErrorLabel | None = None
            if not verdict.succeeded:
                failure = select_failure_window(
                    logs, solution.dockerfile_text, config.token_budget
                )
                if failure.kind is FailureKind.ERROR:
                    taxonomy = classify_error(failure)

            record = AttemptRecord(solution.revision, logs.exit_status, verdict, taxonomy)
            attempts.append(record)
            _write(
                run_dir / f"verdict.rev{solution.revision}.json",
                json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n",
            )

            if verdict.succeeded:
                outcome = Outcome.SUCCESS
                final_dockerfile = solution.dockerfile_text
                mark_resolved(generator, history, None)
                break
            if clock() - start >= config.wall_clock_limit:
                outcome = Outcome.TIMEOUT
                break
            if repairs_done >= config.max_steps:
                outcome = Outcome.STEPS_EXHAUSTED
                break

            assert failure is not None
            signature = normalize_signature(failure.window)
            mark_resolved(generator, history, signature)
            solution = repair(generator, solution, failure)
            history.append(
                (signature, tuple(m.uid for m in generator.messages[-2:]))
            )
            repairs_done += 1
    except AgentError as exc:
        outcome = Outcome.FATAL
        fatal_code = exc.code
        logger.error("run for %s ended fatally: %s (%s)", project, exc, fatal_code)

    duration = clock() - start
    usage = TokenUsage()
    for session in sessions:
        usage.add(session.usage)

    report = SessionReport(
        project=project,
        outcome=outcome,
        attempts=attempts,
        usage=usage,
        duration=duration,
        final_dockerfile=final_dockerfile,
        fatal_code=fatal_code,
    )
    _write(run_dir / "report.json", report.to_json())
    return report
