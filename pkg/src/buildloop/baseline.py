"""Default-command baseline.

Detect build systems from catalog marker files and run each system's stock
commands in a minimal script: base image, copy source, toolchain bootstrap,
default build commands.  Success is the backend exit status, nothing more.
This module deliberately has no dependency on the LLM gateway; it is the
control arm against the agent loop.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .catalog import DEFAULT_BASE_IMAGE, Catalog, CatalogEntry, default_catalog
from .executor import Backend, ExitStatus, LogCapture
from .parsing import enumerate_build_files

logger = logging.getLogger(__name__)

LOG_TAIL_LINES = 50


def detect_all(
    root: Path | str, catalog: Catalog | None = None
) -> list[tuple[str, str]]:
    """Every detected (system, entry_file), best candidate per system.

    Ordered by catalog priority, then path depth (shallower first), then
    path, so the build attempt order is deterministic.
    """
    catalog = catalog or default_catalog()
    best: dict[str, str] = {}
    for rel, system in enumerate_build_files(root, catalog):
        current = best.get(system)
        candidate_key = (rel.count("/"), rel)
        if current is None or candidate_key < (current.count("/"), current):
            best[system] = rel
    return sorted(
        ((system, path) for system, path in best.items()),
        key=lambda pair: (catalog.priority_of(pair[0]), pair[1].count("/"), pair[1]),
    )


def synthesize_dockerfile(
    entry: CatalogEntry, base_image: str = DEFAULT_BASE_IMAGE
) -> str:
    lines = [f"FROM {base_image}", "COPY . /src", "WORKDIR /src"]
    lines.extend(f"RUN {command}" for command in entry.setup_commands)
    lines.extend(f"RUN {command}" for command in entry.default_commands)
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BaselineAttempt:
    system: str
    entry_file: str
    commands: tuple[str, ...]
    exit_status: ExitStatus
    log_tail: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "entry_file": self.entry_file,
            "commands": list(self.commands),
            "exit_status": self.exit_status.value,
            "log_tail": list(self.log_tail),
        }


@dataclass
class BaselineReport:
    project: str
    outcome: str  # "success" | "failure"
    attempts: list[BaselineAttempt]
    duration: float

    def to_dict(self) -> dict:
        return {
            "project": self.project,
            "outcome": self.outcome,
            "attempts": [a.to_dict() for a in self.attempts],
            "usage": {"input_tokens": 0, "output_tokens": 0, "cost": 0.0},
            "duration": self.duration,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_defaults(
    root: Path | str,
    backend: Backend,
    timeout: float,
    catalog: Catalog | None = None,
    base_image: str = DEFAULT_BASE_IMAGE,
    artifact_dir: Path | str | None = None,
) -> BaselineReport:
    """Try each detected system's default commands until one exits cleanly.

    At most one attempt per system; judgment is exit status only.  The
    report lists every attempted system with its status and log tail.
    """
    root = Path(root)
    catalog = catalog or default_catalog()
    start = time.monotonic()
    attempts: list[BaselineAttempt] = []
    outcome = "failure"

    run_dir = None
    if artifact_dir is not None:
        run_dir = Path(artifact_dir) / root.name
        run_dir.mkdir(parents=True, exist_ok=True)

    for system, entry_file in detect_all(root, catalog):
        entry = catalog.entry_for(system)
        if entry is None:
            continue
        dockerfile = synthesize_dockerfile(entry, base_image)
        remaining = timeout - (time.monotonic() - start)
        if remaining <= 0:
            logger.warning("baseline budget exhausted before %s", system)
            break
        logs: LogCapture = backend.build(dockerfile, root, remaining)
        if run_dir is not None:
            log_path = run_dir / f"baseline.{system}.log"
            log_path.write_text("\n".join(logs.lines) + "\n", encoding="utf-8")
        attempts.append(
            BaselineAttempt(
                system=system,
                entry_file=entry_file,
                commands=entry.default_commands,
                exit_status=logs.exit_status,
                log_tail=logs.lines[-LOG_TAIL_LINES:],
            )
        )
        if logs.exit_status is ExitStatus.OK:
            outcome = "success"
            break

    report = BaselineReport(
        project=root.name,
        outcome=outcome,
        attempts=attempts,
        duration=time.monotonic() - start,
    )
    if run_dir is not None:
        (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report
