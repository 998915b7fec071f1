"""Build-script generation and repair.

The generator turns a ProjectContext into a Dockerfile (revision 0), parses
model responses into clean script text, lints for structural hazards, and
produces repaired revisions from execution failures.  Revisions form a
linear history: revision n+1 always has revision n as its parent, and the
whole lineage stays in the session so the model sees what it already tried.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .catalog import DEFAULT_BASE_IMAGE, Catalog, default_catalog
from .errors import GenerationFailedError, NoDockerfileError
from .gateway import TAG_ERROR_EXCHANGE, ChatSession
from .llmtext import fenced_blocks
from .parsing import ProjectContext
from .templates import load_template, render

if TYPE_CHECKING:
    from .executor import FailureExtract

logger = logging.getLogger(__name__)

SEVERITY_ERROR = "error"
SEVERITY_WARNING = "warning"

_FROM_RE = re.compile(r"^\s*FROM\s+\S+", re.IGNORECASE | re.MULTILINE)
_RUN_RE = re.compile(r"^\s*RUN\s+\S+", re.IGNORECASE | re.MULTILINE)

_RETRY_NUDGE = (
    "That response did not contain a usable Dockerfile. Respond with the "
    "complete Dockerfile in a single fenced code block starting with a FROM "
    "instruction."
)


@dataclass(frozen=True)
class BuildSolution:
    """One revision of the build script.

    Revision 0 is the initial generation and has no parent; every later
    revision points at the one it repaired.
    """

    dockerfile_text: str
    base_image: str
    revision: int
    parent_revision: int | None
    rationale: str = ""

    def __post_init__(self) -> None:
        if not _FROM_RE.search(self.dockerfile_text):
            raise ValueError("dockerfile has no base-image instruction")
        if self.revision == 0 and self.parent_revision is not None:
            raise ValueError("revision 0 cannot have a parent")
        if self.revision > 0 and self.parent_revision != self.revision - 1:
            raise ValueError("revision lineage must be linear")


@dataclass(frozen=True)
class LintIssue:
    severity: str
    message: str
    line_no: int | None = None


@dataclass(frozen=True)
class LintReport:
    issues: tuple[LintIssue, ...] = ()

    @property
    def errors(self) -> tuple[LintIssue, ...]:
        return tuple(i for i in self.issues if i.severity == SEVERITY_ERROR)

    @property
    def ok(self) -> bool:
        return not self.issues


def parse_base_image(dockerfile_text: str) -> str:
    for line in dockerfile_text.splitlines():
        stripped = line.strip()
        if stripped.upper().startswith("FROM "):
            tokens = [t for t in stripped.split()[1:] if not t.startswith("--")]
            if tokens:
                return tokens[0]
    return ""


def _first_instruction(text: str) -> str:
    """First Dockerfile instruction keyword, skipping comments and ARG."""
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        word = stripped.split()[0].upper()
        if word == "ARG":
            continue
        return word
    return ""


def extract_dockerfile(response: str) -> str:
    """Pull the build script out of a model response.

    Order of preference: the first fenced block labeled as a Dockerfile,
    then the longest fenced block whose first instruction is FROM, then the
    whole response if it itself starts with FROM.  Anything else raises
    ``no-dockerfile-in-response``.
    """
    blocks = fenced_blocks(response)
    for label, body in blocks:
        if label in ("dockerfile", "docker"):
            return body
    from_blocks = [body for _, body in blocks if _first_instruction(body) == "FROM"]
    if from_blocks:
        return max(from_blocks, key=len)
    stripped = response.strip()
    if _first_instruction(stripped) == "FROM":
        return stripped
    raise NoDockerfileError("response contains no recognizable Dockerfile")


def lint_dockerfile(
    dockerfile_text: str, catalog: Catalog | None = None
) -> LintReport:
    """Structural checks on the script text.

    Missing base image and missing run commands are errors; a script with
    no recognizable build instruction, or comment lines that interact with
    line continuations, are warnings.
    """
    catalog = catalog or default_catalog()
    issues: list[LintIssue] = []

    if not _FROM_RE.search(dockerfile_text):
        issues.append(LintIssue(SEVERITY_ERROR, "missing base image (FROM)"))
    if not _RUN_RE.search(dockerfile_text):
        issues.append(LintIssue(SEVERITY_ERROR, "no RUN commands"))
    else:
        run_payload = "\n".join(
            line for line in dockerfile_text.splitlines()
            if line.strip().upper().startswith("RUN")
        )
        if not any(p.search(run_payload) for p in catalog.lexicon_patterns()):
            issues.append(
                LintIssue(SEVERITY_WARNING, "no recognizable build instruction")
            )

    lines = dockerfile_text.splitlines()
    for idx, line in enumerate(lines):
        stripped = line.strip()
        if stripped.startswith("#") and stripped.endswith("\\"):
            issues.append(
                LintIssue(
                    SEVERITY_WARNING,
                    "comment line ends with a line continuation",
                    idx + 1,
                )
            )
        if (
            stripped.endswith("\\")
            and not stripped.startswith("#")
            and idx + 1 < len(lines)
            and lines[idx + 1].strip().startswith("#")
        ):
            issues.append(
                LintIssue(
                    SEVERITY_WARNING,
                    "comment interrupts a line continuation",
                    idx + 2,
                )
            )
    return LintReport(tuple(issues))


def lint_solution(solution: BuildSolution, catalog: Catalog | None = None) -> LintReport:
    return lint_dockerfile(solution.dockerfile_text, catalog)


def assemble_generation_prompt(
    context: ProjectContext, base_image: str = DEFAULT_BASE_IMAGE
) -> str:
    """Render the generation template from parsed project facts.

    Section order is fixed by the template: structure guidance, requirement
    notes, environment facts, dependency list, doc digests.  Dependencies
    render as one line each; an empty list renders an explicit marker so the
    model does not hallucinate a manifest.
    """
    template = load_template("generate")
    deps = "\n".join(
        f"- {d.name} {d.constraint} (from {d.origin_path})"
        for d in context.dependencies
    ) or "none detected"
    docs = []
    for digest in context.docs:
        docs.append(f"{digest.path}: {digest.summary}")
        docs.extend(f"  hint: {hint}" for hint in digest.build_hints)
    return render(
        template,
        project_name=context.project_name,
        base_image=base_image,
        build_system=context.build_system.system,
        entry_file=context.build_system.entry_file,
        environment="\n".join(context.environment.summary_lines()),
        dependencies=deps,
        doc_digests="\n".join(docs) or "no build documentation found",
    )


def _ask_for_dockerfile(
    llm: ChatSession,
    first_prompt: str,
    tags: tuple[str, ...] = (),
    attempts: int = 3,
) -> tuple[str, str]:
    """Send, extract, and retry with a nudge.  Returns (text, response)."""
    prompt = first_prompt
    last_response = ""
    for _ in range(attempts):
        response, _ = llm.send(prompt, tags=tags)
        last_response = response
        try:
            return extract_dockerfile(response), response
        except NoDockerfileError:
            logger.warning("response had no dockerfile; nudging")
            prompt = _RETRY_NUDGE
    raise GenerationFailedError(
        f"no parseable build script after {attempts} attempts; "
        f"last response started: {last_response[:80]!r}"
    )


def _solution_from_text(
    text: str, revision: int, parent: int | None, rationale: str
) -> BuildSolution:
    try:
        return BuildSolution(
            dockerfile_text=text,
            base_image=parse_base_image(text) or DEFAULT_BASE_IMAGE,
            revision=revision,
            parent_revision=parent,
            rationale=rationale,
        )
    except ValueError as exc:
        raise GenerationFailedError(f"unusable build script: {exc}") from exc


def generate_initial(
    llm: ChatSession, prompt: str, catalog: Catalog | None = None
) -> BuildSolution:
    """Revision 0 from the assembled generation prompt.

    Lint errors trigger exactly one self-repair round (a re-prompt carrying
    the lint messages) before the first execution; whatever comes back from
    that round is the revision that runs.
    """
    catalog = catalog or default_catalog()
    text, _ = _ask_for_dockerfile(llm, prompt)
    report = lint_dockerfile(text, catalog)
    if report.errors:
        messages = "; ".join(i.message for i in report.errors)
        logger.info("lint self-repair round: %s", messages)
        fix_prompt = (
            "The Dockerfile has structural problems: "
            f"{messages}. Respond with the corrected complete Dockerfile "
            "in a single fenced code block."
        )
        try:
            text, _ = _ask_for_dockerfile(llm, fix_prompt, attempts=1)
        except GenerationFailedError:
            pass  # keep the original text; construction below decides
    return _solution_from_text(text, 0, None, "initial generation")


def repair(
    llm: ChatSession, solution: BuildSolution, failure: "FailureExtract"
) -> BuildSolution:
    """Next revision from the failure window of the last execution.

    The request and its response are tagged as an error exchange so the
    session pruner can retire them once the error stops recurring.
    """
    template = load_template("repair")
    window_text = "\n".join(failure.window)
    if failure.dockerfile_text and failure.dockerfile_text != solution.dockerfile_text:
        window_text += "\n(script under execution shown above)"
    prompt = render(
        template,
        revision=str(solution.revision + 1),
        dockerfile=solution.dockerfile_text,
        failure_kind=failure.kind,
        failure_window=window_text,
    )
    text, _ = _ask_for_dockerfile(llm, prompt, tags=(TAG_ERROR_EXCHANGE,))
    return _solution_from_text(
        text,
        solution.revision + 1,
        solution.revision,
        f"repair after {failure.kind} failure",
    )
