"""Execution results, failure windows, the success judge, and error labels.

The backend runs a build script and hands back a LogCapture.  From there
this module selects the log window the model gets to see, runs the two-step
success judgment, and attaches an advisory error-taxonomy label to error
failures.  The taxonomy never gates the loop; it exists for reporting.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

from .catalog import Catalog, default_catalog
from .gateway import ChatSession, estimate_tokens
from .llmtext import extract_json, find_bool
from .templates import load_template, render

logger = logging.getLogger(__name__)

ERROR_WINDOW_LINES = 50
NON_ERROR_WINDOW_LINES = 200

MALFORMED_JUDGMENT = "discriminator-malformed"

_JSON_NUDGE = "Answer with the JSON object only."


class ExitStatus(str, Enum):
    OK = "ok"
    ERROR = "error"
    TIMEOUT = "timeout"


class FailureKind(str, Enum):
    ERROR = "error"
    NON_ERROR = "non-error"


@dataclass(frozen=True)
class LogCapture:
    lines: tuple[str, ...]
    exit_status: ExitStatus
    duration: float

    def __post_init__(self) -> None:
        if self.duration < 0:
            raise ValueError("duration must be non-negative")


@dataclass(frozen=True)
class FailureExtract:
    """What the generator is allowed to see about a failed attempt.

    Error failures carry only the last lines of the log; non-error failures
    (clean exit, judged unsuccessful) also carry the script text, because
    the defect is usually in the script rather than in the log.
    """

    kind: FailureKind
    window: tuple[str, ...]
    dockerfile_text: str | None = None

    def __post_init__(self) -> None:
        if self.kind is FailureKind.ERROR and self.dockerfile_text is not None:
            raise ValueError("error extracts carry no dockerfile")
        if self.kind is FailureKind.NON_ERROR and self.dockerfile_text is None:
            raise ValueError("non-error extracts must carry the dockerfile")


class Backend(Protocol):
    name: str

    def build(
        self, dockerfile_text: str, context_dir, timeout: float
    ) -> LogCapture: ...


def execute(
    solution, backend: Backend, timeout: float, context_dir
) -> LogCapture:
    """Run one build attempt on the chosen backend.

    The backend choice is always explicit; there is no silent fallback
    between engines.
    """
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    return backend.build(solution.dockerfile_text, context_dir, timeout)


def select_failure_window(
    logs: LogCapture,
    dockerfile_text: str,
    token_budget: int | None = None,
) -> FailureExtract:
    """Slice the log for the repair prompt.

    Error (and timeout) failures keep the last 50 lines; non-error failures
    keep the last 200 plus the script.  When a budget is given, the oldest
    lines slide out first until the rendered window fits; the window is
    always a suffix of the log.
    """
    if logs.exit_status is ExitStatus.OK:
        kind = FailureKind.NON_ERROR
        window = list(logs.lines[-NON_ERROR_WINDOW_LINES:])
        dockerfile: str | None = dockerfile_text
    else:
        kind = FailureKind.ERROR
        window = list(logs.lines[-ERROR_WINDOW_LINES:])
        dockerfile = None

    if token_budget is not None:
        fixed = estimate_tokens(dockerfile or "")
        while window and fixed + estimate_tokens("\n".join(window)) > token_budget:
            window.pop(0)
    return FailureExtract(kind, tuple(window), dockerfile)


# ---------------------------------------------------------------------------
# success judgment


@dataclass(frozen=True)
class Verdict:
    outcome: str  # "success" | "failure"
    static_ok: bool
    dynamic_ok: bool
    judgment: str
    reflection_ok: bool
    taxonomy: "ErrorLabel | None" = None

    def __post_init__(self) -> None:
        expected = (
            "success"
            if self.static_ok and self.dynamic_ok and self.reflection_ok
            else "failure"
        )
        if self.outcome != expected:
            raise ValueError("verdict outcome contradicts its criteria")

    @property
    def succeeded(self) -> bool:
        return self.outcome == "success"


def _verdict(static_ok: bool, dynamic_ok: bool, reflection_ok: bool,
             judgment: str) -> Verdict:
    outcome = "success" if (static_ok and dynamic_ok and reflection_ok) else "failure"
    return Verdict(outcome, static_ok, dynamic_ok, judgment, reflection_ok)


def _parse_judgment(text: str) -> tuple[bool, bool, str] | None:
    data = extract_json(text)
    if isinstance(data, dict) and "static_ok" in data and "dynamic_ok" in data:
        return (
            bool(data["static_ok"]),
            bool(data["dynamic_ok"]),
            str(data.get("judgment", "")) or text,
        )
    static = find_bool(text, "static_ok", "static criterion", "criterion 1")
    dynamic = find_bool(text, "dynamic_ok", "dynamic criterion", "criterion 2")
    if static is not None and dynamic is not None:
        return static, dynamic, text
    return None


def _parse_reflection(text: str) -> bool | None:
    data = extract_json(text)
    if isinstance(data, dict) and "adhered" in data:
        return bool(data["adhered"])
    return find_bool(text, "adhered", "adheres", "valid")


def _ask_parsed(llm: ChatSession, prompt: str, parse, attempts: int = 3):
    """Send and parse, nudging toward JSON on garbage.  None if hopeless.

    Transport loss is not handled here: a session whose provider is gone
    raises ``llm-unavailable``, which is fatal to the whole run rather
    than a mere judgment failure.
    """
    message = prompt
    for _ in range(attempts):
        text, _ = llm.send(message)
        parsed = parse(text)
        if parsed is not None:
            return parsed
        message = _JSON_NUDGE
    return None


def judge(
    llm: ChatSession,
    dockerfile_text: str,
    logs: LogCapture,
    catalog: Catalog | None = None,
) -> Verdict:
    """Two-step success judgment over the script and the log window.

    Step one asks for a per-criterion decision: build instructions present
    and aimed at the project's primary components (script criterion), and
    compile progress visible in the log (log criterion).  Step two reflects
    on the returned judgment text; a judgment that did not strictly adhere
    to the two criteria demotes the build to failure regardless of step
    one.  Malformed output in either step, after nudging, yields a failure
    verdict marked as malformed rather than an exception.
    """
    catalog = catalog or default_catalog()
    if logs.exit_status is ExitStatus.OK:
        window = logs.lines[-NON_ERROR_WINDOW_LINES:]
    else:
        window = logs.lines[-ERROR_WINDOW_LINES:]

    examples = ", ".join(catalog.build_command_lexicon[:6])
    prompt = render(
        load_template("judge"),
        build_command_examples=examples,
        exit_status=logs.exit_status.value,
        dockerfile=dockerfile_text,
        log_window="\n".join(window),
    )
    step_one = _ask_parsed(llm, prompt, _parse_judgment)
    if step_one is None:
        return _verdict(False, False, False, MALFORMED_JUDGMENT)
    static_ok, dynamic_ok, judgment = step_one

    reflect_prompt = render(load_template("reflect"), judgment=judgment)
    adhered = _ask_parsed(llm, reflect_prompt, _parse_reflection)
    if adhered is None:
        return _verdict(static_ok, dynamic_ok, False, MALFORMED_JUDGMENT)
    return _verdict(static_ok, dynamic_ok, bool(adhered), judgment)


# ---------------------------------------------------------------------------
# error taxonomy


class Category(str, Enum):
    LIBRARY = "LibraryIssues"
    TOOLCHAIN = "BuildToolchainIssues"
    CONFIGURATION = "ConfigurationIssues"
    OTHER = "OtherIssues"


class Subcategory(str, Enum):
    LIBRARY_NOT_INSTALLED = "LibraryNotInstalled"
    LIBRARY_NOT_IN_PATH = "LibraryNotInPath"
    LIBRARY_VERSION_INCONSISTENCY = "LibraryVersionInconsistency"
    BUILD_SYSTEM_VERSION_CONFLICT = "BuildSystemVersionConflict"
    OTHER_TOOLS_MISSING = "OtherToolsMissingOrConflicting"
    OS_PLATFORM_INCOMPATIBILITY = "OSPlatformIncompatibility"
    INCORRECT_BUILD_COMMANDS = "IncorrectBuildCommands"
    PROJECT_CONFIGURATION = "ProjectConfigurationIssues"
    MEMORY = "MemoryIssues"
    SOURCE_CODE = "SourceCodeIssues"
    UNSTABLE_BRANCH = "UnstableBranch"
    UNCLASSIFIED = "Unclassified"


CATEGORY_OF: dict[Subcategory, Category] = {
    Subcategory.LIBRARY_NOT_INSTALLED: Category.LIBRARY,
    Subcategory.LIBRARY_NOT_IN_PATH: Category.LIBRARY,
    Subcategory.LIBRARY_VERSION_INCONSISTENCY: Category.LIBRARY,
    Subcategory.BUILD_SYSTEM_VERSION_CONFLICT: Category.TOOLCHAIN,
    Subcategory.OTHER_TOOLS_MISSING: Category.TOOLCHAIN,
    Subcategory.OS_PLATFORM_INCOMPATIBILITY: Category.CONFIGURATION,
    Subcategory.INCORRECT_BUILD_COMMANDS: Category.CONFIGURATION,
    Subcategory.PROJECT_CONFIGURATION: Category.CONFIGURATION,
    Subcategory.MEMORY: Category.OTHER,
    Subcategory.SOURCE_CODE: Category.OTHER,
    Subcategory.UNSTABLE_BRANCH: Category.OTHER,
    Subcategory.UNCLASSIFIED: Category.OTHER,
}


@dataclass(frozen=True)
class ErrorLabel:
    category: Category
    subcategory: Subcategory

    def __post_init__(self) -> None:
        if CATEGORY_OF[self.subcategory] is not self.category:
            raise ValueError(
                f"{self.subcategory.value} does not belong to {self.category.value}"
            )


def label(subcategory: Subcategory) -> ErrorLabel:
    return ErrorLabel(CATEGORY_OF[subcategory], subcategory)


# Ordered: first match wins, most specific patterns first.  Fallback is
# Unclassified, so classification is total over arbitrary text.
CLASSIFICATION_RULES: tuple[tuple[re.Pattern[str], Subcategory], ...] = (
    (re.compile(r"fatal error:\s*\S+\.(?:h|hpp|hh|hxx)\b.*No such file"),
     Subcategory.LIBRARY_NOT_INSTALLED),
    (re.compile(r"\S+\.(?:h|hpp|hh|hxx)(?::\d+)?:? No such file or directory"),
     Subcategory.LIBRARY_NOT_INSTALLED),
    (re.compile(r"Could (?:NOT|not) find [A-Za-z0-9_.\-]+"),
     Subcategory.LIBRARY_NOT_INSTALLED),
    (re.compile(r"No package '[^']+' found"),
     Subcategory.LIBRARY_NOT_INSTALLED),
    (re.compile(r"(?:cannot|can't) find -l\S+"),
     Subcategory.LIBRARY_NOT_INSTALLED),
    (re.compile(r"error while loading shared libraries"),
     Subcategory.LIBRARY_NOT_IN_PATH),
    (re.compile(r"(?:not found in|could not be found in) (?:CMAKE_(?:MODULE|PREFIX)_PATH|LD_LIBRARY_PATH|PKG_CONFIG_PATH)"),
     Subcategory.LIBRARY_NOT_IN_PATH),
    (re.compile(r"(?:library|lib\w+) .{0,60}(?:is too old|version mismatch|incompatible version)",
                re.IGNORECASE),
     Subcategory.LIBRARY_VERSION_INCONSISTENCY),
    (re.compile(r"requires .{0,40}version .{0,20}(?:or (?:higher|newer|later))?,? but (?:found|you have|version)",
                re.IGNORECASE),
     Subcategory.LIBRARY_VERSION_INCONSISTENCY),
    (re.compile(r"(?:CMake|cmake) \d[\d.]* or (?:higher|greater|newer) is required"),
     Subcategory.BUILD_SYSTEM_VERSION_CONFLICT),
    (re.compile(r"cmake_minimum_required.*VERSION", re.IGNORECASE),
     Subcategory.BUILD_SYSTEM_VERSION_CONFLICT),
    (re.compile(r"(?:autoconf|automake|meson|bazel|ninja) version \S+ (?:or (?:higher|newer))? ?is required",
                re.IGNORECASE),
     Subcategory.BUILD_SYSTEM_VERSION_CONFLICT),
    (re.compile(r"(?:command not found|not found in PATH|No such file or directory)\b.*(?:gcc|g\+\+|clang|pkg-config|flex|bison|nasm|yasm|autoconf|automake|libtool)"),
     Subcategory.OTHER_TOOLS_MISSING),
    (re.compile(r"(?:gcc|g\+\+|clang|cc|pkg-config|flex|bison|nasm|yasm|autoreconf|aclocal|libtoolize|python3?|perl|git|curl|wget)(?:\.exe)?: (?:command )?not found"),
     Subcategory.OTHER_TOOLS_MISSING),
    (re.compile(r"command not found"),
     Subcategory.OTHER_TOOLS_MISSING),
    (re.compile(r"(?:unsupported|unknown|not supported on this) (?:platform|architecture|operating system|OS)",
                re.IGNORECASE),
     Subcategory.OS_PLATFORM_INCOMPATIBILITY),
    (re.compile(r"only (?:supported|available) on", re.IGNORECASE),
     Subcategory.OS_PLATFORM_INCOMPATIBILITY),
    (re.compile(r"No rule to make target"),
     Subcategory.INCORRECT_BUILD_COMMANDS),
    (re.compile(r"(?:unknown|invalid) (?:target|option|argument|command)", re.IGNORECASE),
     Subcategory.INCORRECT_BUILD_COMMANDS),
    (re.compile(r"does not contain a CMakeLists\.txt"),
     Subcategory.PROJECT_CONFIGURATION),
    (re.compile(r"(?:configure: error|config\.h|\.pc' (?:file )?not found|missing (?:sub)?module)",
                re.IGNORECASE),
     Subcategory.PROJECT_CONFIGURATION),
    (re.compile(r"(?:out of memory|virtual memory exhausted|Cannot allocate memory|Killed signal terminated program)",
                re.IGNORECASE),
     Subcategory.MEMORY),
    (re.compile(r"undefined reference to"),
     Subcategory.SOURCE_CODE),
    (re.compile(r"error: (?:expected|redefinition of|use of undeclared|invalid conversion)"),
     Subcategory.SOURCE_CODE),
    (re.compile(r"(?:unstable|broken) branch|HEAD is now at .* broken", re.IGNORECASE),
     Subcategory.UNSTABLE_BRANCH),
)


def classify_error(failure: FailureExtract) -> ErrorLabel:
    """Advisory taxonomy label for an error failure.

    First matching rule wins; anything unmatched is Unclassified.  Pure and
    total: same window, same label, any text classifies.
    """
    if failure.kind is not FailureKind.ERROR:
        raise ValueError("only error failures are classified")
    text = "\n".join(failure.window)
    for pattern, subcategory in CLASSIFICATION_RULES:
        if pattern.search(text):
            return label(subcategory)
    return label(Subcategory.UNCLASSIFIED)
