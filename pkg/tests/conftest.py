"""Shared fixtures: tiny buildable repos and scripted model responses.

Fixture repos are generated into tmp dirs rather than checked in, so
executable bits and timestamps are fully controlled.  The scripted
response sequences mirror the exact model-call order of a run; tests that
record and replay transcripts rely on that order being deterministic.
"""

from __future__ import annotations

import os
import shutil
import stat
from pathlib import Path

import pytest

from buildloop.executor import ExitStatus, LogCapture
from buildloop.gateway import ChatSession, RateCard, ScriptedTransport


def write_tree(root: Path, files: dict[str, str], executable: tuple[str, ...] = ()):
    for rel, content in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    for rel in executable:
        path = root / rel
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return root


# ---------------------------------------------------------------------------
# buildable fixture repos


CMAKE_HELLO_FILES = {
    "CMakeLists.txt": (
        "cmake_minimum_required(VERSION 3.10)\n"
        "project(hello C)\n"
        "add_executable(hello main.c)\n"
    ),
    "main.c": '#include <stdio.h>\nint main(void) { puts("hello"); return 0; }\n',
    "README.md": "# hello\n\nBuild with CMake:\n\n    mkdir build && cd build && cmake .. && make\n",
}

# The header is project-specific on purpose: a well-known name like png.h
# may resolve against headers installed on the host running the sandbox.
MAKE_MISSING_HEADER_FILES = {
    "Makefile": "app: main.c\n\tcc $(CFLAGS) -o app main.c\n",
    "main.c": '#include <widgetcfg.h>\nint main(void) { return 0; }\n',
}

AUTOTOOLS_HELLO_FILES = {
    "configure": (
        "#!/bin/sh\n"
        'echo "checking build environment... done"\n'
        "cp Makefile.in Makefile\n"
        'echo "configure: Makefile generated"\n'
    ),
    "Makefile.in": "all: hello\n\nhello: main.c\n\tcc -o hello main.c\n",
    "main.c": "int main(void) { return 0; }\n",
}


@pytest.fixture
def cmake_hello(tmp_path: Path) -> Path:
    repo = tmp_path / "cmake_hello"
    repo.mkdir()
    return write_tree(repo, CMAKE_HELLO_FILES)


@pytest.fixture
def make_missing_header(tmp_path: Path) -> Path:
    repo = tmp_path / "make_missing_header"
    repo.mkdir()
    return write_tree(repo, MAKE_MISSING_HEADER_FILES)


@pytest.fixture
def autotools_hello(tmp_path: Path) -> Path:
    repo = tmp_path / "autotools_hello"
    repo.mkdir()
    return write_tree(repo, AUTOTOOLS_HELLO_FILES, executable=("configure",))


# ---------------------------------------------------------------------------
# scripted model responses


def dockerfile_response(body: str) -> str:
    return f"Here is the build script:\n\n```dockerfile\n{body}\n```\n"


CMAKE_DOCKERFILE = (
    "FROM ubuntu:22.04\n"
    "COPY . /src\n"
    "WORKDIR /src\n"
    "RUN mkdir -p build && cd build && cmake .. && make"
)

MAKE_DOCKERFILE_REV0 = (
    "FROM ubuntu:22.04\n"
    "COPY . /src\n"
    "WORKDIR /src\n"
    "RUN make"
)

MAKE_DOCKERFILE_REV1 = (
    "FROM ubuntu:22.04\n"
    "COPY . /src\n"
    "WORKDIR /src\n"
    "RUN mkdir -p include && printf '#ifndef WIDGETCFG_H\\n#define WIDGETCFG_H\\n#endif\\n' > include/widgetcfg.h\n"
    "RUN make CFLAGS=-Iinclude"
)

AUTOTOOLS_DOCKERFILE = (
    "FROM ubuntu:22.04\n"
    "COPY . /src\n"
    "WORKDIR /src\n"
    "RUN ./configure && make"
)

JUDGE_OK = (
    '{"static_ok": true, "dynamic_ok": true, "judgment": "Criterion 1: the '
    'Dockerfile invokes the build system on the project itself. Criterion 2: '
    'the log shows the compiler running on the project sources and finishing '
    'cleanly."}'
)
JUDGE_COMPILE_ERROR = (
    '{"static_ok": true, "dynamic_ok": false, "judgment": "Criterion 1: build '
    'commands are present and target the project. Criterion 2: the log ends '
    'in a compile error, so no successful compile progress."}'
)
REFLECT_OK = '{"adhered": true, "notes": "both criteria applied with evidence"}'

FILTER_README = '["README.md"]'
SUMMARY_CMAKE = (
    '{"summary": "The project builds with CMake out of tree.", '
    '"build_hints": ["mkdir build && cd build && cmake .. && make"]}'
)


def cmake_hello_responses() -> list[str]:
    """Call order: doc filter, doc summary, generate, judge, reflect."""
    return [
        FILTER_README,
        SUMMARY_CMAKE,
        dockerfile_response(CMAKE_DOCKERFILE),
        JUDGE_OK,
        REFLECT_OK,
    ]


def make_missing_header_responses() -> list[str]:
    """Generate, failing judge round, repair, passing judge round."""
    return [
        dockerfile_response(MAKE_DOCKERFILE_REV0),
        JUDGE_COMPILE_ERROR,
        REFLECT_OK,
        dockerfile_response(MAKE_DOCKERFILE_REV1),
        JUDGE_OK,
        REFLECT_OK,
    ]


def autotools_hello_responses() -> list[str]:
    return [
        dockerfile_response(AUTOTOOLS_DOCKERFILE),
        JUDGE_OK,
        REFLECT_OK,
    ]


def scripted_session(responses, budget: int = 100_000, **kwargs) -> ChatSession:
    return ChatSession(
        ScriptedTransport(responses),
        model="scripted",
        token_budget=budget,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# loop accounting helpers

GOOD_DOCKERFILE = MAKE_DOCKERFILE_REV0


class FlakyBackend:
    """Fails the first `failures` builds, then succeeds forever."""

    name = "stub"

    def __init__(self, failures: int):
        self.failures = failures
        self.builds = 0
        self.timeouts_seen: list[float] = []

    def build(self, dockerfile_text, context_dir, timeout):
        self.timeouts_seen.append(timeout)
        self.builds += 1
        if self.builds <= self.failures:
            return LogCapture(
                ("cc -o app main.c", "main.c:1: error: it broke", "make: *** Error 1"),
                ExitStatus.ERROR,
                0.01,
            )
        return LogCapture(
            ("gcc -O2 -c main.c", "gcc -o app main.o"), ExitStatus.OK, 0.01
        )


class TickingClock:
    """Monotonic stub advancing a fixed step per reading."""

    def __init__(self, step: float):
        self.now = 0.0
        self.step = step

    def __call__(self) -> float:
        self.now += self.step
        return self.now


def loop_responses(failures: int, max_steps: int) -> list[str]:
    """Exact scripted sequence for a run with f failures before success."""
    executions = min(failures, max_steps) + 1
    repairs = executions - 1
    responses = [dockerfile_response(GOOD_DOCKERFILE)]
    for i in range(executions):
        judged_ok = i >= failures
        responses.append(JUDGE_OK if judged_ok else JUDGE_COMPILE_ERROR)
        responses.append(REFLECT_OK)
        if not judged_ok and i < repairs:
            responses.append(dockerfile_response(GOOD_DOCKERFILE + f"\nRUN true # r{i}"))
    return responses
