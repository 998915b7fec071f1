"""Build-system catalog: marker files, default commands, and shared lexicons.

The catalog is a JSON data file so deployments can extend it without code
changes (``--catalog`` on the CLI).  It also carries the repo-scan ignore
globs and the build-command lexicon shared between the Dockerfile lint and
the success judge.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

DEFAULT_BASE_IMAGE = "ubuntu:22.04"


@dataclass(frozen=True)
class CatalogEntry:
    system: str
    marker_patterns: tuple[str, ...]
    default_commands: tuple[str, ...]
    priority: int
    setup_commands: tuple[str, ...] = ()


@dataclass(frozen=True)
class Catalog:
    entries: tuple[CatalogEntry, ...]
    ignore_globs: tuple[str, ...]
    build_command_lexicon: tuple[str, ...]

    def __post_init__(self) -> None:
        priorities = [e.priority for e in self.entries]
        if len(set(priorities)) != len(priorities):
            raise ValueError("catalog priorities must be unique")

    def entry_for(self, system: str) -> CatalogEntry | None:
        for entry in self.entries:
            if entry.system == system:
                return entry
        return None

    def priority_of(self, system: str) -> int:
        entry = self.entry_for(system)
        return entry.priority if entry else len(self.entries) + 1

    def lexicon_patterns(self) -> list[re.Pattern[str]]:
        """Word-boundary regexes for the build-command lexicon.

        Boundaries exclude word chars, dots, and dashes on both sides so
        that "make" does not match inside "cmake" or "ninja" inside
        "ninja-build".
        """
        patterns = []
        for token in self.build_command_lexicon:
            escaped = re.escape(token).replace(r"\ ", r"\s+")
            patterns.append(
                re.compile(rf"(?<![\w.\-]){escaped}(?![\w.\-])")
            )
        return patterns


def _as_entry(raw: dict) -> CatalogEntry:
    return CatalogEntry(
        system=raw["system"],
        marker_patterns=tuple(raw["marker_patterns"]),
        default_commands=tuple(raw["default_commands"]),
        priority=int(raw["priority"]),
        setup_commands=tuple(raw.get("setup_commands", ())),
    )


def load_catalog(path: Path | str | None = None) -> Catalog:
    """Load a catalog file, or the packaged default when `path` is None."""
    if path is None:
        text = (
            resources.files("buildloop").joinpath("data/catalog.json").read_text()
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    raw = json.loads(text)
    return Catalog(
        entries=tuple(_as_entry(e) for e in raw["entries"]),
        ignore_globs=tuple(raw.get("ignore_globs", ())),
        build_command_lexicon=tuple(raw.get("build_command_lexicon", ())),
    )


@lru_cache(maxsize=1)
def default_catalog() -> Catalog:
    return load_catalog(None)
