"""Prompt templates as data.

Templates live in ``templates/*.txt`` with ``{{name}}`` placeholders and are
grouped by scenario: build-system identification, documentation retrieval,
initial generation, repair, and the success judge.  Every placeholder in a
template body is required and must appear exactly once; rendering with a
missing binding raises ``template-incomplete``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .errors import TemplateIncompleteError

PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


class Scenario(str, Enum):
    IDENTIFY = "identify"
    DOC_RAG = "doc-rag"
    GENERATE = "generate"
    REPAIR = "repair"
    JUDGE = "judge"


_TEMPLATE_FILES: dict[str, tuple[str, Scenario]] = {
    "identify": ("identify.txt", Scenario.IDENTIFY),
    "doc_filter": ("doc_filter.txt", Scenario.DOC_RAG),
    "doc_summary": ("doc_summary.txt", Scenario.DOC_RAG),
    "generate": ("generate.txt", Scenario.GENERATE),
    "repair": ("repair.txt", Scenario.REPAIR),
    "judge": ("judge.txt", Scenario.JUDGE),
    "reflect": ("reflect.txt", Scenario.JUDGE),
}


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    scenario: Scenario
    body: str
    required_placeholders: frozenset[str]

    def __post_init__(self) -> None:
        names = PLACEHOLDER_RE.findall(self.body)
        duplicates = {n for n in names if names.count(n) > 1}
        if duplicates:
            raise ValueError(
                f"template {self.id}: placeholders used more than once: "
                f"{sorted(duplicates)}"
            )
        if set(names) != set(self.required_placeholders):
            raise ValueError(
                f"template {self.id}: body placeholders {sorted(set(names))} "
                f"differ from required {sorted(self.required_placeholders)}"
            )


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    filename, scenario = _TEMPLATE_FILES[template_id]
    body = (
        resources.files("buildloop").joinpath(f"templates/{filename}").read_text()
    )
    return PromptTemplate(
        id=template_id,
        scenario=scenario,
        body=body,
        required_placeholders=frozenset(PLACEHOLDER_RE.findall(body)),
    )


def template_ids() -> list[str]:
    return list(_TEMPLATE_FILES)


def render(template: PromptTemplate, **bindings: str) -> str:
    """Substitute every placeholder; unbound placeholders are an error.

    Single-pass substitution: placeholder-looking text inside a bound value
    is carried through verbatim, never re-expanded.
    """
    missing = template.required_placeholders - bindings.keys()
    if missing:
        raise TemplateIncompleteError(
            f"template {template.id} missing bindings: {sorted(missing)}"
        )
    return PLACEHOLDER_RE.sub(
        lambda match: str(bindings[match.group(1)]), template.body
    )
