"""Repository fact extraction.

Turns a checked-out source tree into a ProjectContext: host environment,
build-system candidates, declared dependencies, and summarized build docs.
Everything here runs before the first model-generated build attempt and
never touches the network; dependency extraction reads manifests as they
sit in the tree, it does not resolve anything.
"""

from __future__ import annotations

import configparser
import json
import logging
import re
import subprocess
from dataclasses import dataclass
from fnmatch import fnmatch
from pathlib import Path, PurePosixPath
from typing import Callable, Iterable

from .catalog import Catalog, default_catalog
from .errors import NoBuildSystemError, ScanFailedError
from .gateway import ChatSession
from .llmtext import extract_json
from .templates import load_template, render

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
DOC_SIZE_CAP = 256 * 1024

# Deterministic fallback order when the model cannot adjudicate between
# build-system candidates.  Lower is better; systems missing from this
# list rank after the listed ones by catalog priority.
FALLBACK_PRIORITY = ("CMake", "Make", "Autotools", "Bazel", "Meson")

_DOC_NAME_RE = re.compile(r"(?i)(readme|build|install|compil|contribut)")
_DOC_DIR_RE = re.compile(r"(?i)^docs?$")
_ARCH_TOKENS = {
    "x86_64",
    "amd64",
    "i386",
    "i686",
    "aarch64",
    "arm64",
    "armv7l",
    "riscv64",
    "ppc64le",
    "s390x",
}


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class EnvironmentInfo:
    os_name: str = UNKNOWN
    os_version: str = UNKNOWN
    kernel: str = UNKNOWN
    cpu_arch: str = UNKNOWN
    cpu_model: str = UNKNOWN
    core_count: int | None = None
    gpu_present: bool = False

    def summary_lines(self) -> list[str]:
        cores = str(self.core_count) if self.core_count else UNKNOWN
        return [
            f"os: {self.os_name} {self.os_version}",
            f"kernel: {self.kernel}",
            f"cpu: {self.cpu_model} ({self.cpu_arch}, {cores} cores)",
            f"gpu: {'present' if self.gpu_present else 'none detected'}",
        ]


@dataclass(frozen=True)
class DependencySpec:
    name: str
    constraint: str  # "any", "==v", ">=v", or "range:..."
    source_kind: str  # system-package | package-manager-manifest | build-file-declaration | submodule
    origin_path: str

    def __post_init__(self) -> None:
        if not re.fullmatch(r"any|==\S+|>=\S+|range:\S+", self.constraint):
            raise ValueError(f"bad constraint {self.constraint!r}")

    @property
    def tightness(self) -> int:
        if self.constraint.startswith("=="):
            return 2
        if self.constraint == "any":
            return 0
        return 1


@dataclass(frozen=True)
class BuildSystemGuess:
    system: str
    entry_file: str
    rationale: str
    alternates: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class DocDigest:
    path: str
    summary: str
    build_hints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.summary:
            raise ValueError("doc summary must be non-empty")


@dataclass(frozen=True)
class ProjectContext:
    project_name: str
    environment: EnvironmentInfo
    build_system: BuildSystemGuess
    dependencies: tuple[DependencySpec, ...]
    docs: tuple[DocDigest, ...]

    def to_dict(self) -> dict:
        return {
            "project_name": self.project_name,
            "environment": vars(self.environment) | {},
            "build_system": {
                "system": self.build_system.system,
                "entry_file": self.build_system.entry_file,
                "rationale": self.build_system.rationale,
                "alternates": [list(a) for a in self.build_system.alternates],
            },
            "dependencies": [
                {
                    "name": d.name,
                    "constraint": d.constraint,
                    "source_kind": d.source_kind,
                    "origin_path": d.origin_path,
                }
                for d in self.dependencies
            ],
            "docs": [
                {
                    "path": d.path,
                    "summary": d.summary,
                    "build_hints": list(d.build_hints),
                }
                for d in self.docs
            ],
        }


# ---------------------------------------------------------------------------
# environment


def _run_command(argv: list[str]) -> str:
    return subprocess.run(
        argv, capture_output=True, text=True, timeout=10, check=True
    ).stdout


def _parse_uname(banner: str) -> tuple[str, str, str]:
    """(os_name, kernel, cpu_arch) out of a `uname -a` banner."""
    tokens = banner.split()
    if not tokens:
        return UNKNOWN, UNKNOWN, UNKNOWN
    os_name = tokens[0]
    kernel = tokens[2] if len(tokens) > 2 else UNKNOWN
    arch = next((t for t in tokens if t in _ARCH_TOKENS), UNKNOWN)
    return os_name, kernel, arch


def _parse_lscpu(text: str) -> tuple[str, str, int | None]:
    """(cpu_model, cpu_arch, core_count) out of `lscpu` output."""
    model, arch, cores = UNKNOWN, UNKNOWN, None
    for line in text.splitlines():
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "Model name" and value:
            model = value
        elif key == "Architecture" and value:
            arch = value
        elif key == "CPU(s)" and value.isdigit():
            cores = int(value)
    return model, arch, cores


def _parse_os_release(text: str) -> str:
    fields = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip().strip('"')
    if "PRETTY_NAME" in fields:
        return fields["PRETTY_NAME"]
    name = fields.get("NAME", "")
    version = fields.get("VERSION_ID", "")
    return f"{name} {version}".strip() or UNKNOWN


def extract_environment(
    run: Callable[[list[str]], str] = _run_command,
    os_release_path: Path | str = "/etc/os-release",
) -> EnvironmentInfo:
    """Probe the host.  Total: anything unprobeable becomes an unknown marker.

    `run` is injectable so tests can simulate hosts missing tools.
    """
    os_name, kernel, arch = UNKNOWN, UNKNOWN, UNKNOWN
    try:
        os_name, kernel, arch = _parse_uname(run(["uname", "-a"]))
    except Exception:
        logger.warning("uname unavailable; kernel facts unknown")

    model, cores = UNKNOWN, None
    try:
        model, lscpu_arch, cores = _parse_lscpu(run(["lscpu"]))
        if arch == UNKNOWN:
            arch = lscpu_arch
    except Exception:
        logger.warning("lscpu unavailable; cpu facts unknown")

    if cores is None:
        try:
            out = run(["nproc"]).strip()
            if out.isdigit():
                cores = int(out)
        except Exception:
            pass

    os_version = UNKNOWN
    try:
        os_version = _parse_os_release(
            Path(os_release_path).read_text(encoding="utf-8")
        )
    except OSError:
        pass

    gpu = False
    try:
        gpu = bool(run(["nvidia-smi", "-L"]).strip())
    except Exception:
        gpu = Path("/dev/nvidia0").exists()

    return EnvironmentInfo(
        os_name=os_name,
        os_version=os_version,
        kernel=kernel,
        cpu_arch=arch,
        cpu_model=model,
        core_count=cores if cores and cores >= 1 else None,
        gpu_present=gpu,
    )


# ---------------------------------------------------------------------------
# tree scanning


def _is_ignored(rel_posix: str, ignore_globs: Iterable[str]) -> bool:
    return any(fnmatch(rel_posix, glob) for glob in ignore_globs)


def _walk_files(root: Path, ignore_globs: Iterable[str]) -> Iterable[Path]:
    """Every non-ignored file under root, in no particular order."""
    try:
        stack = [root]
        while stack:
            current = stack.pop()
            for child in current.iterdir():
                rel = child.relative_to(root).as_posix()
                if _is_ignored(rel, ignore_globs):
                    continue
                if child.is_symlink():
                    continue
                if child.is_dir():
                    stack.append(child)
                elif child.is_file():
                    yield child
    except OSError as exc:
        raise ScanFailedError(f"cannot scan {root}: {exc}") from exc


def enumerate_build_files(
    root: Path | str, catalog: Catalog | None = None
) -> list[tuple[str, str]]:
    """All (relative path, system) marker matches, lexicographic by path.

    Raises ``scan-failed`` if the root is unreadable.
    """
    root = Path(root)
    if not root.is_dir():
        raise ScanFailedError(f"not a readable directory: {root}")
    catalog = catalog or default_catalog()
    matches = []
    for path in _walk_files(root, catalog.ignore_globs):
        rel = path.relative_to(root).as_posix()
        name = path.name
        for entry in catalog.entries:
            if any(fnmatch(name, pat) for pat in entry.marker_patterns):
                matches.append((rel, entry.system))
    return sorted(matches)


# ---------------------------------------------------------------------------
# build-system identification


def _rank_candidates(
    candidates: list[tuple[str, str]], catalog: Catalog
) -> list[tuple[str, str]]:
    """Order candidates by fallback priority, then depth, then path."""

    def key(candidate: tuple[str, str]):
        path, system = candidate
        if system in FALLBACK_PRIORITY:
            rank = FALLBACK_PRIORITY.index(system)
        else:
            rank = len(FALLBACK_PRIORITY) + catalog.priority_of(system)
        return (rank, path.count("/"), path)

    return sorted(candidates, key=key)


def identify_build_system(
    root: Path | str,
    candidates: list[tuple[str, str]],
    docs: Iterable[DocDigest],
    llm: ChatSession | None,
    catalog: Catalog | None = None,
    attempts: int = 2,
) -> BuildSystemGuess:
    """Pick the primary build system among marker-file candidates.

    A single candidate is a forced choice and needs no adjudication.  With
    several, the model is asked to name one of them; it cannot invent a
    system that matched no marker.  Unusable model output falls back to the
    deterministic priority ranking, and the fallback is noted in the
    rationale.
    """
    if not candidates:
        raise NoBuildSystemError(f"no build-system markers under {root}")
    catalog = catalog or default_catalog()
    ranked = _rank_candidates(list(candidates), catalog)

    if len(candidates) == 1:
        path, system = candidates[0]
        return BuildSystemGuess(system, path, "single candidate")

    chosen: tuple[str, str] | None = None
    rationale = ""
    if llm is not None:
        template = load_template("identify")
        prompt = render(
            template,
            project_name=Path(root).name,
            candidates="\n".join(f"- {p} ({s})" for p, s in ranked),
            doc_notes="\n".join(d.summary for d in docs) or "none",
        )
        by_path = {p: (p, s) for p, s in candidates}
        for attempt in range(attempts):
            text, _ = llm.send(
                prompt
                if attempt == 0
                else "Answer with one of the listed candidate paths."
            )
            data = extract_json(text)
            if isinstance(data, dict) and data.get("entry_file") in by_path:
                chosen = by_path[data["entry_file"]]
                rationale = str(data.get("rationale", "model choice"))
                break
            named = [p for p in by_path if p in text]
            if named:
                chosen = by_path[min(named, key=len)]
                rationale = "model choice"
                break

    if chosen is None:
        chosen = ranked[0]
        rationale = "fallback: deterministic priority order (model output unusable)"

    alternates = tuple((s, p) for p, s in ranked if (p, s) != chosen)
    return BuildSystemGuess(chosen[1], chosen[0], rationale, alternates)


# ---------------------------------------------------------------------------
# dependency manifests


def _dep(name: str, constraint: str, kind: str, origin: str) -> DependencySpec | None:
    name = name.strip()
    if not name:
        return None
    try:
        return DependencySpec(name, constraint, kind, origin)
    except ValueError:
        logger.warning("skipping malformed dependency %r in %s", name, origin)
        return None


def _deps_from_vcpkg(path: Path, rel: str) -> list[DependencySpec]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    found = []
    for item in raw.get("dependencies", []):
        if isinstance(item, str):
            spec = _dep(item, "any", "package-manager-manifest", rel)
        elif isinstance(item, dict) and "name" in item:
            if "version>=" in item:
                constraint = f">={item['version>=']}"
            elif "version" in item:
                constraint = f"=={item['version']}"
            else:
                constraint = "any"
            spec = _dep(item["name"], constraint, "package-manager-manifest", rel)
        else:
            continue
        if spec:
            found.append(spec)
    return found


# Version ranges like "[>=1.2 <2]" may contain spaces inside the brackets.
_CONAN_REF_RE = re.compile(r"^([A-Za-z0-9_.+\-]+)/(\[[^\]]*\]|[^@\s#]+)")


def _conan_ref_to_spec(ref: str, rel: str) -> DependencySpec | None:
    ref = ref.strip().strip("\"'")
    match = _CONAN_REF_RE.match(ref)
    if not match:
        return None
    name, version = match.group(1), match.group(2)
    if version.startswith("["):
        return _dep(name, f"range:{version.strip('[]').replace(' ', ',')}",
                    "package-manager-manifest", rel)
    return _dep(name, f"=={version}", "package-manager-manifest", rel)


def _deps_from_conan_txt(path: Path, rel: str) -> list[DependencySpec]:
    found = []
    section = None
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            continue
        if section in ("requires", "build_requires", "tool_requires"):
            spec = _conan_ref_to_spec(line, rel)
            if spec:
                found.append(spec)
    return found


_CONAN_PY_REQ_RE = re.compile(
    r"(?:^\s*(?:tool_)?requires\s*=\s*(?P<tuple>[^\n]+)|self\.(?:tool_)?requires\(\s*(?P<call>\"[^\"]+\"|'[^']+')\s*[,)])",
    re.MULTILINE,
)


def _deps_from_conan_py(path: Path, rel: str) -> list[DependencySpec]:
    text = path.read_text(encoding="utf-8")
    found = []
    for match in _CONAN_PY_REQ_RE.finditer(text):
        if match.group("call"):
            refs = [match.group("call")]
        else:
            refs = re.findall(r"\"[^\"]+\"|'[^']+'", match.group("tuple"))
        for ref in refs:
            spec = _conan_ref_to_spec(ref, rel)
            if spec:
                found.append(spec)
    return found


_FIND_PACKAGE_RE = re.compile(
    r"find_package\s*\(\s*([A-Za-z0-9_.\-]+)([^)]*)\)", re.IGNORECASE
)
_PKG_CHECK_RE = re.compile(
    r"pkg_check_modules\s*\(\s*[A-Za-z0-9_]+([^)]*)\)", re.IGNORECASE
)
_VERSION_TOKEN_RE = re.compile(r"^\d[\w.\-]*$")
_CMAKE_KEYWORDS = {
    "REQUIRED", "QUIET", "COMPONENTS", "OPTIONAL_COMPONENTS", "EXACT",
    "MODULE", "CONFIG", "NO_MODULE", "GLOBAL", "IMPORTED_TARGET",
    "NO_DEFAULT_PATH", "HINTS", "PATHS",
}


def _deps_from_cmake(path: Path, rel: str) -> list[DependencySpec]:
    text = path.read_text(encoding="utf-8", errors="replace")
    # Strip comments so commented-out declarations are not collected.
    text = re.sub(r"#[^\n]*", "", text)
    found = []
    for match in _FIND_PACKAGE_RE.finditer(text):
        name, tail = match.group(1), match.group(2).split()
        if name.startswith("${"):
            continue
        version = next(
            (t for t in tail if _VERSION_TOKEN_RE.match(t)), None
        )
        exact = "EXACT" in (t.upper() for t in tail)
        if version:
            constraint = f"=={version}" if exact else f">={version}"
        else:
            constraint = "any"
        spec = _dep(name, constraint, "build-file-declaration", rel)
        if spec:
            found.append(spec)
    for match in _PKG_CHECK_RE.finditer(text):
        for token in match.group(1).split():
            if token.upper() in _CMAKE_KEYWORDS or token.startswith("${"):
                continue
            m = re.match(r"([A-Za-z0-9_.+\-]+)(>=|=|<=)([\w.]+)$", token)
            if m:
                op = ">=" if m.group(2) in (">=",) else "=="
                spec = _dep(m.group(1), f"{op}{m.group(3)}",
                            "build-file-declaration", rel)
            elif re.fullmatch(r"[A-Za-z][A-Za-z0-9_.+\-]*", token):
                spec = _dep(token, "any", "build-file-declaration", rel)
            else:
                continue
            if spec:
                found.append(spec)
    return found


def _deps_from_gitmodules(path: Path, rel: str) -> list[DependencySpec]:
    parser = configparser.ConfigParser()
    parser.read_string(path.read_text(encoding="utf-8"))
    found = []
    for section in parser.sections():
        if not section.startswith("submodule"):
            continue
        url = parser.get(section, "url", fallback="")
        name = PurePosixPath(url.rstrip("/")).name
        if name.endswith(".git"):
            name = name[: -len(".git")]
        spec = _dep(name, "any", "submodule", rel)
        if spec:
            found.append(spec)
    return found


def extract_dependencies(
    root: Path | str, catalog: Catalog | None = None
) -> list[DependencySpec]:
    """Declared dependencies across every manifest kind, merged and sorted.

    Duplicate names are merged keeping the tightest constraint (exact beats
    range beats any); ties keep the first-seen origin.  Malformed manifests
    are skipped with a warning, never fatal.
    """
    root = Path(root)
    catalog = catalog or default_catalog()
    files = sorted(
        _walk_files(root, catalog.ignore_globs),
        key=lambda p: p.relative_to(root).as_posix(),
    )

    collected: list[DependencySpec] = []
    for path in files:
        rel = path.relative_to(root).as_posix()
        name = path.name
        extractor = None
        if name == "vcpkg.json":
            extractor = _deps_from_vcpkg
        elif name == "conanfile.txt":
            extractor = _deps_from_conan_txt
        elif name == "conanfile.py":
            extractor = _deps_from_conan_py
        elif name == "CMakeLists.txt" or name.endswith(".cmake"):
            extractor = _deps_from_cmake
        elif name == ".gitmodules":
            extractor = _deps_from_gitmodules
        if extractor is None:
            continue
        try:
            collected.extend(extractor(path, rel))
        except Exception as exc:
            logger.warning("skipping malformed manifest %s: %s", rel, exc)

    merged: dict[str, DependencySpec] = {}
    for spec in collected:
        key = spec.name.lower()
        existing = merged.get(key)
        if existing is None or spec.tightness > existing.tightness:
            merged[key] = spec
    return sorted(merged.values(), key=lambda d: d.name.lower())


# ---------------------------------------------------------------------------
# documentation pipeline


def _is_text_file(path: Path) -> bool:
    try:
        chunk = path.open("rb").read(8192)
    except OSError:
        return False
    return b"\x00" not in chunk


def collect_docs(
    root: Path | str,
    catalog: Catalog | None = None,
    size_cap: int = DOC_SIZE_CAP,
) -> list[str]:
    """Keyword round of doc discovery: names and locations only, no model.

    Collects text files whose names mention readme/build/install/compile/
    contributing, plus anything inside doc/ or docs/ directories.  Files
    over the size cap are excluded with a warning.
    """
    root = Path(root)
    catalog = catalog or default_catalog()
    hits = []
    for path in _walk_files(root, catalog.ignore_globs):
        rel = path.relative_to(root).as_posix()
        in_doc_dir = any(_DOC_DIR_RE.match(part) for part in Path(rel).parts[:-1])
        if not (_DOC_NAME_RE.search(path.name) or in_doc_dir):
            continue
        if not _is_text_file(path):
            continue
        if path.stat().st_size > size_cap:
            logger.warning("doc %s exceeds %d bytes, excluded", rel, size_cap)
            continue
        hits.append(rel)
    return sorted(hits)


def filter_docs_llm(
    paths: list[str], project_name: str, llm: ChatSession
) -> list[str]:
    """Model round of doc filtering, by name and path only.

    Returns a subset of `paths` in their original order.  Malformed model
    output fails open: the input list comes back unchanged, flagged in the
    log, so a bad response can only widen what the summarizer reads.
    """
    if not paths:
        return []
    template = load_template("doc_filter")
    prompt = render(
        template,
        project_name=project_name,
        paths="\n".join(f"- {p}" for p in paths),
    )
    text, _ = llm.send(prompt)
    data = extract_json(text)
    if isinstance(data, list):
        keep = {p for p in data if isinstance(p, str)}
        return [p for p in paths if p in keep]
    logger.warning("doc filter output unusable; keeping all %d paths", len(paths))
    return list(paths)


def _chunk_text(text: str, chunk_chars: int) -> list[str]:
    if len(text) <= chunk_chars:
        return [text]
    return [text[i : i + chunk_chars] for i in range(0, len(text), chunk_chars)]


def summarize_docs(
    root: Path | str, paths: list[str], llm: ChatSession
) -> list[DocDigest]:
    """Summarize each doc into build-relevant notes and discrete hints.

    Files the session budget cannot hold in one piece are read in chunks of
    roughly a quarter of the budget; chunk summaries are merged.  Unreadable
    files are skipped with a warning.
    """
    root = Path(root)
    template = load_template("doc_summary")
    chunk_chars = max(llm.token_budget // 4, 256) * 4
    digests = []
    for rel in paths:
        try:
            text = (root / rel).read_text(encoding="utf-8", errors="replace")
        except OSError as exc:
            logger.warning("doc %s unreadable, skipped: %s", rel, exc)
            continue
        summaries: list[str] = []
        hints: list[str] = []
        for chunk in _chunk_text(text, chunk_chars):
            prompt = render(template, path=rel, content=chunk)
            reply, _ = llm.send(prompt)
            data = extract_json(reply)
            if isinstance(data, dict) and data.get("summary"):
                summaries.append(str(data["summary"]).strip())
                for hint in data.get("build_hints", []):
                    if isinstance(hint, str) and hint and hint not in hints:
                        hints.append(hint)
            else:
                summaries.append(reply.strip()[:500])
        summary = " ".join(s for s in summaries if s) or "no build information"
        digests.append(DocDigest(rel, summary, tuple(hints)))
    return digests


# ---------------------------------------------------------------------------
# aggregate


def parse_project(
    root: Path | str,
    make_session: Callable[[], ChatSession],
    catalog: Catalog | None = None,
    project_name: str | None = None,
    environment: EnvironmentInfo | None = None,
) -> ProjectContext:
    """Run the whole parsing pass once for a project.

    `make_session` supplies a fresh session per model-facing step, keeping
    doc filtering, summarization, and identification out of each other's
    context.
    """
    root = Path(root)
    catalog = catalog or default_catalog()
    name = project_name or root.name

    env = environment if environment is not None else extract_environment()
    candidates = enumerate_build_files(root, catalog)
    doc_paths = collect_docs(root, catalog)
    kept = filter_docs_llm(doc_paths, name, make_session()) if doc_paths else []
    digests = summarize_docs(root, kept, make_session()) if kept else []
    guess = identify_build_system(
        root,
        candidates,
        digests,
        make_session() if len(candidates) > 1 else None,
        catalog,
    )
    deps = extract_dependencies(root, catalog)
    return ProjectContext(
        project_name=name,
        environment=env,
        build_system=guess,
        dependencies=tuple(deps),
        docs=tuple(digests),
    )
