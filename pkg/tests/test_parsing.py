"""Parser tests: environment probes, marker scan, manifests, doc pipeline."""

import os
from fnmatch import fnmatch
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buildloop.catalog import default_catalog
from buildloop.errors import NoBuildSystemError, ScanFailedError
from buildloop.parsing import (
    UNKNOWN,
    BuildSystemGuess,
    DependencySpec,
    DocDigest,
    EnvironmentInfo,
    _parse_lscpu,
    _parse_os_release,
    _parse_uname,
    collect_docs,
    enumerate_build_files,
    extract_dependencies,
    extract_environment,
    filter_docs_llm,
    identify_build_system,
    parse_project,
    summarize_docs,
)

from conftest import scripted_session, write_tree


# ---------------------------------------------------------------------------
# environment probes


UNAME_BANNER = (
    "Linux buildhost 6.2.0-39-generic #40-Ubuntu SMP PREEMPT_DYNAMIC "
    "Tue Nov 14 14:18:00 UTC 2023 x86_64 x86_64 x86_64 GNU/Linux"
)

LSCPU_TEXT = (
    "Architecture:        x86_64\n"
    "CPU(s):              16\n"
    "Model name:          AMD EPYC 7B13\n"
    "Thread(s) per core:  2\n"
)

OS_RELEASE_TEXT = 'NAME="Ubuntu"\nVERSION_ID="22.04"\nPRETTY_NAME="Ubuntu 22.04.3 LTS"\n'


def test_parse_uname_extracts_triplet():
    assert _parse_uname(UNAME_BANNER) == ("Linux", "6.2.0-39-generic", "x86_64")


def test_parse_uname_empty_is_unknown():
    assert _parse_uname("") == (UNKNOWN, UNKNOWN, UNKNOWN)


def test_parse_lscpu():
    assert _parse_lscpu(LSCPU_TEXT) == ("AMD EPYC 7B13", "x86_64", 16)


def test_parse_lscpu_partial():
    assert _parse_lscpu("Vendor ID: AuthenticAMD\n") == (UNKNOWN, UNKNOWN, None)


def test_parse_os_release_prefers_pretty_name():
    assert _parse_os_release(OS_RELEASE_TEXT) == "Ubuntu 22.04.3 LTS"


def test_parse_os_release_falls_back_to_name_version():
    assert _parse_os_release('NAME="Alpine Linux"\nVERSION_ID=3.19\n') == "Alpine Linux 3.19"


def test_parse_os_release_empty_is_unknown():
    assert _parse_os_release("") == UNKNOWN


def fake_runner(table):
    def run(argv):
        key = argv[0]
        if key in table:
            return table[key]
        raise FileNotFoundError(argv[0])

    return run


def test_extract_environment_happy_path(tmp_path):
    os_release = tmp_path / "os-release"
    os_release.write_text(OS_RELEASE_TEXT)
    env = extract_environment(
        run=fake_runner({"uname": UNAME_BANNER, "lscpu": LSCPU_TEXT, "nvidia-smi": ""}),
        os_release_path=os_release,
    )
    assert env == EnvironmentInfo(
        os_name="Linux",
        os_version="Ubuntu 22.04.3 LTS",
        kernel="6.2.0-39-generic",
        cpu_arch="x86_64",
        cpu_model="AMD EPYC 7B13",
        core_count=16,
        gpu_present=False,
    )


def test_extract_environment_is_total_on_bare_host(tmp_path):
    # Every probe fails; every field degrades to its unknown marker.
    env = extract_environment(
        run=fake_runner({}), os_release_path=tmp_path / "missing"
    )
    assert env.os_name == UNKNOWN
    assert env.os_version == UNKNOWN
    assert env.kernel == UNKNOWN
    assert env.cpu_arch == UNKNOWN
    assert env.cpu_model == UNKNOWN
    assert env.core_count is None


def test_extract_environment_nproc_fallback(tmp_path):
    env = extract_environment(
        run=fake_runner({"uname": UNAME_BANNER, "nproc": "8\n"}),
        os_release_path=tmp_path / "missing",
    )
    assert env.core_count == 8


def test_extract_environment_gpu_detected(tmp_path):
    env = extract_environment(
        run=fake_runner({"nvidia-smi": "GPU 0: NVIDIA A100 (UUID: ...)\n"}),
        os_release_path=tmp_path / "missing",
    )
    assert env.gpu_present is True


def test_summary_lines_mention_every_fact():
    env = EnvironmentInfo("Linux", "Ubuntu 22.04", "6.2.0", "x86_64", "EPYC", 16, False)
    text = "\n".join(env.summary_lines())
    for token in ("Linux", "Ubuntu 22.04", "6.2.0", "x86_64", "EPYC", "16"):
        assert token in text


# ---------------------------------------------------------------------------
# marker scan


def test_enumerate_build_files_sorted_with_ignores(tmp_path):
    write_tree(
        tmp_path,
        {
            "CMakeLists.txt": "x",
            "src/Makefile": "x",
            "third_party/dep/CMakeLists.txt": "x",
            "vendor/Makefile": "x",
            ".git/BUILD": "x",
            "docs/notes.txt": "x",
        },
    )
    assert enumerate_build_files(tmp_path) == [
        ("CMakeLists.txt", "CMake"),
        ("src/Makefile", "Make"),
    ]


def test_enumerate_build_files_multiple_systems_one_file(tmp_path):
    # "configure" is an Autotools marker; a file can only match its own
    # patterns, so one file maps to exactly the systems whose globs it hits.
    write_tree(tmp_path, {"configure": "x", "meson.build": "x"})
    assert enumerate_build_files(tmp_path) == [
        ("configure", "Autotools"),
        ("meson.build", "Meson"),
    ]


def test_enumerate_build_files_skips_symlinks(tmp_path):
    write_tree(tmp_path, {"real/CMakeLists.txt": "x"})
    (tmp_path / "link").symlink_to(tmp_path / "real")
    assert enumerate_build_files(tmp_path) == [("real/CMakeLists.txt", "CMake")]


def test_enumerate_build_files_missing_root_raises():
    with pytest.raises(ScanFailedError) as excinfo:
        enumerate_build_files("/nonexistent/path/here")
    assert excinfo.value.code == "scan-failed"


def brute_force_markers(root: Path) -> list[tuple[str, str]]:
    """Independent reference scan: os.walk plus the same glob rules."""
    catalog = default_catalog()
    out = []
    for dirpath, dirnames, filenames in os.walk(root, followlinks=False):
        for fname in filenames:
            path = Path(dirpath) / fname
            if path.is_symlink():
                continue
            rel = path.relative_to(root).as_posix()
            if any(fnmatch(rel, g) for g in catalog.ignore_globs):
                continue
            for entry in catalog.entries:
                if any(fnmatch(fname, pat) for pat in entry.marker_patterns):
                    out.append((rel, entry.system))
    return sorted(out)


_SEGMENTS = st.sampled_from(["a", "b2", "third_party", "vendor", "src", "docs"])
_NAMES = st.sampled_from(
    [
        "CMakeLists.txt",
        "Makefile",
        "BUILD.bazel",
        "meson.build",
        "configure.ac",
        "SConstruct",
        "main.c",
        "README.md",
        "app.pro",
    ]
)


@settings(max_examples=40, deadline=None)
@given(
    paths=st.lists(
        st.tuples(st.lists(_SEGMENTS, max_size=2), _NAMES), min_size=0, max_size=10
    )
)
def test_enumerate_matches_reference_walk(tmp_path_factory, paths):
    root = tmp_path_factory.mktemp("scan")
    for segments, name in paths:
        target = root.joinpath(*segments, name)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text("x")
        except (OSError, FileExistsError):
            continue  # a dir/file name collision; the tree as-built still counts
    assert enumerate_build_files(root) == brute_force_markers(root)


# ---------------------------------------------------------------------------
# identification


def test_identify_single_candidate_needs_no_model(tmp_path):
    guess = identify_build_system(tmp_path, [("CMakeLists.txt", "CMake")], [], llm=None)
    assert guess.system == "CMake"
    assert guess.entry_file == "CMakeLists.txt"
    assert guess.alternates == ()


def test_identify_no_candidates_raises(tmp_path):
    with pytest.raises(NoBuildSystemError):
        identify_build_system(tmp_path, [], [], llm=None)


TWO_CANDIDATES = [("CMakeLists.txt", "CMake"), ("Makefile", "Make")]


def test_identify_accepts_model_json_choice(tmp_path):
    llm = scripted_session(
        ['{"entry_file": "Makefile", "system": "Make", "rationale": "top level make"}']
    )
    guess = identify_build_system(tmp_path, TWO_CANDIDATES, [], llm)
    assert (guess.system, guess.entry_file) == ("Make", "Makefile")
    assert guess.rationale == "top level make"
    assert guess.alternates == (("CMake", "CMakeLists.txt"),)


def test_identify_rejects_invented_system_then_accepts_retry(tmp_path):
    llm = scripted_session(
        [
            '{"entry_file": "pom.xml", "system": "Maven"}',
            'Pick CMakeLists.txt, it drives the build.',
        ]
    )
    guess = identify_build_system(tmp_path, TWO_CANDIDATES, [], llm)
    assert guess.system == "CMake"


def test_identify_falls_back_when_model_unusable(tmp_path):
    llm = scripted_session(["no idea", "still no idea"])
    guess = identify_build_system(tmp_path, TWO_CANDIDATES, [], llm)
    # Deterministic priority: CMake outranks Make.
    assert guess.system == "CMake"
    assert "fallback" in guess.rationale


def test_identify_fallback_ranking_prefers_shallow_paths(tmp_path):
    candidates = [("deep/nested/CMakeLists.txt", "CMake"), ("CMakeLists.txt", "CMake")]
    llm = scripted_session(["nope", "nope"])
    guess = identify_build_system(tmp_path, candidates, [], llm)
    assert guess.entry_file == "CMakeLists.txt"


# ---------------------------------------------------------------------------
# dependency manifests


def dep_index(specs):
    return {d.name: d for d in specs}


def test_vcpkg_manifest(tmp_path):
    write_tree(
        tmp_path,
        {
            "vcpkg.json": (
                '{"name": "demo", "dependencies": ["zlib",'
                ' {"name": "libpng", "version>=": "1.6.37"},'
                ' {"name": "boost-asio", "version": "1.83.0"}]}'
            )
        },
    )
    deps = dep_index(extract_dependencies(tmp_path))
    assert deps["zlib"].constraint == "any"
    assert deps["libpng"].constraint == ">=1.6.37"
    assert deps["boost-asio"].constraint == "==1.83.0"
    assert deps["zlib"].source_kind == "package-manager-manifest"


def test_conan_txt_manifest(tmp_path):
    write_tree(
        tmp_path,
        {
            "conanfile.txt": (
                "[requires]\n"
                "fmt/10.1.1\n"
                "zlib/[>=1.2 <2]\n"
                "# openssl/3.0.0 commented out\n"
                "[generators]\n"
                "CMakeDeps\n"
                "[tool_requires]\n"
                "cmake/3.27.0\n"
            )
        },
    )
    deps = dep_index(extract_dependencies(tmp_path))
    assert deps["fmt"].constraint == "==10.1.1"
    assert deps["zlib"].constraint == "range:>=1.2,<2"
    assert deps["cmake"].constraint == "==3.27.0"
    assert "openssl" not in deps
    assert "CMakeDeps" not in deps


def test_conan_py_manifest(tmp_path):
    write_tree(
        tmp_path,
        {
            "conanfile.py": (
                "from conan import ConanFile\n"
                "class Demo(ConanFile):\n"
                '    requires = "poco/1.12.4", "expat/2.5.0"\n'
                "    def build_requirements(self):\n"
                '        self.tool_requires("ninja/1.11.1")\n'
            )
        },
    )
    deps = dep_index(extract_dependencies(tmp_path))
    assert deps["poco"].constraint == "==1.12.4"
    assert deps["expat"].constraint == "==2.5.0"
    assert deps["ninja"].constraint == "==1.11.1"


def test_cmake_find_package_and_pkg_modules(tmp_path):
    write_tree(
        tmp_path,
        {
            "CMakeLists.txt": (
                "cmake_minimum_required(VERSION 3.16)\n"
                "project(demo)\n"
                "find_package(ZLIB 1.2.11 REQUIRED)\n"
                "find_package(Boost 1.74 EXACT COMPONENTS system)\n"
                "find_package(Threads)\n"
                "# find_package(CUDA 11.0) disabled\n"
                "pkg_check_modules(GTK REQUIRED gtk+-3.0>=3.24 sqlite3)\n"
            )
        },
    )
    deps = dep_index(extract_dependencies(tmp_path))
    assert deps["ZLIB"].constraint == ">=1.2.11"
    assert deps["Boost"].constraint == "==1.74"
    assert deps["Threads"].constraint == "any"
    assert deps["gtk+-3.0"].constraint == ">=3.24"
    assert deps["sqlite3"].constraint == "any"
    assert "CUDA" not in deps
    assert deps["ZLIB"].source_kind == "build-file-declaration"


def test_gitmodules(tmp_path):
    write_tree(
        tmp_path,
        {
            ".gitmodules": (
                '[submodule "deps/zlib"]\n'
                "\tpath = deps/zlib\n"
                "\turl = https://github.com/madler/zlib.git\n"
                '[submodule "googletest"]\n'
                "\tpath = deps/googletest\n"
                "\turl = https://github.com/google/googletest\n"
            )
        },
    )
    deps = dep_index(extract_dependencies(tmp_path))
    assert deps["zlib"].source_kind == "submodule"
    assert deps["googletest"].constraint == "any"


def test_merge_keeps_tightest_constraint(tmp_path):
    write_tree(
        tmp_path,
        {
            "CMakeLists.txt": "find_package(zlib)\n",
            "vcpkg.json": '{"dependencies": [{"name": "ZLIB", "version": "1.3"}]}',
        },
    )
    deps = extract_dependencies(tmp_path)
    assert len(deps) == 1
    assert deps[0].constraint == "==1.3"


def test_merge_tie_keeps_first_seen(tmp_path):
    # Both declare "any"; CMakeLists.txt sorts before vcpkg.json.
    write_tree(
        tmp_path,
        {
            "CMakeLists.txt": "find_package(zlib)\n",
            "vcpkg.json": '{"dependencies": ["zlib"]}',
        },
    )
    deps = extract_dependencies(tmp_path)
    assert len(deps) == 1
    assert deps[0].origin_path == "CMakeLists.txt"


def test_dependencies_sorted_case_insensitive(tmp_path):
    write_tree(
        tmp_path,
        {"vcpkg.json": '{"dependencies": ["Zebra", "apple", "Mango"]}'},
    )
    names = [d.name for d in extract_dependencies(tmp_path)]
    assert names == ["apple", "Mango", "Zebra"]


def test_malformed_manifest_is_skipped_not_fatal(tmp_path):
    write_tree(
        tmp_path,
        {
            "vcpkg.json": "{this is not json",
            "CMakeLists.txt": "find_package(ZLIB 1.2)\n",
        },
    )
    deps = extract_dependencies(tmp_path)
    assert [d.name for d in deps] == ["ZLIB"]


def test_constraint_validation():
    with pytest.raises(ValueError):
        DependencySpec("x", "sometimes", "submodule", "f")


# ---------------------------------------------------------------------------
# doc pipeline


def test_collect_docs_keywords_and_dirs(tmp_path):
    write_tree(
        tmp_path,
        {
            "README.md": "text",
            "INSTALL": "text",
            "BUILDING.rst": "text",
            "docs/guide.txt": "text",
            "doc/api.md": "text",
            "src/main.c": "int main;",
            "notes.txt": "text",
        },
    )
    assert collect_docs(tmp_path) == [
        "BUILDING.rst",
        "INSTALL",
        "README.md",
        "doc/api.md",
        "docs/guide.txt",
    ]


def test_collect_docs_excludes_binary_and_oversized(tmp_path):
    write_tree(tmp_path, {"README.md": "ok"})
    (tmp_path / "README.bin").write_bytes(b"REA\x00DME")
    (tmp_path / "INSTALL.md").write_text("x" * 4096)
    assert collect_docs(tmp_path, size_cap=1024) == ["README.md"]


def test_filter_docs_returns_ordered_subset():
    llm = scripted_session(['["b.md", "a.md", "unknown.md"]'])
    kept = filter_docs_llm(["a.md", "b.md", "c.md"], "proj", llm)
    assert kept == ["a.md", "b.md"]


def test_filter_docs_fails_open_on_garbage():
    llm = scripted_session(["I cannot answer that"])
    paths = ["a.md", "b.md"]
    assert filter_docs_llm(paths, "proj", llm) == paths


def test_filter_docs_empty_input_makes_no_call():
    transport_less = scripted_session([])
    assert filter_docs_llm([], "proj", transport_less) == []


def test_summarize_docs_parses_json(tmp_path):
    write_tree(tmp_path, {"README.md": "Build with make."})
    llm = scripted_session(
        ['{"summary": "Uses make.", "build_hints": ["make", "make install"]}']
    )
    digests = summarize_docs(tmp_path, ["README.md"], llm)
    assert digests == [DocDigest("README.md", "Uses make.", ("make", "make install"))]


def test_summarize_docs_chunks_large_files(tmp_path):
    # budget 4096 tokens -> 4096-char chunks; 10000 chars need three calls.
    write_tree(tmp_path, {"README.md": "z" * 10_000})
    responses = [
        '{"summary": "part one.", "build_hints": ["make"]}',
        '{"summary": "part two.", "build_hints": ["make"]}',
        '{"summary": "part three.", "build_hints": ["make check"]}',
    ]
    llm = scripted_session(responses, budget=4096)
    digests = summarize_docs(tmp_path, ["README.md"], llm)
    assert len(digests) == 1
    assert digests[0].summary == "part one. part two. part three."
    assert digests[0].build_hints == ("make", "make check")
    assert llm._transport.remaining == 0


def test_summarize_docs_raw_text_fallback(tmp_path):
    write_tree(tmp_path, {"README.md": "Build with make."})
    llm = scripted_session(["just use make, nothing fancy"])
    digests = summarize_docs(tmp_path, ["README.md"], llm)
    assert digests[0].summary == "just use make, nothing fancy"
    assert digests[0].build_hints == ()


# ---------------------------------------------------------------------------
# aggregate


def test_parse_project_cmake_hello(cmake_hello):
    from buildloop.gateway import ChatSession, ScriptedTransport

    transport = ScriptedTransport(
        [
            '["README.md"]',
            '{"summary": "CMake project.", "build_hints": ["cmake .. && make"]}',
        ]
    )
    sessions = []

    def make_session():
        session = ChatSession(transport, model="scripted", token_budget=50_000)
        sessions.append(session)
        return session

    context = parse_project(
        cmake_hello, make_session, environment=EnvironmentInfo()
    )
    assert context.project_name == "cmake_hello"
    assert context.build_system == BuildSystemGuess(
        "CMake", "CMakeLists.txt", "single candidate"
    )
    assert [d.path for d in context.docs] == ["README.md"]
    # Single candidate: filter and summary sessions only, no adjudication.
    assert len(sessions) == 2
    assert transport.remaining == 0
    round_trip = context.to_dict()
    assert round_trip["build_system"]["system"] == "CMake"
    assert round_trip["docs"][0]["build_hints"] == ["cmake .. && make"]


def test_parse_project_no_markers_raises(tmp_path):
    write_tree(tmp_path, {"src/main.c": "int main;"})
    with pytest.raises(NoBuildSystemError):
        parse_project(tmp_path, lambda: None, environment=EnvironmentInfo())
