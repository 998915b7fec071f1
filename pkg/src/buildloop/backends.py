"""Execution backends.

Two ways to run a build script:

* :class:`ContainerBackend` submits the script to a container engine's
  local HTTP API (unix socket or TCP host) and streams the build output.
  No engine SDK involved, just the REST endpoint.
* :class:`LocalSandboxBackend` interprets a restricted subset of the script
  directly in a scratch directory.  It exists for tests and offline fixture
  runs: the base-image instruction is ignored and run commands execute on
  the host, confined to the scratch tree for every file operation the
  interpreter itself performs.  Commands it runs are trusted test fixtures.

The backend choice is always explicit configuration; nothing falls back
silently from one to the other.
"""

from __future__ import annotations

import io
import json
import logging
import re
import shutil
import subprocess
import tarfile
import tempfile
import time
import uuid
from pathlib import Path, PurePosixPath

import httpx

from .errors import BackendUnavailableError
from .executor import ExitStatus, LogCapture

logger = logging.getLogger(__name__)

_CONTINUATION_RE = re.compile(r"\\\s*$")
# cmake and friends print wall-clock suffixes like "(0.4s)"; canonicalize
# them so recorded transcripts replay byte-identically on reruns.
_TIMING_RE = re.compile(r"\((\d+(?:\.\d+)?)s\)")


def _logical_lines(dockerfile_text: str) -> list[str]:
    """Instruction lines with continuations joined and comments dropped."""
    logical: list[str] = []
    pending = ""
    for raw in dockerfile_text.splitlines():
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if pending:
            pending = pending + " " + stripped
        else:
            pending = stripped
        if _CONTINUATION_RE.search(pending):
            pending = _CONTINUATION_RE.sub("", pending).rstrip()
            continue
        logical.append(pending)
        pending = ""
    if pending:
        logical.append(pending)
    return logical


def _split_instruction(line: str) -> tuple[str, str]:
    parts = line.split(None, 1)
    keyword = parts[0].upper()
    rest = parts[1] if len(parts) > 1 else ""
    return keyword, rest


class LocalSandboxBackend:
    """Interpret FROM/ENV/WORKDIR/COPY/RUN in a scratch directory.

    Absolute destination paths are remapped under the scratch root, so the
    interpreter never writes outside it; COPY sources must stay inside the
    build context.  Never performs network operations of its own.
    """

    name = "local-sandbox"

    def __init__(
        self,
        scratch_root: Path | str | None = None,
        keep_scratch: bool = False,
    ):
        self.scratch_root = Path(scratch_root) if scratch_root else None
        self.keep_scratch = keep_scratch
        self.last_scratch: Path | None = None

    def _map_path(self, scratch: Path, workdir: Path, target: str) -> Path:
        pure = PurePosixPath(target)
        if pure.is_absolute():
            mapped = scratch / pure.relative_to("/")
        else:
            mapped = workdir / pure
        resolved = Path(mapped).resolve()
        if not str(resolved).startswith(str(scratch.resolve())):
            raise ValueError(f"path {target!r} escapes the sandbox")
        return resolved

    def build(
        self, dockerfile_text: str, context_dir: Path | str, timeout: float
    ) -> LogCapture:
        start = time.monotonic()
        deadline = start + timeout
        context = Path(context_dir).resolve()
        if self.scratch_root:
            self.scratch_root.mkdir(parents=True, exist_ok=True)
        scratch = Path(
            tempfile.mkdtemp(prefix="sandbox-", dir=self.scratch_root)
        ).resolve()
        self.last_scratch = scratch

        def norm(line: str) -> str:
            line = line.replace(str(scratch), "/sandbox")
            return _TIMING_RE.sub("(0.0s)", line)

        lines: list[str] = []
        status = ExitStatus.OK
        workdir = scratch
        env = {
            "PATH": "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin",
            "HOME": str(scratch),
            "LANG": "C",
            "LC_ALL": "C",
        }

        try:
            steps = _logical_lines(dockerfile_text)
            total = len(steps)
            for index, step in enumerate(steps, start=1):
                keyword, rest = _split_instruction(step)
                lines.append(norm(f"Step {index}/{total} : {step}"))
                try:
                    if keyword == "FROM":
                        lines.append(" ---> base image ignored by sandbox")
                    elif keyword == "ENV":
                        for key, value in self._parse_env(rest):
                            env[key] = value
                    elif keyword == "WORKDIR":
                        workdir = self._map_path(scratch, workdir, rest.strip())
                        workdir.mkdir(parents=True, exist_ok=True)
                    elif keyword == "COPY":
                        self._copy(context, scratch, workdir, rest, lines)
                    elif keyword == "RUN":
                        remaining = deadline - time.monotonic()
                        if remaining <= 0:
                            raise subprocess.TimeoutExpired(rest, timeout)
                        code = self._run(rest, workdir, env, remaining, lines, norm)
                        if code != 0:
                            lines.append(
                                norm(f"command exited with status {code}")
                            )
                            status = ExitStatus.ERROR
                            break
                    else:
                        lines.append(f" ---> {keyword} ignored by sandbox")
                except subprocess.TimeoutExpired:
                    lines.append("build timed out")
                    status = ExitStatus.TIMEOUT
                    break
                except (OSError, ValueError) as exc:
                    lines.append(norm(f"error: {exc}"))
                    status = ExitStatus.ERROR
                    break
        finally:
            if not self.keep_scratch:
                shutil.rmtree(scratch, ignore_errors=True)

        elapsed = time.monotonic() - start
        if status is ExitStatus.TIMEOUT:
            elapsed = max(elapsed, timeout)
        return LogCapture(tuple(lines), status, elapsed)

    @staticmethod
    def _parse_env(rest: str) -> list[tuple[str, str]]:
        if "=" in rest.split(None, 1)[0]:
            pairs = []
            for token in re.findall(r'(\w+)=("[^"]*"|\S+)', rest):
                pairs.append((token[0], token[1].strip('"')))
            return pairs
        key, _, value = rest.partition(" ")
        return [(key, value.strip())]

    def _copy(
        self,
        context: Path,
        scratch: Path,
        workdir: Path,
        rest: str,
        lines: list[str],
    ) -> None:
        tokens = [t for t in rest.split() if not t.startswith("--")]
        if len(tokens) < 2:
            raise ValueError(f"COPY needs a source and a destination: {rest!r}")
        sources, dest = tokens[:-1], tokens[-1]
        dest_path = self._map_path(scratch, workdir, dest)
        for source in sources:
            if source in (".", "./"):
                matches = [context]
            elif "*" in source or "?" in source:
                matches = sorted(context.glob(source))
            else:
                matches = [context / source]
            for match in matches:
                resolved = match.resolve()
                if not str(resolved).startswith(str(context)):
                    raise ValueError(f"COPY source {source!r} escapes the context")
                if not resolved.exists():
                    raise ValueError(f"COPY source {source!r} not found")
                if resolved.is_dir():
                    shutil.copytree(
                        resolved,
                        dest_path,
                        dirs_exist_ok=True,
                        ignore=shutil.ignore_patterns(".git"),
                    )
                else:
                    dest_path.mkdir(parents=True, exist_ok=True) if dest.endswith(
                        "/"
                    ) else dest_path.parent.mkdir(parents=True, exist_ok=True)
                    target = (
                        dest_path / resolved.name
                        if dest_path.is_dir()
                        else dest_path
                    )
                    shutil.copy2(resolved, target)

    @staticmethod
    def _run(
        command: str,
        workdir: Path,
        env: dict[str, str],
        timeout: float,
        lines: list[str],
        norm,
    ) -> int:
        # Exec-form RUN ["sh", "-c", ...] is accepted for completeness.
        if command.strip().startswith("["):
            try:
                argv = json.loads(command)
            except ValueError:
                argv = ["/bin/sh", "-c", command]
            proc_args: list[str] | str = argv
            shell = False
        else:
            proc_args = command
            shell = True
        completed = subprocess.run(
            proc_args,
            shell=shell,
            cwd=workdir,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            timeout=timeout,
        )
        for out_line in completed.stdout.splitlines():
            lines.append(norm(out_line))
        return completed.returncode


class ContainerBackend:
    """Build images through a container engine's HTTP API.

    `engine` is either ``unix:///path/to/socket`` (default: the Docker
    socket) or an ``http://host:port`` TCP endpoint.  The build context is
    streamed as a tar; the script travels inside it under a private name so
    a Dockerfile already in the repo is left alone.  Images built for a run
    are deleted after a successful build unless `keep_images` is set.
    """

    name = "container"

    DOCKERFILE_NAME = "Dockerfile.buildloop"

    def __init__(
        self,
        engine: str = "unix:///var/run/docker.sock",
        keep_images: bool = False,
        connect_timeout: float = 10.0,
    ):
        self.engine = engine
        self.keep_images = keep_images
        if engine.startswith("unix://"):
            transport = httpx.HTTPTransport(uds=engine[len("unix://"):])
            self._client = httpx.Client(
                transport=transport,
                base_url="http://engine",
                timeout=connect_timeout,
            )
        else:
            self._client = httpx.Client(base_url=engine, timeout=connect_timeout)

    def ping(self) -> bool:
        try:
            return self._client.get("/_ping").status_code == 200
        except httpx.HTTPError:
            return False

    def _context_tar(self, dockerfile_text: str, context_dir: Path) -> io.BytesIO:
        buffer = io.BytesIO()
        with tarfile.open(fileobj=buffer, mode="w") as tar:
            payload = dockerfile_text.encode("utf-8")
            info = tarfile.TarInfo(self.DOCKERFILE_NAME)
            info.size = len(payload)
            tar.addfile(info, io.BytesIO(payload))
            for path in sorted(context_dir.rglob("*")):
                rel = path.relative_to(context_dir)
                if ".git" in rel.parts:
                    continue
                tar.add(path, arcname=str(rel), recursive=False)
        buffer.seek(0)
        return buffer

    def build(
        self, dockerfile_text: str, context_dir: Path | str, timeout: float
    ) -> LogCapture:
        if not self.ping():
            raise BackendUnavailableError(
                f"container engine unreachable at {self.engine}"
            )
        start = time.monotonic()
        deadline = start + timeout
        tag = f"buildloop-{uuid.uuid4().hex[:8]}"
        tar_stream = self._context_tar(dockerfile_text, Path(context_dir))

        lines: list[str] = []
        status = ExitStatus.OK
        try:
            with self._client.stream(
                "POST",
                "/build",
                params={
                    "t": tag,
                    "dockerfile": self.DOCKERFILE_NAME,
                    "rm": "1",
                    "forcerm": "1",
                },
                content=tar_stream.read(),
                headers={"Content-Type": "application/x-tar"},
                timeout=httpx.Timeout(timeout, connect=10.0),
            ) as response:
                if response.status_code != 200:
                    raise BackendUnavailableError(
                        f"engine rejected the build: {response.status_code}"
                    )
                for raw in response.iter_lines():
                    if time.monotonic() > deadline:
                        lines.append("build timed out")
                        status = ExitStatus.TIMEOUT
                        break
                    if not raw:
                        continue
                    try:
                        event = json.loads(raw)
                    except ValueError:
                        lines.append(raw)
                        continue
                    if "stream" in event:
                        lines.extend(
                            l for l in event["stream"].splitlines() if l.strip()
                        )
                    elif "error" in event:
                        lines.append(event["error"])
                        status = ExitStatus.ERROR
        except httpx.TimeoutException:
            lines.append("build timed out")
            status = ExitStatus.TIMEOUT
        except httpx.HTTPError as exc:
            raise BackendUnavailableError(f"engine connection lost: {exc}") from exc

        if status is ExitStatus.OK and not self.keep_images:
            try:
                self._client.delete(f"/images/{tag}", params={"force": "true"})
            except httpx.HTTPError:
                logger.warning("could not prune image %s", tag)

        elapsed = time.monotonic() - start
        if status is ExitStatus.TIMEOUT:
            elapsed = max(elapsed, timeout)
        return LogCapture(tuple(lines), status, elapsed)


def make_backend(
    name: str,
    engine: str = "unix:///var/run/docker.sock",
    keep_images: bool = False,
) -> LocalSandboxBackend | ContainerBackend:
    if name == "local-sandbox":
        return LocalSandboxBackend()
    if name == "container":
        return ContainerBackend(engine=engine, keep_images=keep_images)
    raise ValueError(f"unknown backend {name!r}")
