"""Command-line entry points.

Exit codes: 0 build success, 1 build failure, 2 fatal or configuration
error.  API credentials come from BUILDLOOP_API_KEY or OPENAI_API_KEY;
there is deliberately no flag and no config key for them.
"""

from __future__ import annotations

import json
import logging
import shutil
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from .backends import make_backend
from .catalog import load_catalog
from .config import load_config_file, resolve_config
from .errors import AgentError
from .gateway import (
    HttpChatTransport,
    RecordingTransport,
    ReplayTransport,
    Transport,
)
from .orchestrator import AgentConfig, Outcome, run_project
from . import baseline as baseline_mod

logger = logging.getLogger(__name__)

EXIT_SUCCESS = 0
EXIT_BUILD_FAILURE = 1
EXIT_FATAL = 2


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _acquire_source(source: str, commit: str | None, workspace: Path) -> Path:
    """Local paths are used in place; URLs (or any source with a pinned
    commit) are cloned into the workspace and checked out."""
    local = Path(source)
    if local.is_dir() and commit is None:
        return local
    if local.is_dir():
        clone_src = str(local)
    elif "://" in source or source.endswith(".git") or source.count("/") == 1:
        clone_src = source
    else:
        raise AgentError(f"source not found: {source}", code="source-unavailable")
    dest = workspace / (Path(clone_src.rstrip("/")).name.removesuffix(".git") or "project")
    try:
        subprocess.run(
            ["git", "clone", "--quiet", clone_src, str(dest)],
            check=True,
            capture_output=True,
            text=True,
        )
        if commit:
            subprocess.run(
                ["git", "-C", str(dest), "checkout", "--quiet", commit],
                check=True,
                capture_output=True,
                text=True,
            )
    except subprocess.CalledProcessError as exc:
        raise AgentError(
            f"clone failed: {exc.stderr.strip()}", code="source-unavailable"
        ) from exc
    return dest


def _make_transport(
    mode: str, transcript: str | None, api_base: str
) -> Transport:
    if mode == "replay":
        if not transcript:
            raise AgentError(
                "replay mode requires --transcript", code="config-error"
            )
        return ReplayTransport(transcript)
    live = HttpChatTransport(api_base=api_base)
    if not live.has_credentials:
        raise AgentError(
            "no API credentials; set BUILDLOOP_API_KEY or OPENAI_API_KEY",
            code="config-error",
        )
    if transcript:
        return RecordingTransport(live, transcript)
    return live


def _outcome_exit_code(outcome: Outcome) -> int:
    if outcome is Outcome.SUCCESS:
        return EXIT_SUCCESS
    if outcome is Outcome.FATAL:
        return EXIT_FATAL
    return EXIT_BUILD_FAILURE


_build_options = [
    click.option("--source", required=True, help="Repo path or clone URL."),
    click.option("--commit", default=None, help="Commit to check out."),
    click.option("--config", "config_path", default=None, type=click.Path(exists=True)),
    click.option("--model", default=None),
    click.option("--max-steps", default=None, type=int),
    click.option("--time-limit", default=None, type=float, help="Seconds."),
    click.option(
        "--backend",
        default=None,
        type=click.Choice(["container", "local-sandbox"]),
    ),
    click.option("--artifact-dir", default=None, type=click.Path()),
    click.option("--catalog", default=None, type=click.Path(exists=True)),
    click.option("--keep-images", is_flag=True, default=None),
    click.option("-v", "--verbose", is_flag=True, default=False),
]


def _apply_options(options):
    def wrap(func):
        for option in reversed(options):
            func = option(func)
        return func

    return wrap


@click.group()
def main() -> None:
    """Agent that builds C/C++ repositories inside containers."""


@main.command()
@_apply_options(_build_options)
@click.option(
    "--mode",
    default="agent",
    type=click.Choice(["agent", "replay"]),
    help="agent: live model calls; replay: serve a recorded transcript.",
)
@click.option(
    "--transcript",
    default=None,
    type=click.Path(),
    help="Transcript path: recorded in agent mode, required for replay.",
)
def build(mode, transcript, source, commit, config_path, verbose, **flags) -> None:
    """Run the agent loop against one repository."""
    _setup_logging(verbose)
    try:
        file_values = load_config_file(config_path) if config_path else None
        config, api_base = resolve_config(flags, file_values)
        transport = _make_transport(mode, transcript, api_base)
        with tempfile.TemporaryDirectory(prefix="buildloop-src-") as workspace:
            repo = _acquire_source(source, commit, Path(workspace))
            report = run_project(repo, config, transport)
    except (AgentError, ValueError, OSError) as exc:
        click.echo(f"fatal: {exc}", err=True)
        sys.exit(EXIT_FATAL)
    click.echo(
        f"{report.project}: {report.outcome.value} "
        f"after {len(report.attempts)} attempt(s), ${report.usage.cost:.2f}"
    )
    sys.exit(_outcome_exit_code(report.outcome))


@main.command("baseline")
@_apply_options(_build_options)
def baseline_cmd(source, commit, config_path, verbose, **flags) -> None:
    """Run catalog default commands, no model involved."""
    _setup_logging(verbose)
    try:
        file_values = load_config_file(config_path) if config_path else None
        config, _ = resolve_config(flags, file_values)
        backend = make_backend(
            config.backend, engine=config.engine, keep_images=config.keep_images
        )
        catalog = load_catalog(config.catalog_path)
        with tempfile.TemporaryDirectory(prefix="buildloop-src-") as workspace:
            repo = _acquire_source(source, commit, Path(workspace))
            report = baseline_mod.run_defaults(
                repo,
                backend,
                config.wall_clock_limit,
                catalog,
                config.base_image,
                config.artifact_dir,
            )
    except (AgentError, ValueError, OSError) as exc:
        click.echo(f"fatal: {exc}", err=True)
        sys.exit(EXIT_FATAL)
    tried = ", ".join(a.system for a in report.attempts) or "nothing detected"
    click.echo(f"{report.project}: {report.outcome} (tried: {tried})")
    sys.exit(EXIT_SUCCESS if report.outcome == "success" else EXIT_BUILD_FAILURE)


def aggregate_reports(report_paths: list[Path]) -> dict:
    """Fold run reports into totals; corrupt reports are skipped."""
    totals = {
        "projects": 0,
        "successes": 0,
        "failures": 0,
        "input_tokens": 0,
        "output_tokens": 0,
        "total_cost": 0.0,
        "mean_duration": 0.0,
        "mean_cost_per_success": None,
        "taxonomy": {},
    }
    durations = []
    for path in report_paths:
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            outcome = raw["outcome"]
            usage = raw.get("usage", {})
        except (OSError, ValueError, KeyError) as exc:
            logger.warning("skipping unreadable report %s: %s", path, exc)
            continue
        totals["projects"] += 1
        if outcome == "success":
            totals["successes"] += 1
        else:
            totals["failures"] += 1
        totals["input_tokens"] += int(usage.get("input_tokens", 0))
        totals["output_tokens"] += int(usage.get("output_tokens", 0))
        totals["total_cost"] = round(
            totals["total_cost"] + float(usage.get("cost", 0.0)), 2
        )
        durations.append(float(raw.get("duration", 0.0)))
        for attempt in raw.get("attempts", []):
            taxonomy = attempt.get("taxonomy")
            if taxonomy:
                key = f"{taxonomy['category']}/{taxonomy['subcategory']}"
                totals["taxonomy"][key] = totals["taxonomy"].get(key, 0) + 1
    if durations:
        totals["mean_duration"] = round(sum(durations) / len(durations), 2)
    if totals["successes"]:
        totals["mean_cost_per_success"] = round(
            totals["total_cost"] / totals["successes"], 2
        )
    return totals


@main.command()
@click.argument("dirs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(), help="Where to write the aggregate record.")
def report(dirs, out) -> None:
    """Aggregate report.json files under the given artifact directories."""
    paths = []
    for directory in dirs:
        paths.extend(sorted(Path(directory).rglob("report.json")))
    totals = aggregate_reports(paths)
    click.echo(f"projects:   {totals['projects']}")
    click.echo(f"successes:  {totals['successes']}")
    click.echo(f"failures:   {totals['failures']}")
    click.echo(
        f"tokens:     {totals['input_tokens']} in / {totals['output_tokens']} out"
    )
    click.echo(f"total cost: ${totals['total_cost']:.2f}")
    if totals["mean_cost_per_success"] is not None:
        click.echo(f"mean cost per success: ${totals['mean_cost_per_success']:.2f}")
    click.echo(f"mean duration: {totals['mean_duration']:.2f}s")
    if totals["taxonomy"]:
        click.echo("error taxonomy:")
        for key, count in sorted(totals["taxonomy"].items()):
            click.echo(f"  {key}: {count}")
    out_path = Path(out) if out else Path("aggregate.json")
    out_path.write_text(
        json.dumps(totals, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(f"aggregate written to {out_path}")


@main.command()
@click.argument("list_file", type=click.Path(exists=True))
@click.option("--jobs", default=2, type=int, show_default=True)
@_apply_options(_build_options[2:])  # everything but --source/--commit
@click.option("--transcript-dir", default=None, type=click.Path())
def batch(list_file, jobs, config_path, verbose, transcript_dir, **flags) -> None:
    """Run the agent over a file of sources, one per line, in parallel.

    Parallelism is across projects only; each run keeps its own sessions
    and artifact directory.
    """
    _setup_logging(verbose)
    sources = [
        line.strip()
        for line in Path(list_file).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]
    try:
        file_values = load_config_file(config_path) if config_path else None
        config, api_base = resolve_config(flags, file_values)
        transport = _make_transport("agent", None, api_base)
    except AgentError as exc:
        click.echo(f"fatal: {exc}", err=True)
        sys.exit(EXIT_FATAL)

    def one(source: str) -> int:
        try:
            with tempfile.TemporaryDirectory(prefix="buildloop-src-") as workspace:
                repo = _acquire_source(source, None, Path(workspace))
                run_report = run_project(repo, config, transport)
            click.echo(f"{source}: {run_report.outcome.value}")
            return _outcome_exit_code(run_report.outcome)
        except (AgentError, ValueError, OSError) as exc:
            click.echo(f"{source}: fatal: {exc}", err=True)
            return EXIT_FATAL

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        codes = list(pool.map(one, sources))
    sys.exit(max(codes) if codes else EXIT_SUCCESS)


if __name__ == "__main__":
    main()
