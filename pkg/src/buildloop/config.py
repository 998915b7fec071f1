"""Config file handling and the model rate table.

Settings resolve in a fixed order: CLI flag beats config file beats
built-in default.  Config files are JSON with keys mirroring AgentConfig;
API credentials are environment-only and have no config key on purpose.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .gateway import RateCard
from .orchestrator import AgentConfig

DEFAULT_API_BASE = "https://api.openai.com/v1"

# Dollars per million tokens.  Extend via the "rates" config key.
RATE_TABLE: dict[str, RateCard] = {
    "gpt-4o": RateCard(5.00, 15.00),
    "gpt-4o-mini": RateCard(0.15, 0.60),
    "gpt-4-turbo": RateCard(10.00, 30.00),
}

CONFIG_KEYS = (
    "model",
    "max_steps",
    "time_limit",
    "backend",
    "engine",
    "token_budget",
    "artifact_dir",
    "base_image",
    "keep_images",
    "catalog",
    "api_base",
)


def load_config_file(path: Path | str) -> dict[str, Any]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(raw) - set(CONFIG_KEYS) - {"rates"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return raw


def rates_for(model: str, overrides: dict[str, Any] | None = None) -> RateCard:
    if overrides and model in overrides:
        entry = overrides[model]
        return RateCard(
            float(entry.get("input_per_million", 0.0)),
            float(entry.get("output_per_million", 0.0)),
        )
    return RATE_TABLE.get(model, RateCard())


def resolve_config(
    flags: dict[str, Any], file_values: dict[str, Any] | None = None
) -> tuple[AgentConfig, str]:
    """Merge flag > file > default into an AgentConfig plus the API base.

    `flags` uses None for "not given"; file values apply only where no flag
    was passed.
    """
    file_values = dict(file_values or {})
    rate_overrides = file_values.pop("rates", None)

    def pick(flag_key: str, file_key: str, default: Any) -> Any:
        if flags.get(flag_key) is not None:
            return flags[flag_key]
        if file_values.get(file_key) is not None:
            return file_values[file_key]
        return default

    defaults = AgentConfig()
    model = pick("model", "model", defaults.model)
    config = AgentConfig(
        model=model,
        max_steps=int(pick("max_steps", "max_steps", defaults.max_steps)),
        wall_clock_limit=float(
            pick("time_limit", "time_limit", defaults.wall_clock_limit)
        ),
        backend=pick("backend", "backend", defaults.backend),
        engine=pick("engine", "engine", defaults.engine),
        token_budget=int(
            pick("token_budget", "token_budget", defaults.token_budget)
        ),
        artifact_dir=Path(
            pick("artifact_dir", "artifact_dir", defaults.artifact_dir)
        ),
        base_image=pick("base_image", "base_image", defaults.base_image),
        keep_images=bool(
            pick("keep_images", "keep_images", defaults.keep_images)
        ),
        catalog_path=(
            Path(picked) if (picked := pick("catalog", "catalog", None)) else None
        ),
        rates=rates_for(model, rate_overrides),
    )
    api_base = pick("api_base", "api_base", DEFAULT_API_BASE)
    return config, api_base
