"""
Runtime configuration and logging setup.

Values come from the environment (optionally a .env file) with the BLELAB_
prefix. Scenario files never read the environment; they carry their own
seed and parameters so runs stay reproducible.
"""
import logging
import os
import sys
from functools import lru_cache
from pathlib import Path
from typing import Literal

import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

# Load env vars from .env file (if present)
load_dotenv()

REPO_DIR = Path(__file__).resolve().parent

# logging.getLevelNamesMapping() only exists on Python 3.11+; same mapping on 3.10.
_level_names_mapping = getattr(logging, "getLevelNamesMapping", lambda: dict(logging._nameToLevel))


class Settings(BaseModel):
    """Process-wide settings for the lab CLI and viewer."""
    assets_dir: Path = REPO_DIR / "assets"
    out_dir: Path = Path("runs")
    log_level: str = "WARNING"
    log_format: Literal["console", "json"] = "console"
    crack_budget: int = Field(default=1_000_000, ge=1)

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if level not in _level_names_mapping():
            raise ValueError(f"unknown log level '{value}'")
        return level

    @classmethod
    def from_env(cls) -> "Settings":
        """
        Builds settings from BLELAB_* environment variables, falling back to defaults.

        Returns:
            Settings: The validated settings.
        """
        env = {
            "assets_dir": os.getenv("BLELAB_ASSETS_DIR"),
            "out_dir": os.getenv("BLELAB_OUT_DIR"),
            "log_level": os.getenv("BLELAB_LOG_LEVEL"),
            "log_format": os.getenv("BLELAB_LOG_FORMAT"),
            "crack_budget": os.getenv("BLELAB_CRACK_BUDGET"),
        }
        return cls(**{key: value for key, value in env.items() if value})


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings.from_env()


def _stderr_logger(*args) -> structlog.PrintLogger:
    # sys.stderr is looked up per logger: pytest capture and streamlit swap it out
    return structlog.PrintLogger(sys.stderr)


def configure_logging(settings: Settings | None = None) -> None:
    """
    Installs the structlog pipeline used by every module.

    Log lines go to stderr so that dissector and report output on stdout
    can be piped untouched.

    Args:
        settings (Settings, optional): Source of level and format. Defaults to get_settings().
    """
    settings = settings or get_settings()
    renderer = (
        structlog.processors.JSONRenderer()
        if settings.log_format == "json"
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            _level_names_mapping()[settings.log_level]
        ),
        logger_factory=_stderr_logger,
        cache_logger_on_first_use=False,
    )
