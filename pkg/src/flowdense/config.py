"""Runtime settings loaded from FLOWDENSE_* environment variables."""

import logging

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings.

    threads caps how many variant fits of a reproduction run concurrently;
    numerical kernels themselves stay vectorised.
    """

    model_config = SettingsConfigDict(env_prefix="FLOWDENSE_")

    threads: int = 1
    log_level: str = "WARNING"

    @field_validator("threads")
    @classmethod
    def must_be_positive(cls, v: int) -> int:
        """Reject zero or negative thread caps."""
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("log_level")
    @classmethod
    def must_be_known_level(cls, v: str) -> str:
        """Accept only names the logging module knows."""
        level = v.strip().upper()
        if level not in logging.getLevelNamesMapping():
            raise ValueError(f"unknown log level {v!r}")
        return level


def configure_logging(settings: Settings) -> None:
    """Install a stderr handler on the root logger at the configured level."""
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
