"""
Process-wide configuration via environment variables.
Uses pydantic-settings for validation and type coercion.
"""

from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """All configuration loaded from PERISCOPE_* environment variables."""

    # ── Reproducibility ───────────────────────────────────────
    SEED: Optional[int] = None          # global fallback when no --seed / config seed

    # ── Logging ───────────────────────────────────────────────
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True

    # ── Rendering ─────────────────────────────────────────────
    DEFAULT_RESOLUTION: int = 256

    # ── Server ────────────────────────────────────────────────
    HOST: str = "127.0.0.1"
    PORT: int = 8000

    model_config = SettingsConfigDict(
        env_prefix="PERISCOPE_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()
