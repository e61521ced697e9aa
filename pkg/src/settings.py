from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class FedSupSettings(BaseSettings):
    """Process-level settings read from FEDSUP_* environment variables (or .env)"""
    model_config = SettingsConfigDict(env_prefix="FEDSUP_", extra="ignore")

    out: str = "runs"
    log_level: str = "INFO"
    presets_path: str = "data/presets.json"
    cache_path: Optional[str] = None


def get_settings() -> FedSupSettings:
    return FedSupSettings()
