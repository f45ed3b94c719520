"""
Configuration settings for the PECI-Net toolkit.
Environment defaults come from .env; training runs are described by JSON run configs.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigInvalid, MissingFile
from trainer import TrainConfig

# Load environment variables from .env file
load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class Config:
    """Process-wide settings read from the environment."""

    output_root: str = field(default_factory=lambda: os.getenv("PECINET_OUTPUT_ROOT", "runs"))
    log_level: str = field(default_factory=lambda: os.getenv("PECINET_LOG_LEVEL", "INFO").upper())
    workers: int = field(default_factory=lambda: os.getenv("PECINET_WORKERS", "4"))
    log_file: str = "pecinet.log"

    def __post_init__(self):
        if self.log_level not in LOG_LEVELS:
            raise ConfigInvalid(f"PECINET_LOG_LEVEL must be one of {LOG_LEVELS}, got {self.log_level}")
        try:
            self.workers = int(self.workers)
        except (TypeError, ValueError):
            raise ConfigInvalid(f"PECINET_WORKERS must be an integer, got {self.workers!r}") from None
        if self.workers < 1:
            raise ConfigInvalid(f"PECINET_WORKERS must be >= 1, got {self.workers}")

        # Create the output root if it doesn't exist
        os.makedirs(self.output_root, exist_ok=True)

    @property
    def log_path(self) -> str:
        return os.path.join(self.output_root, self.log_file)

    @property
    def level(self) -> int:
        return getattr(logging, self.log_level)


def _merge(base: dict, overrides: dict) -> dict:
    """Recursively overlay `overrides` on `base`; None values leave the base untouched."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a JSON run config (or start from defaults) and apply flag overrides, which win."""
    data = TrainConfig().to_dict()
    if path:
        if not os.path.exists(path):
            raise MissingFile(f"Run config not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                from_file = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigInvalid(f"{path} is not valid JSON: {e}") from e
        if not isinstance(from_file, dict):
            raise ConfigInvalid(f"{path} must hold a JSON object")
        data = _merge(data, from_file)
    if overrides:
        data = _merge(data, overrides)
    return TrainConfig.from_dict(data)


def save_run_config(config: TrainConfig, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
