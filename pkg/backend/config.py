import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional

from dotenv import load_dotenv

# Load environment variables from .env file in parent directory
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(dotenv_path=env_path)


@dataclass
class Config:
    """Process-wide defaults for the recognition engine"""

    # Debug settings
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"

    # Reproducibility
    SEED: int = int(os.getenv("SEED", "0"))

    # Model input
    INPUT_HEIGHT: int = int(os.getenv("INPUT_HEIGHT", "64"))
    INPUT_WIDTH: int = int(os.getenv("INPUT_WIDTH", "64"))
    SEQUENCE_LENGTH: int = 16  # Frames per classification window

    # Architecture
    ATTENTION_HIDDEN: int = 128  # Shared MLP width in every attention block
    GRU_HIDDEN: int = 32  # Units per GRU layer and direction
    GRU_LAYERS: int = 3

    # Training
    LEARNING_RATE: float = float(os.getenv("LEARNING_RATE", "0.0001"))
    BATCH_SIZE: int = int(os.getenv("BATCH_SIZE", "16"))
    EPOCHS: int = int(os.getenv("EPOCHS", "200"))  # Desk-scale default
    TRAIN_FRACTION: float = 0.7
    DTYPE: str = os.getenv("DTYPE", "float32")

    # Benchmarking
    BENCH_WARMUP: int = 50
    BENCH_TIMED: int = 500
    THREADS: int = int(os.getenv("THREADS", str(os.cpu_count() or 1)))


config = Config()


def debug_print(*args, **kwargs):
    """Print only if DEBUG mode is enabled"""
    if config.DEBUG:
        print(*args, **kwargs)


class ConfigFileError(ValueError):
    """Raised for malformed `key = value` config files"""


def _normalise_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def load_config_file(path: str) -> Dict[str, str]:
    """
    Parse a `key = value` config file.

    Blank lines and lines starting with `#` are skipped; trailing `#`
    comments are stripped. Keys are lower-cased with dashes mapped to
    underscores so they line up with command-line flag names.
    """
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as file:
        for line_number, raw in enumerate(file, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(
                    f"{path}:{line_number}: expected 'key = value', got {raw.strip()!r}"
                )
            key, value = line.split("=", 1)
            key = _normalise_key(key)
            if not key:
                raise ConfigFileError(f"{path}:{line_number}: empty key")
            values[key] = value.strip()

    debug_print(f"[CLI] Loaded {len(values)} settings from {path}")
    return values


def parse_bool(value: Any) -> bool:
    """Interpret config-file style booleans"""
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigFileError(f"not a boolean: {value!r}")


def resolve_settings(
    defaults: Mapping[str, Any],
    file_values: Optional[Mapping[str, str]],
    cli_values: Mapping[str, Any],
    converters: Mapping[str, Callable[[Any], Any]],
) -> Dict[str, Any]:
    """
    Merge settings with precedence CLI flag > config file > default.

    `cli_values` entries that are None count as "not given". Config file
    values are strings and go through the matching converter; keys the
    command does not know are ignored.
    """
    resolved = dict(defaults)
    for key, raw in (file_values or {}).items():
        if key not in converters:
            debug_print(f"[CLI] Ignoring unknown config key '{key}'")
            continue
        try:
            resolved[key] = converters[key](raw)
        except (TypeError, ValueError) as e:
            raise ConfigFileError(f"bad value for '{key}': {raw!r} ({e})") from e

    for key, value in cli_values.items():
        if value is not None:
            resolved[key] = value
    return resolved
