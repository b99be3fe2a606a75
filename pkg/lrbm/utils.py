import os
import json
import hashlib
import logging
from typing import Any

import numpy as np

from . import config
from .errors import ConfigError

# Configure logging
logger = logging.getLogger(__name__)


def save_text_file(file_name: str, text: str) -> str:
    """Saves text to a file, creating the parent directory when needed.

    Args:
        file_name (str): Path where the file should be saved
        text (str): Content to write

    Returns:
        str: The path that was written
    """
    directory = os.path.dirname(file_name)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # newline="" keeps output byte-identical across platforms
    with open(file_name, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    logger.info(f"File saved to: {file_name}")
    return file_name


def to_json(payload: Any) -> str:
    """Serializes with sorted keys and repr-precision floats."""
    return json.dumps(payload, sort_keys=True, allow_nan=False) + "\n"


def save_json_file(file_name: str, payload: Any) -> str:
    return save_text_file(file_name, to_json(payload))


def load_json_file(file_name: str) -> Any:
    with open(file_name, "r", encoding="utf-8") as f:
        return json.load(f)


def config_hash(payload: dict) -> str:
    """Short stable hash of a configuration dictionary."""
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()[:16]


def derive_rng(master_seed: int, *offsets: int) -> np.random.Generator:
    """Returns a generator seeded from the master seed and fixed offsets.

    The same (master_seed, offsets) always yields the same stream and
    distinct offsets yield independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *[int(o) for o in offsets]]))


def thread_count() -> int:
    """Worker count, capped by the LRBM_THREADS environment variable."""
    raw = os.getenv(config.THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return config.DEFAULT_THREADS
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{config.THREADS_ENV_VAR} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{config.THREADS_ENV_VAR} must be >= 1, got {value}")
    return value
