"""
Utility functions for deferloop
"""

import os
import zlib
from typing import Any, Dict, Optional

import numpy as np
from dotenv import load_dotenv

from deferloop.exceptions import ConfigError

STREAM_NAMES = (
    "data",
    "split",
    "experts",
    "deferrer-init",
    "classifier-init",
    "committee",
    "dsim",
    "evaluation",
    "probes",
)


def load_settings_from_env() -> Dict[str, Any]:
    """
    Load run overrides from environment variables (and a ``.env`` file).

    Returns:
        Dict with any of ``seed``, ``out_dir`` and ``workers`` that are set

    Raises:
        ConfigError: If a numeric variable does not parse
    """
    load_dotenv()

    settings: Dict[str, Any] = {}

    seed = os.getenv("DEFERLOOP_SEED")
    if seed:
        settings["seed"] = _parse_int("DEFERLOOP_SEED", seed)

    out_dir = os.getenv("DEFERLOOP_OUT_DIR")
    if out_dir:
        settings["out_dir"] = out_dir

    workers = os.getenv("DEFERLOOP_WORKERS")
    if workers:
        settings["workers"] = _parse_int("DEFERLOOP_WORKERS", workers)

    return settings


def _parse_int(name: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got '{value}'") from None


class SeedStreams:
    """
    Named, independent random streams derived from one global seed.

    Each name maps to a fixed spawn key, so adding draws to one component
    never shifts the numbers another component sees.

    Args:
        seed: Global seed
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {seed}")
        self.seed = int(seed)

    def seed_sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(_name_key(name),))

    def generator(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(name))

    def int_seed(self, name: str) -> int:
        """A 31-bit integer seed for libraries that want one (scikit-learn)."""
        return int(self.seed_sequence(name).generate_state(1)[0] & 0x7FFFFFFF)

    def child(self, *keys: int) -> "SeedStreams":
        """Fresh global seed for a sweep grid point / repetition."""
        state = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        return SeedStreams(int(state.generate_state(1, dtype=np.uint64)[0] >> 1))


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def resolve_seed(explicit: Optional[int], configured: int) -> int:
    """Precedence: command line, then ``DEFERLOOP_SEED``, then the config file."""
    if explicit is not None:
        return explicit
    return load_settings_from_env().get("seed", configured)
