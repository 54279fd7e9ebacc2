"""
Run manifests: what produced an output directory.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

MANIFEST_NAME = "manifest.json"


def config_hash(config: Dict[str, Any]) -> str:
    """Stable hash of a config dict (key order does not matter)"""
    key_str = json.dumps(config, sort_keys=True, default=str)
    return hashlib.md5(key_str.encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Provenance record written before any result file.

    Args:
        command: CLI command that produced the outputs
        config_hash: Hash of the resolved config
        seed: Global seed in effect
        version: Package version
        started_at: UTC start time
        finished_at: UTC finish time, empty until the run completes
        outputs: Artifact name -> path
    """

    command: str
    config_hash: str
    seed: int
    version: str
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, config: Dict[str, Any], seed: int) -> "RunManifest":
        from deferloop import __version__

        return cls(command=command, config_hash=config_hash(config), seed=seed, version=__version__)

    def add_output(self, name: str, path: Union[str, Path]) -> None:
        self.outputs[name] = str(path)

    def finish(self) -> None:
        self.finished_at = _now()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Write (or rewrite) ``manifest.json`` in ``out_dir``."""
        path = Path(out_dir) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path
