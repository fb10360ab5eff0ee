"""Run manifests: every CLI command materializes its resolved configuration
into a manifest written next to its outputs, so any run can be reproduced
bit-for-bit (sampling included) from the manifest alone.  Manifests contain
no timestamps or host details on purpose.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    checkpoint_hash: str | None = None
    output_paths: list[str] = field(default_factory=list)
    tool_version: str = __version__

    def to_json(self) -> str:
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "checkpoint_hash": self.checkpoint_hash,
            "output_paths": self.output_paths,
            "tool_version": self.tool_version,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def load_manifest(path: str | Path) -> RunManifest:
    data = json.loads(Path(path).read_text())
    return RunManifest(
        command=data["command"],
        config=data["config"],
        seed=data.get("seed"),
        checkpoint_hash=data.get("checkpoint_hash"),
        output_paths=data.get("output_paths", []),
        tool_version=data.get("tool_version", __version__),
    )
