"""Run manifests: everything needed to reproduce a run and find its outputs."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import __version__

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    input_image_sha256: str | None = None
    outputs: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    duration_s: float | None = None
    status: str = "running"
    toolkit_version: str = __version__
    manifest_version: int = MANIFEST_VERSION
    _start: float = field(default_factory=time.perf_counter, repr=False)

    def add_output(self, name: str, path: str | Path, root: str | Path) -> None:
        path = Path(path)
        self.outputs[name] = {
            "path": str(path.relative_to(root)) if path.is_relative_to(root) else str(path),
            "sha256": file_sha256(path) if path.is_file() else None,
        }

    def complete(self) -> None:
        self.duration_s = time.perf_counter() - self._start
        missing = [
            name
            for name in ("command", "config", "seeds", "backend", "outputs", "duration_s")
            if getattr(self, name) in (None, {}, "")
        ]
        if missing:
            raise ValueError(f"manifest fields not populated: {missing}")
        self.status = "complete"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("_start")
        return d

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
