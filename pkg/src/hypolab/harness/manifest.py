"""Run manifests: digests of every output file plus run provenance."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(slots=True)
class RunManifest:
    tool: str
    version: str
    command: str
    config_hash: str
    seed: int
    workers: int
    wall_time_s: float
    outputs: list  # [{"file": name, "sha256": digest, "claim": text}]

    def to_json(self) -> str:
        return json.dumps(
            {
                "tool": self.tool,
                "version": self.version,
                "command": self.command,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "workers": self.workers,
                "wall_time_s": self.wall_time_s,
                "outputs": self.outputs,
            },
            sort_keys=True,
            indent=2,
        )

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
        return path
