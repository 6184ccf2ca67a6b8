"""Run manifests: a hashed record of what a command read, wrote, and ran with.

Every CLI command writes ``run_manifest.json`` next to its outputs. The
manifest captures the command line, the resolved config snapshot, the seeds,
SHA-256 hashes of all input and output artifacts, the package version, and
wall time. Timestamps live only here — all other artifacts are byte-identical
across reruns with the same inputs, config, and seed.
"""
from __future__ import annotations

import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .fileio import atomic_write


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root) -> dict:
    """Relative path -> SHA-256 for every regular file under ``root``."""
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    return {p.relative_to(root).as_posix(): sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file()}


def _sanitize(obj):
    """Make a structure strict-JSON safe (non-finite floats become strings)."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


class RunManifest:
    """Accumulates run provenance, then serializes it deterministically."""

    def __init__(self, command: str, argv: list, config: dict, seeds: dict):
        self.command = command
        self.argv = list(argv)
        self.config = config
        self.seeds = dict(seeds)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.wall_time_s: float = 0.0
        self.created_utc = datetime.now(timezone.utc).isoformat()

    def add_input(self, label: str, path) -> None:
        path = Path(path)
        if path.is_dir():
            for rel, digest in hash_tree(path).items():
                self.inputs[f"{label}/{rel}"] = digest
        else:
            self.inputs[label] = sha256_file(path)

    def add_output(self, path, root=None) -> None:
        path = Path(path)
        key = path.relative_to(root).as_posix() if root else path.name
        self.outputs[key] = sha256_file(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": _sanitize(self.config),
            "seeds": self.seeds,
            "input_hashes": dict(sorted(self.inputs.items())),
            "output_hashes": dict(sorted(self.outputs.items())),
            "code_version": __version__,
            "wall_time_s": self.wall_time_s,
            "created_utc": self.created_utc,
        }

    def write(self, path) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        with atomic_write(path) as fh:
            fh.write(text)
