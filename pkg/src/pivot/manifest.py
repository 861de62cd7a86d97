"""Run manifests: every artifact directory records the command, the fully
resolved configuration, the seed, input/output paths, and artifact checksums,
enough to re-run the command bit-identically."""

from __future__ import annotations

import datetime
import hashlib
import json
import os


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checksum_artifacts(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in os.walk(p):
                for f in sorted(files):
                    full = os.path.join(root, f)
                    out[os.path.relpath(full, os.path.dirname(p) or ".")] = file_sha256(full)
        else:
            out[os.path.basename(p)] = file_sha256(p)
    return out


def write_manifest(directory, command: str, config: dict, seed,
                   inputs: list, outputs: list, extra: dict | None = None,
                   name: str = "run_manifest.json") -> str:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifact_checksums": checksum_artifacts(outputs),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_manifest(directory, name: str = "run_manifest.json") -> dict:
    with open(os.path.join(directory, name)) as fh:
        return json.load(fh)
