"""Run manifest written into every output directory: command, resolved
config, seeds, input hashes, and the produced files."""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

TOOL_VERSION = "0.1.0"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def write_run_manifest(
    out_dir,
    command: str,
    config: dict,
    master_seed: int,
    input_hashes: dict[str, str],
    outputs: list[str],
    started: str,
) -> dict:
    manifest = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "master_seed": master_seed,
        "input_hashes": input_hashes,
        "outputs": sorted(outputs),
        "started_utc": started,
        "finished_utc": utc_now(),
    }
    (Path(out_dir) / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_run_manifest(out_dir) -> dict | None:
    path = Path(out_dir) / "run_manifest.json"
    if not path.exists():
        return None
    manifest = json.loads(path.read_text())
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise ValueError(f"run manifest at {path} has a stale config hash")
    return manifest


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
