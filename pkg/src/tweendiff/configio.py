"""Run-config loading, merging, and freezing.

Configs are nested YAML mappings. A file's keys are validated against the
command's default tree (unknown keys are a hard error, never silently
dropped), flag overrides win over file values, and the fully resolved merge
is written next to the run's outputs together with seed/code-state metadata.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from pathlib import Path

import yaml

from .errors import ConfigError


def load_config_file(path: str | Path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return data


def merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    """Deep-merge `override` into `defaults`; keys absent from the defaults
    are rejected. Lists replace wholesale."""
    out = dict(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = merge_config(defaults[key], value, where)
        else:
            out[key] = value
    return out


def apply_overrides(config: dict, sets: tuple[str, ...]) -> dict:
    """Apply --set dotted.path=value overrides (values parsed as YAML)."""
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = config
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[keys[-1]] = yaml.safe_load(raw)
    return config


def resolve_config(defaults: dict, config_file: str | None, sets: tuple[str, ...]) -> dict:
    config = dict(defaults)
    if config_file:
        config = merge_config(config, load_config_file(config_file))
    return apply_overrides(config, sets)


def code_state_hash() -> str:
    """Git commit of the working tree if available, else a hash of the
    package sources."""
    pkg_root = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=pkg_root,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    digest = hashlib.sha256()
    for src in sorted(pkg_root.glob("*.py")):
        digest.update(src.name.encode())
        digest.update(src.read_bytes())
    return "src:" + digest.hexdigest()[:16]


def freeze_run_config(out_dir: str | Path, command: str, config: dict, seed) -> Path:
    """Write resolved.yaml plus run_meta.json into the artifact directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    meta = {
        "command": command,
        "seed": seed,
        "code_state": code_state_hash(),
        "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out_dir / "resolved.yaml"
