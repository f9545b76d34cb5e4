"""Example experiment configs shipped with the package."""

from __future__ import annotations

import json
from pathlib import Path

HERE = Path(__file__).parent


def shipped_configs() -> dict[str, str]:
    """Name -> one-line description of every shipped config."""
    out = {}
    for path in sorted(HERE.glob("*.json")):
        out[path.stem] = json.loads(path.read_text()).get("description", "")
    return out


def config_path(name: str) -> Path:
    return HERE / f"{name}.json"
