"""Self-describing checkpoint container: format version, config echo, states."""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, states: dict, extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "states": states,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')}")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ValueError(f"expected {expected_kind} checkpoint, found {payload.get('kind')}")
    return payload
