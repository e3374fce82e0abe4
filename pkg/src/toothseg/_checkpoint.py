"""Single-file checkpoints: named parameter tensors plus the model config."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

FORMAT_VERSION = 1


def save_checkpoint(model: torch.nn.Module, kind: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": asdict(model.cfg),
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path, kind: str) -> tuple[dict, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("kind") != kind:
        raise ValueError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload["config"], payload["state"]


def tuplify(d: dict) -> dict:
    """JSON/torch round trips turn tuples into lists; undo that for config dataclasses."""
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
