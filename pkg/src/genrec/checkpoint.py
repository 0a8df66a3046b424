"""Versioned checkpoint files carrying a shape header next to the tensors."""
from __future__ import annotations

from pathlib import Path

import torch

FORMAT = "genrec-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, state: dict, meta: dict | None = None) -> None:
    shapes = {k: list(v.shape) for k, v in state.items() if isinstance(v, torch.Tensor)}
    torch.save(
        {"format": FORMAT, "version": VERSION, "kind": kind, "shapes": shapes, "state": state, "meta": meta or {}},
        path,
    )


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if blob["version"] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob['version']}")
    if blob["kind"] != kind:
        raise CheckpointError(f"{path}: holds {blob['kind']!r}, expected {kind!r}")
    for name, shape in blob["shapes"].items():
        if list(blob["state"][name].shape) != shape:
            raise CheckpointError(f"{path}: tensor {name} shape mismatch with header")
    return blob["state"], blob["meta"]
