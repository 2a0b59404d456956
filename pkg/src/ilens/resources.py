"""Paths to the bundled toy scorer weights, scenes and bounding boxes."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

TOY_SCENES = 3


def data_dir() -> Path:
    return Path(str(resources.files("ilens") / "data"))


def toy_weights() -> Path:
    return data_dir() / "toy_shapes.ilens"


def toy_scene_path(k: int = 0) -> Path:
    if not 0 <= k < TOY_SCENES:
        raise IndexError(f"bundled scenes are numbered 0..{TOY_SCENES - 1}")
    return data_dir() / f"toy_scene_{k}.png"


def toy_boxes() -> Path:
    return data_dir() / "toy_boxes.txt"
