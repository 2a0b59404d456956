"""Seeded synthetic images: the two-class shapes set and small toy scenes."""

from __future__ import annotations

import numpy as np

CIRCLE, SQUARE = 0, 1


LUMA = np.array([0.299, 0.587, 0.114])


def _contrasting_colors(rng):
    while True:
        bg, fg = rng.uniform(0.05, 0.95, size=(2, 3))
        if np.abs(bg - fg).sum() > 0.9 and abs((bg - fg) @ LUMA) > 0.25:
            return bg, fg


def draw_shape(size: int, kind: int, center, radius, fg, bg, noise=0.0, rng=None):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = center
    if kind == CIRCLE:
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    else:
        half = radius * 0.886  # same area as the circle
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    img = np.where(inside[..., None], fg, bg).astype(np.float64)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def shapes_dataset(count: int, size: int = 64, seed: int = 0, noise: float = 0.02):
    """Filled circles (label 0) vs squares (label 1), alternating, on plain backgrounds."""
    rng = np.random.default_rng(seed)
    images = np.empty((count, size, size, 3))
    labels = np.arange(count) % 2
    for k in range(count):
        radius = rng.uniform(0.18, 0.3) * size
        center = rng.uniform(radius + 1, size - radius - 1, size=2)
        bg, fg = _contrasting_colors(rng)
        images[k] = draw_shape(size, labels[k], center, radius, fg, bg, noise, rng)
    return images, labels


def toy_scene(seed: int = 0, size: int = 64) -> np.ndarray:
    """A coloured shape over a two-tone gradient background with mild texture."""
    rng = np.random.default_rng(seed)
    kind = int(rng.integers(2))
    radius = rng.uniform(0.2, 0.28) * size
    center = rng.uniform(radius + 2, size - radius - 2, size=2)
    bg, fg = _contrasting_colors(rng)
    bg2 = np.clip(bg + rng.uniform(-0.25, 0.25, size=3), 0.05, 0.95)
    ramp = np.linspace(0.0, 1.0, size)[:, None, None]
    background = (1 - ramp) * bg + ramp * bg2
    background = np.broadcast_to(background, (size, size, 3))
    shape = draw_shape(size, kind, center, radius, fg, bg)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    inside = np.all(shape == fg, axis=-1) if kind == 1 else d2 <= radius**2
    img = np.where(inside[..., None], shape, background)
    # bounded noise keeps every value strictly inside (0, 1), so no channel
    # is clipped and exact ties between channels do not occur
    return img + rng.uniform(-0.04, 0.04, size=img.shape)


def foreground_box(seed: int = 0, size: int = 64):
    """Bounding box (x0, y0, x1, y1) of the object drawn by ``toy_scene(seed)``."""
    rng = np.random.default_rng(seed)
    kind = int(rng.integers(2))
    radius = rng.uniform(0.2, 0.28) * size
    cy, cx = rng.uniform(radius + 2, size - radius - 2, size=2)
    half = radius if kind == CIRCLE else radius * 0.886
    return (int(np.floor(cx - half)), int(np.floor(cy - half)),
            int(np.ceil(cx + half)), int(np.ceil(cy + half)))
