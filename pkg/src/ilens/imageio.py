"""8-bit image files: PNG through Pillow, binary PPM (P6) without dependencies."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadInputError

try:
    from PIL import Image
except ImportError:  # pragma: no cover - Pillow is optional
    Image = None

SUFFIXES = (".png", ".ppm")


def to_uint8(pixels) -> np.ndarray:
    return np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, pixels):
    data = to_uint8(pixels)
    H, W, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(raw: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise BadInputError(f"{path}: only binary P6 PPM is supported")
    try:
        (w, h, maxval), start = _ppm_tokens(raw, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError):
        raise BadInputError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise BadInputError(f"{path}: only 8-bit PPM is supported")
    body = np.frombuffer(raw[start:start + w * h * 3], dtype=np.uint8)
    if body.size != w * h * 3:
        raise BadInputError(f"{path}: truncated PPM data")
    return body.reshape(h, w, 3).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Load an RGB image as float64 in [0, 1], shape (H, W, 3)."""
    path = Path(path)
    if not path.is_file():
        raise BadInputError(f"image not found: {path}")
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    if Image is None:
        raise BadInputError("reading PNG needs Pillow; use PPM instead")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise BadInputError(f"cannot decode {path}: {exc}") from None
    return arr.astype(np.float64) / 255.0


def write_image(path, pixels):
    path = Path(path)
    if path.suffix.lower() == ".ppm" or Image is None:
        write_ppm(path.with_suffix(".ppm"), pixels)
        return
    Image.fromarray(to_uint8(pixels), "RGB").save(path, format="PNG")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise BadInputError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUFFIXES)
