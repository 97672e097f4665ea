"""Binary PGM (P5) rendering of 2-D maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_pixels(values: np.ndarray, style: str = "grayscale") -> np.ndarray:
    """Map a 2-D array to uint8.

    grayscale: min-max scaled to [0, 255]. signed: 128 + 127 * v / max|v|, so
    zero sits at mid-gray. A constant map renders as uniform 128.
    """
    v = np.asarray(values, np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise ValueError(f"render_map needs a 2-D map, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("map contains non-finite values")
    if style == "grayscale":
        lo, hi = v.min(), v.max()
        if hi == lo:
            return np.full(v.shape, 128, np.uint8)
        return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    if style == "signed":
        m = np.abs(v).max()
        if m == 0 or v.min() == v.max():
            return np.full(v.shape, 128, np.uint8)
        return np.rint(128.0 + 127.0 * v / m).astype(np.uint8)
    raise ValueError(f"unknown render style {style!r}")


def render_map(values: np.ndarray, path, style: str = "grayscale", comment: str | None = None) -> bytes:
    """Write a binary PGM; ``comment`` (one line of ASCII) goes in the header."""
    px = to_pixels(values, style)
    h, w = px.shape
    head = "P5\n"
    if comment:
        if "\n" in comment or not comment.isascii():
            raise ValueError("PGM comment must be a single ASCII line")
        head += f"# {comment}\n"
    data = f"{head}{w} {h}\n255\n".encode("ascii") + px.tobytes()
    Path(path).write_bytes(data)
    return data
