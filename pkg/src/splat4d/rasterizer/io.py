"""Image output: 8-bit PNG and raw little-endian f32 with a text sidecar."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_raw(path, image: np.ndarray) -> None:
    """Write ``image`` (H, W, C) as raw f32 plus ``<path>.txt`` holding ``height width channels``."""
    path = Path(path)
    arr = np.ascontiguousarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    path.write_bytes(arr.tobytes())
    h, w, c = arr.shape
    Path(str(path) + ".txt").write_text(f"height {h}\nwidth {w}\nchannels {c}\ndtype float32-le\n")


def read_raw(path) -> np.ndarray:
    path = Path(path)
    meta = dict(line.split(None, 1) for line in Path(str(path) + ".txt").read_text().splitlines() if line)
    shape = (int(meta["height"]), int(meta["width"]), int(meta["channels"]))
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape).copy()
