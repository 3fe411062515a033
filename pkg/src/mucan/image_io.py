"""PNG frame input/output."""
from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    """8-bit RGB PNG -> (3, H, W) float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageError(f"{path}: not a PNG file")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageError(f"{path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 255.0


def to_uint8(img) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(path, img) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def list_frames(directory, prefix="frame_"):
    """Sorted ``(index, path)`` pairs for files named ``<prefix>NNNN.png``."""
    pattern = re.compile(rf"^{re.escape(prefix)}(\d+)\.png$")
    found = []
    for name in os.listdir(directory):
        m = pattern.match(name)
        if m:
            found.append((int(m.group(1)), os.path.join(directory, name)))
    return sorted(found)
