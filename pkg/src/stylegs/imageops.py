"""Float image helpers: box resizing and 8-bit PNG I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def box_resize(image, width, height):
    """Resize an (H, W, C) float image with a box filter."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()
    if h % height == 0 and w % width == 0:
        fy, fx = h // height, w // width
        return image.reshape(height, fy, width, fx, -1).mean(axis=(1, 3)).reshape(
            (height, width) + image.shape[2:]
        )
    channels = image.reshape(h, w, -1)
    out = np.stack(
        [
            np.asarray(Image.fromarray(channels[..., c].astype(np.float32), mode="F").resize(
                (width, height), Image.Resampling.BOX), dtype=np.float64)
            for c in range(channels.shape[2])
        ],
        axis=-1,
    )
    return out.reshape((height, width) + image.shape[2:])


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


def read_png(path):
    """Read an image as float RGB in [0, 1]; alpha is composited over white."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "LA", "P"):
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
            return rgba[..., :3] * rgba[..., 3:] + (1.0 - rgba[..., 3:])
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def hstack(images, pad=2, value=1.0):
    """Concatenate equally sized images side by side with a separator strip."""
    h = images[0].shape[0]
    sep = np.full((h, pad) + images[0].shape[2:], value)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(im)
    return np.concatenate(parts, axis=1)
