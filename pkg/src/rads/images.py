"""Raster images and binary PGM/PPM (P5/P6) file I/O.

Images are stored as uint8 numpy arrays of shape (height, width, channels)
with channels 1 (grayscale / thermal) or 3 (RGB), maxval 255.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .boxes import BBox, ImageDims


@dataclass
class RasterImage:
    pixels: np.ndarray  # (h, w, c) uint8, c in {1, 3}

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, np.newaxis]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixel array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def dims(self) -> ImageDims:
        h, w = self.pixels.shape[:2]
        return ImageDims(width=int(w), height=int(h))

    def gray(self) -> np.ndarray:
        """Mean-of-channels intensity as float64 (h, w)."""
        return self.pixels.mean(axis=2)

    def copy(self) -> "RasterImage":
        return RasterImage(self.pixels.copy())

    def crop(self, box: BBox) -> "RasterImage":
        """Crop to the integer envelope of ``box`` (floor/ceil), clipped to bounds."""
        h, w = self.pixels.shape[:2]
        x0 = max(0, int(math.floor(box.x_min)))
        y0 = max(0, int(math.floor(box.y_min)))
        x1 = min(w, int(math.ceil(box.x_max)))
        y1 = min(h, int(math.ceil(box.y_max)))
        if x0 >= x1 or y0 >= y1:
            raise ValueError("crop box has no overlap with the image")
        return RasterImage(self.pixels[y0:y1, x0:x1].copy())


def resize_nearest(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize, deterministic (center-of-pixel sampling)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    in_h, in_w = pixels.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * in_h / out_h, in_h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * in_w / out_w, in_w - 1).astype(np.intp)
    return pixels[rows][:, cols]


def pnm_bytes(image: RasterImage) -> bytes:
    """Binary PGM (P5, 1 channel) or PPM (P6, 3 channels), maxval 255."""
    h, w = image.pixels.shape[:2]
    magic = b"P5" if image.channels == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    body = image.pixels[:, :, 0] if image.channels == 1 else image.pixels
    return header + body.tobytes()


def write_pnm(image: RasterImage, path: Union[str, Path]) -> None:
    Path(path).write_bytes(pnm_bytes(image))


def image_from_pnm_bytes(data: bytes) -> RasterImage:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    body = np.frombuffer(data, dtype=np.uint8, count=h * w * channels, offset=pos)
    return RasterImage(body.reshape(h, w, channels).copy())


def read_pnm(path: Union[str, Path]) -> RasterImage:
    """Read a binary P5/P6 file written by :func:`write_pnm` (or compatible)."""
    return image_from_pnm_bytes(Path(path).read_bytes())


def image_extension(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"
