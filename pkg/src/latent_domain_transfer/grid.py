"""
Module for writing image grids as binary PGM files.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)


def denormalize(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to bytes 0-255 by rounding (v + 1) * 127.5; values outside are clipped."""
    scaled = np.rint((np.asarray(images, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def tile_grid(images: np.ndarray, cols: int) -> np.ndarray:
    """
    Tile (batch, 1, H, W) images row-major into one (rows * H, cols * W) byte image.

    Cells past the last image stay black.

    Raises:
        ValueError: If the batch is empty or ``cols`` < 1.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) == 0:
        raise ValueError("Cannot tile an empty batch")
    if cols < 1:
        raise ValueError(f"cols must be at least 1, got {cols}")
    rows = -(-len(images) // cols)
    height, width = images.shape[2], images.shape[3]
    canvas = np.zeros((rows * height, cols * width), dtype=np.uint8)
    for index, image in enumerate(denormalize(images[:, 0])):
        r, c = divmod(index, cols)
        canvas[r * height:(r + 1) * height, c * width:(c + 1) * width] = image
    return canvas


def write_pgm(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a 2-D uint8 array as P5 with maxval 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a P5 file written by write_pgm."""
    payload = Path(path).read_bytes()
    magic, size, maxval, body = payload.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    width, height = (int(v) for v in size.split())
    return np.frombuffer(body, dtype=np.uint8, count=width * height).reshape(height, width)


def emit_grid(images: np.ndarray, cols: int, path: Union[str, Path]) -> Path:
    """
    Tile images in [-1, 1] and write them as one grayscale PGM.

    Raises:
        ValueError: If the batch is empty.
        OSError: If ``path`` cannot be written.
    """
    canvas = tile_grid(images, cols)
    written = write_pgm(canvas, path)
    logger.info(f"Wrote {len(images)}-image grid {canvas.shape[1]}x{canvas.shape[0]} to {written}")
    return written


def conditional_panel(conditionals: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """
    Stack a two-row panel: conditional inputs on top, outputs underneath.

    Pass the result to emit_grid with ``cols=len(conditionals)``.
    """
    if len(conditionals) != len(outputs):
        raise ValueError(f"{len(conditionals)} conditionals but {len(outputs)} outputs")
    return np.concatenate([conditionals, outputs])
