import logging
from pathlib import Path

import numpy as np
from PIL import Image

from ..engine.errors import ShapeMismatchError
from ..extractors.idx_loader import quantize

logger = logging.getLogger(__name__)

SEPARATOR = 255


def grid_array(images: np.ndarray, cols: int) -> tuple[np.ndarray, int]:
    """
    Lays out an NHWC batch row-major with 1-pixel white separators (borders
    included). Returns the uint8 canvas and the number of clamped values.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeMismatchError(f"expected an NHWC batch, got {images.ndim} dimensions")
    N, H, W, C = images.shape
    if C not in (1, 3):
        raise ShapeMismatchError(f"PNG grids support 1 or 3 channels, got {C}")
    if cols < 1 or N < 1:
        raise ShapeMismatchError("need at least one image and one column")

    clamped = int(np.count_nonzero((images < 0.0) | (images > 1.0)))
    if clamped:
        logger.warning("clamping %d values outside [0, 1] for PNG output", clamped)
    pixels = quantize(images)

    rows = -(-N // cols)
    canvas = np.full((rows * H + rows + 1, cols * W + cols + 1, C), SEPARATOR, dtype=np.uint8)
    for i in range(N):
        r, c = divmod(i, cols)
        top, left = 1 + r * (H + 1), 1 + c * (W + 1)
        canvas[top : top + H, left : left + W] = pixels[i]
    return canvas, clamped


def write_png_grid(images: np.ndarray, cols: int, path) -> int:
    """Writes an 8-bit grayscale or RGB grid PNG; returns how many values were clamped."""
    canvas, clamped = grid_array(images, cols)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(canvas[..., 0] if canvas.shape[2] == 1 else canvas)
    image.save(path, format="PNG")
    logger.info("wrote %s grid of %d images to %s", "x".join(map(str, canvas.shape[:2])), len(images), path)
    return clamped
