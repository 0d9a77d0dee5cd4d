import io

import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def png_bytes(array: np.ndarray) -> bytes:
    """Encode an (h, w) [0,1] float or (h, w, 3) uint8 array as PNG bytes."""
    if array.ndim == 2:
        img = Image.fromarray(np.round(array * 255.0).astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(array.astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def solid_rgb_png(r: int, g: int, b: int, width: int = 8, height: int = 8) -> bytes:
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    arr[..., 0] = r
    arr[..., 1] = g
    arr[..., 2] = b
    return png_bytes(arr)


def jpeg_bytes(array: np.ndarray) -> bytes:
    img = Image.fromarray(array.astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=95)
    return buf.getvalue()


def gif_bytes(width: int = 8, height: int = 8) -> bytes:
    img = Image.new("P", (width, height), color=3)
    buf = io.BytesIO()
    img.save(buf, format="GIF")
    return buf.getvalue()
