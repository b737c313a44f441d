"""Image serialization: binary PPM as the canonical format, PNG as export.

PPM (P6, maxval 255) is written and parsed here without third-party code so
saved outputs are byte-reproducible; PNG goes through Pillow and is a
convenience mirror of the same 8-bit data.
"""

from __future__ import annotations

import os

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to 8-bit, clipping out-of-range."""
    img = np.asarray(img, dtype=np.float64)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"read_ppm: {path} is not a binary PPM")
    # header = magic, width, height, maxval; comments start with '#'
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"read_ppm: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return from_uint8(data.reshape(h, w, 3))


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as PNG (via Pillow)."""
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read PPM or PNG into an (H, W, 3) float image in [0, 1]."""
    text = str(path)
    if text.endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB"), dtype=np.uint8))
