"""Binary PPM (P6) and PGM (P5) readers/writers, 8-bit only.

Images travel as float arrays in [0,1], label maps as uint8 arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_header(raw: bytes, magic: bytes, path: str):
    if not raw.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    fields = []
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
        if start == pos:
            raise DataError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    pos += 1   # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h, pos


def read_ppm(path: str) -> np.ndarray:
    """Load a P6 image as float32 [3, H, W] in [0, 1]."""
    raw = open(path, "rb").read()
    w, h, pos = _read_header(raw, b"P6", path)
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    if data.size != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    img = data.reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_ppm(path: str, image: np.ndarray):
    """Write a float [3, H, W] image in [0, 1] as P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm: expected [3,H,W], got {image.shape}")
    u8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.transpose(1, 2, 0).tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Load a P5 map as uint8 [H, W]."""
    raw = open(path, "rb").read()
    w, h, pos = _read_header(raw, b"P5", path)
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    if data.size != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def write_pgm(path: str, values: np.ndarray):
    """Write a uint8 [H, W] map as P5."""
    if values.ndim != 2:
        raise DataError(f"write_pgm: expected [H,W], got {values.shape}")
    u8 = np.ascontiguousarray(values, dtype=np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())
