"""Binary PPM (P6) / PGM (P5) images with maxval 255."""
from pathlib import Path

import numpy as np


def to_bytes(img):
    """Map floats in [0, 1] to uint8 by rounding (values are clipped first)."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    """Write a [3,H,W] float image as P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3,H,W], got {img.shape}")
    _, h, w = img.shape
    body = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def write_pgm(path, img):
    """Write a [H,W] float image as P5."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"write_pgm expects [H,W], got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_bytes(img).tobytes())


def read_pnm(path):
    """Read P5/P6 back as floats in [0, 1]: [H,W] for PGM, [3,H,W] for PPM."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos).astype(np.float64) / 255.0
    if magic == b"P5":
        return data[: h * w].reshape(h, w)
    if magic == b"P6":
        return data[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1)
    raise ValueError(f"{path}: unsupported magic {magic!r}")
