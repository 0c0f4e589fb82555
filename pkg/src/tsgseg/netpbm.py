"""Binary netpbm readers and writers (P6 color, P5 grayscale, maxval 255)."""

from __future__ import annotations

import numpy as np


class NetpbmError(Exception):
    pass


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as binary PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise NetpbmError(f"PPM needs uint8 H x W x 3, got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an H x W uint8 array as binary PGM."""
    arr = np.asarray(gray)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise NetpbmError(f"PGM needs uint8 H x W, got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise NetpbmError(f"bad magic, expected {magic.decode()}")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise NetpbmError("truncated header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise NetpbmError("truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise NetpbmError("truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
