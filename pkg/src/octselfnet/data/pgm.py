"""8-bit binary PGM (P5) read/write."""

import re

import numpy as np

from ..errors import DataError, IntegrityError

_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError(f"PGM images are 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(img.tobytes())
    except OSError as exc:
        raise IntegrityError(f"cannot write {path}: {exc}") from exc


def read_pgm(path):
    """uint8 array of shape (height, width)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read image {path}: {exc}") from exc
    m = _HEADER.match(raw)
    if m is None:
        raise DataError(f"{path} is not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = raw[m.end():]
    if len(body) < w * h:
        raise IntegrityError(f"{path} is truncated: {len(body)} of {w * h} pixel bytes")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()
