"""Binary PPM (P6) and PGM (P5) reading and writing, maxval 255 only."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _read_header(data: bytes, path: str, magic: bytes):
    if not data.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} magic, got {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(data) and data[end:end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise FormatError(f"{path}: bad header byte {ch!r}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing separator after header")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos


def read_ppm(path) -> np.ndarray:
    """P6 file -> (H, W, 3) uint8."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, pos = _read_header(data, path, b"P6")
    need = w * h * 3
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, need {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    """P5 file -> (H, W) uint8."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, pos = _read_header(data, path, b"P5")
    need = w * h
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, need {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def _to_bytes(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    scaled = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    return scaled.astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """(H, W, 3) uint8 or float in [0, 1] -> P6 file."""
    img = _to_bytes(image)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """(H, W) uint8 or float in [0, 1] -> P5 file."""
    img = _to_bytes(image)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm_normalized(path, values: np.ndarray) -> None:
    """Min-max normalize a float grid to 0..255 and write as P5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-30:
        norm = np.zeros_like(v)
    else:
        norm = (v - lo) / (hi - lo)
    write_pgm(path, norm)
