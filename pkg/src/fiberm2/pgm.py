"""Binary 16-bit PGM (P5) read/write."""
from pathlib import Path

import numpy as np

MAXVAL = 65535


def write_pgm(path, image) -> Path:
    """Write a peak-normalised image, scaling ``[0, 1]`` to ``[0, 65535]``."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("PGM input must lie in [0, 1]")
    data = np.rint(img * MAXVAL).astype(">u2")
    h, w = img.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def _tokens(buf: bytes, count: int):
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM and return floats in ``[0, 1]``."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path} is not a binary PGM file")
    (w, h, maxval), pos = _tokens(buf, 3)
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return data.reshape(h, w).astype(float) / maxval
