"""PTF1 tensor files and 8-bit binary PGM images.

PTF1 layout: ``b"PTF1"``, u8 rank, ``rank`` little-endian u32 dims, then
the row-major float32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

PTF_MAGIC = b"PTF1"


def ptf_dumps(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("PTF1 supports rank <= 255")
    head = PTF_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def ptf_loads(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one PTF1 blob starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != PTF_MAGIC:
        raise FormatError("bad PTF1 magic")
    pos = offset + 4
    if len(buf) < pos + 1:
        raise FormatError("truncated PTF1 header")
    rank = buf[pos]
    pos += 1
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated PTF1 dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated PTF1 payload: need {nbytes} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
    return arr, pos + nbytes


def save_ptf(path, arr) -> None:
    Path(path).write_bytes(ptf_dumps(arr))


def load_ptf(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = ptf_loads(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after PTF1 payload")
    return arr


def to_uint8(img) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with rounding (values outside are clipped)."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img) -> np.ndarray:
    return np.asarray(img, dtype=np.uint8).astype(np.float32) / np.float32(255.0)


def quantize(img) -> np.ndarray:
    """Snap to the 8-bit grid so a PGM round trip is lossless."""
    return from_uint8(to_uint8(img))


def save_pgm(path, img) -> None:
    """Write a 2-D array as binary PGM; floats are treated as [0, 1] intensities."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a uint8 array of shape (H, W)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    if len(buf) - pos < w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def heatmap_u8(arr, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max scale a map to 0..255 for visual inspection."""
    arr = np.asarray(arr, dtype=np.float64)
    lo = float(arr.min()) if lo is None else lo
    hi = float(arr.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return to_uint8((arr - lo) / (hi - lo))
