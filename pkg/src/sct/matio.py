"""Bit-exact file formats: SCTM matrix files and 8-bit binary PGM images.

SCTM layout: magic ``SCTM`` (4 bytes), u32 little-endian version (=1),
u32 rows, u32 cols, then rows*cols IEEE-754 float64 little-endian values
in row-major order. Round-trips are bit-identical, signed zeros included.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError

MAGIC = b"SCTM"
VERSION = 1

_HEADER = struct.Struct("<4sIII")


def write_matrix(path, m: np.ndarray) -> None:
    m = np.ascontiguousarray(np.asarray(m, dtype=np.float64))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise FileFormatError(f"{path}: only 2-D matrices can be written, got ndim={m.ndim}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        fh.write(m.astype("<f8").tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FileFormatError(f"{path}: truncated header at byte offset {len(head)}")
        magic, version, rows, cols = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
        if version != VERSION:
            raise FileFormatError(f"{path}: unsupported version {version} at byte offset 4")
        want = rows * cols * 8
        payload = fh.read(want)
        if len(payload) != want:
            raise FileFormatError(
                f"{path}: truncated payload at byte offset {_HEADER.size + len(payload)}"
                f" (expected {want} payload bytes)"
            )
        if fh.read(1):
            raise FileFormatError(f"{path}: trailing bytes at byte offset {_HEADER.size + want}")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return data.reshape(rows, cols)


def write_pgm(path, values: np.ndarray) -> None:
    """Write a [0,1] float image as binary 8-bit PGM (P5)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise FileFormatError(f"{path}: PGM image must be 2-D, got ndim={v.ndim}")
    q = np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes(order="C"))


def write_pgm_indexed(path, indices: np.ndarray, count: int) -> None:
    """Write integer class indices as evenly spaced gray levels."""
    idx = np.asarray(indices)
    levels = idx.astype(np.float64) / max(count - 1, 1)
    write_pgm(path, levels)


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) into a float array scaled to [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1].isspace():
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError(f"{path}: truncated PGM header at byte offset {start}")
        return raw[start:pos]

    if token() != b"P5":
        raise FileFormatError(f"{path}: not a binary PGM (P5) at byte offset 0")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise FileFormatError(f"{path}: malformed PGM header near byte offset {pos}") from exc
    if maxval <= 0 or maxval > 255:
        raise FileFormatError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # the single whitespace byte after maxval
    want = w * h
    payload = raw[pos : pos + want]
    if len(payload) != want:
        raise FileFormatError(f"{path}: truncated PGM payload at byte offset {pos + len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / float(maxval)
