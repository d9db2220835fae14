"""Binary tensor files, RoI lists and masks.

Tensor layout: magic ``b"RFT1"``, u32 LE rank, ``rank`` u32 LE dims, then
``prod(dims)`` f32 LE values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .types import RoI, as_mask

MAGIC = b"RFT1"
MAX_RANK = 32
MAX_ELEMENTS = 1 << 40


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class DimOverflowError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    data = arr.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor values must be finite in float32")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(data).tobytes()


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{source}: header truncated")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank > MAX_RANK:
        raise DimOverflowError(f"{source}: rank {rank} exceeds {MAX_RANK}")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise TruncatedPayloadError(f"{source}: dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"{source}: element count overflows with dims {dims}")
    payload = buf[end:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(
            f"{source}: expected {4 * count} payload bytes, found {len(payload)}"
        )
    if len(payload) > 4 * count:
        raise TensorFormatError(f"{source}: {len(payload) - 4 * count} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def read_tensor(path) -> np.ndarray:
    """Read a tensor file; values come back as ``float32`` exactly as stored."""
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), source=os.fspath(path))


def write_tensor(path, array) -> None:
    blob = encode_tensor(array)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_rois(path) -> list[RoI]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON array of boxes")
    rois = []
    for i, item in enumerate(raw):
        try:
            rois.append(RoI(float(item["x1"]), float(item["y1"]), float(item["x2"]), float(item["y2"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: RoI {i} is malformed ({exc})") from None
    return rois


def write_rois(path, rois) -> None:
    payload = [{"x1": r.x1, "y1": r.y1, "x2": r.x2, "y2": r.y2} for r in rois]
    with open(path, "w") as fh:
        json.dump(payload, fh)


def read_mask(path, shape=None) -> np.ndarray:
    return as_mask(read_tensor(path), shape)
