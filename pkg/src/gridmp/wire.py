"""Fixed 28-byte message header and receiver-side byte-order conversion.

Header layout, all fields big-endian::

    magic       4s  b"GMP2"
    version     B   1
    flags       B   bit 0 set: payload is little-endian
    dtype_code  H   0=bytes 1=int32 2=int64 3=float64
    source      i   sender world rank
    context_id  i
    tag         i   never negative on the wire
    payload_len Q
"""
from __future__ import annotations

import struct
import sys
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

MAGIC = b"GMP2"
VERSION = 1
FLAG_LITTLE_ENDIAN = 0x01
HEADER = struct.Struct(">4sBBHiiiQ")
HEADER_SIZE = HEADER.size  # 28

BYTES, INT32, INT64, FLOAT64 = 0, 1, 2, 3
DTYPE_BY_CODE = {BYTES: np.dtype(np.uint8), INT32: np.dtype("i4"), INT64: np.dtype("i8"), FLOAT64: np.dtype("f8")}
CODE_BY_NAME = {"bytes": BYTES, "int32": INT32, "int64": INT64, "float64": FLOAT64}

LOCAL_LITTLE = sys.byteorder == "little"


@dataclass(frozen=True)
class WireHeader:
    source: int
    context_id: int
    tag: int
    payload_len: int
    dtype_code: int = BYTES
    little_endian: bool = LOCAL_LITTLE

    def pack(self) -> bytes:
        if self.tag < 0:
            raise ValueError("wildcard or negative tag cannot be sent")
        flags = FLAG_LITTLE_ENDIAN if self.little_endian else 0
        return HEADER.pack(
            MAGIC, VERSION, flags, self.dtype_code,
            self.source, self.context_id, self.tag, self.payload_len,
        )

    @classmethod
    def unpack(cls, data) -> "WireHeader":
        magic, version, flags, code, source, ctx, tag, length = HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise ProtocolError(f"bad header magic/version {magic!r}/{version}", source)
        if code not in DTYPE_BY_CODE:
            raise ProtocolError(f"unknown dtype code {code}", source)
        return cls(source, ctx, tag, length, code, bool(flags & FLAG_LITTLE_ENDIAN))


def dtype_code_of(buf) -> int:
    """Wire dtype code for a numpy array or bytes-like buffer."""
    if isinstance(buf, np.ndarray):
        kind = buf.dtype.newbyteorder("=")
        for code, dt in DTYPE_BY_CODE.items():
            if code != BYTES and kind == dt:
                return code
        if buf.dtype.itemsize == 1:
            return BYTES
        raise TypeError(f"unsupported dtype {buf.dtype}; use int32, int64, float64 or bytes")
    return BYTES


def convert_payload(hdr: WireHeader, payload, local_little: bool = LOCAL_LITTLE) -> bytes:
    """Return ``payload`` in the receiver's byte order (receiver makes right)."""
    if hdr.dtype_code == BYTES or hdr.little_endian == local_little:
        return payload
    itemsize = DTYPE_BY_CODE[hdr.dtype_code].itemsize
    if len(payload) % itemsize:
        raise ProtocolError(f"payload of {len(payload)} bytes is not a whole number of elements", hdr.source)
    arr = np.frombuffer(payload, dtype=np.dtype(f"u{itemsize}"))
    return arr.byteswap().tobytes()
