"""Self-describing container for the relay's two arithmetic-coded streams.

Layout (big-endian)::

    magic "HDJ1" | version u8 | H u16 | W u16 | lambda index u8 |
    eta dB f32 | len(b_v) u32 | len(b_z) u32 | b_v | b_z | crc32 u32

The CRC covers everything before it. ``b_v`` precedes ``b_z`` because the
hyper-latents must be decoded first to build the tables for the latents.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptedStreamError

MAGIC = b"HDJ1"
VERSION = 1
_HEADER = struct.Struct(">4sBHHBfII")
_CRC = struct.Struct(">I")
HEADER_BYTES = _HEADER.size
OVERHEAD_BYTES = _HEADER.size + _CRC.size


def quantize_eta_db(eta_db: float) -> float:
    """The SNR as the decoder will see it after the f32 round-trip."""
    return float(np.float32(eta_db))


@dataclass
class Bitstream:
    height: int
    width: int
    lambda_index: int
    eta_db: float
    b_v: bytes
    b_z: bytes

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.height, self.width, self.lambda_index,
                            self.eta_db, len(self.b_v), len(self.b_z))
        body = head + self.b_v + self.b_z
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < OVERHEAD_BYTES:
            raise CorruptedStreamError("container shorter than its header")
        magic, version, h, w, li, eta_db, lv, lz = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptedStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptedStreamError(f"unsupported container version {version}")
        if len(data) != OVERHEAD_BYTES + lv + lz:
            raise CorruptedStreamError("container length disagrees with its header")
        body, (crc,) = data[:-_CRC.size], _CRC.unpack_from(data, len(data) - _CRC.size)
        if zlib.crc32(body) != crc:
            raise CorruptedStreamError("CRC mismatch")
        off = HEADER_BYTES
        return cls(h, w, li, float(eta_db), data[off:off + lv], data[off + lv:off + lv + lz])

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.b_v) + len(self.b_z))

    @property
    def total_bytes(self) -> int:
        return OVERHEAD_BYTES + len(self.b_v) + len(self.b_z)
