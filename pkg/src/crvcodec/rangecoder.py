"""Bit-exact renormalizing range coder plus bit/chunk I/O.

The coder keeps a 64-bit low accumulator with carry handling and a 32-bit
range, renormalizing a byte at a time.  Frequencies come from CDF tables
quantized to a 16-bit total, one table row per symbol position, so the
identical tables drive encoding, decoding, and codelength estimates.

Flush emits only the bytes needed to pin a point inside the final
interval (at most two), keeping the stream within a couple of bytes of
the ideal codelength even for short payloads.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*a, **k):
        if a and callable(a[0]):
            return a[0]
        return lambda f: f

CDF_TOTAL_BITS = 16
CDF_TOTAL = 1 << CDF_TOTAL_BITS
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeCoderError(ValueError):
    """Raised when a stream cannot be decoded."""


@njit(cache=True)
def _rc_encode_kernel(idx, rows, cdf, out):
    low = np.uint64(0)
    rng = np.uint64(_MASK32)
    cache = np.uint64(0)
    cs = np.uint64(0)
    pos = 0
    for i in range(idx.shape[0]):
        row = rows[i]
        s = idx[i]
        cum = np.uint64(cdf[row, s])
        freq = np.uint64(cdf[row, s + 1]) - cum
        r = rng >> np.uint64(CDF_TOTAL_BITS)
        low += r * cum
        rng = r * freq
        while rng < np.uint64(_TOP):
            # shift_low with carry propagation through pending 0xFF bytes;
            # cs==0 only at stream start, where a carry-in is impossible, so
            # the first byte is cached unconditionally (no dummy byte).
            if cs == np.uint64(0) or low < np.uint64(0xFF000000) or low > np.uint64(_MASK32):
                carry = low >> np.uint64(32)
                temp = cache
                while cs != np.uint64(0):
                    out[pos] = np.uint8((temp + carry) & np.uint64(0xFF))
                    pos += 1
                    temp = np.uint64(0xFF)
                    cs -= np.uint64(1)
                cache = (low >> np.uint64(24)) & np.uint64(0xFF)
            cs += np.uint64(1)
            low = (low & np.uint64(0xFFFFFF)) << np.uint64(8)
            rng = rng << np.uint64(8)
    # pick the in-interval point with 24 trailing zero bits, emit its top bytes
    val = ((low + np.uint64(0xFFFFFF)) >> np.uint64(24)) << np.uint64(24)
    low = val
    for _ in range(2):
        if cs == np.uint64(0) or low < np.uint64(0xFF000000) or low > np.uint64(_MASK32):
            carry = low >> np.uint64(32)
            temp = cache
            while cs != np.uint64(0):
                out[pos] = np.uint8((temp + carry) & np.uint64(0xFF))
                pos += 1
                temp = np.uint64(0xFF)
                cs -= np.uint64(1)
            cache = (low >> np.uint64(24)) & np.uint64(0xFF)
        cs += np.uint64(1)
        low = (low & np.uint64(0xFFFFFF)) << np.uint64(8)
    return pos


@njit(cache=True)
def _rc_decode_kernel(data, count, rows, cdf, out):
    nbytes = data.shape[0]
    pos = 0
    code = np.uint64(0)
    for _ in range(4):
        b = np.uint64(data[pos]) if pos < nbytes else np.uint64(0)
        code = (code << np.uint64(8)) | b
        pos += 1
    rng = np.uint64(_MASK32)
    overread = pos - nbytes if pos > nbytes else 0
    for i in range(count):
        row = rows[i]
        r = rng >> np.uint64(CDF_TOTAL_BITS)
        dv = code // r
        if dv >= np.uint64(CDF_TOTAL):
            dv = np.uint64(CDF_TOTAL - 1)
        lo = 0
        hi = cdf.shape[1] - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if np.uint64(cdf[row, mid]) <= dv:
                lo = mid
            else:
                hi = mid
        out[i] = lo
        cum = np.uint64(cdf[row, lo])
        freq = np.uint64(cdf[row, lo + 1]) - cum
        code -= r * cum
        rng = r * freq
        while rng < np.uint64(_TOP):
            b = np.uint64(data[pos]) if pos < nbytes else np.uint64(0)
            if pos >= nbytes:
                overread += 1
                if overread > 8:
                    return -1  # reading far past the end: corrupt stream
            code = (code << np.uint64(8)) | b
            pos += 1
            rng = rng << np.uint64(8)
    return pos if pos < nbytes else nbytes


def encode_indices(idx: np.ndarray, rows: np.ndarray, cdf: np.ndarray) -> bytes:
    """Range-encode symbol indices, one CDF row per symbol."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if idx.shape != rows.shape or idx.ndim != 1:
        raise ValueError(f"indices {idx.shape} and rows {rows.shape} must be equal-length 1D")
    out = np.empty(idx.size * 3 + 64, dtype=np.uint8)
    n = _rc_encode_kernel(idx, rows, np.ascontiguousarray(cdf, dtype=np.uint32), out)
    return out[:n].tobytes()


def decode_indices(data: bytes, count: int, rows: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if rows.shape != (count,):
        raise ValueError(f"rows shape {rows.shape} must be ({count},)")
    buf = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(count, dtype=np.int64)
    status = _rc_decode_kernel(buf, count, rows, np.ascontiguousarray(cdf, dtype=np.uint32), out)
    if status < 0:
        raise RangeCoderError(f"range decode read past end of {len(data)}-byte payload")
    return out


# -- bit-level I/O ------------------------------------------------------------


class BitWriter:
    """MSB-first bit packer."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write_bit(self, bit: int):
        self._acc = (self._acc << 1) | (bit & 1)
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def write_bits(self, value: int, nbits: int):
        for i in range(nbits - 1, -1, -1):
            self.write_bit((value >> i) & 1)

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._acc << (8 - self._nbits))
        return bytes(out)


class BitReader:
    """MSB-first bit unpacker; raises past the end."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read_bit(self) -> int:
        byte_i, bit_i = divmod(self._pos, 8)
        if byte_i >= len(self._data):
            raise RangeCoderError(f"bit read past end at bit {self._pos}")
        self._pos += 1
        return (self._data[byte_i] >> (7 - bit_i)) & 1

    def read_bits(self, nbits: int) -> int:
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.read_bit()
        return v


# -- chunk framing ------------------------------------------------------------


class ChunkError(ValueError):
    """Raised on malformed chunk framing."""


def symbols_crc(symbols: np.ndarray) -> int:
    """CRC-32 of a symbol sequence in its canonical little-endian int32 form.

    Stored in the chunk trailer so the decoder can verify that the decoded
    sequence matches the encoder's, which also catches decoding against a
    mismatched model or condition.
    """
    return zlib.crc32(np.ascontiguousarray(symbols, dtype="<i4").tobytes()) & 0xFFFFFFFF


def frame_chunk(payload: bytes, crc: int) -> bytes:
    return struct.pack("<I", len(payload)) + payload + struct.pack("<I", crc)


def read_chunk(buf: bytes, offset: int) -> tuple[bytes, int, int]:
    """Parse one framed chunk; returns (payload, crc, next_offset)."""
    if offset + 4 > len(buf):
        raise ChunkError(f"truncated chunk header at byte offset {offset}")
    (length,) = struct.unpack_from("<I", buf, offset)
    end = offset + 4 + length + 4
    if end > len(buf):
        raise ChunkError(
            f"truncated chunk at byte offset {offset}: need {end - offset} bytes, have {len(buf) - offset}"
        )
    payload = buf[offset + 4 : offset + 4 + length]
    (crc,) = struct.unpack_from("<I", buf, offset + 4 + length)
    return payload, crc, end
