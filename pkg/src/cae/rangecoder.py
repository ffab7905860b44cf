"""Byte-oriented range coder and the static frequency tables it consumes.

Encoder state is a 33-bit ``low`` with a cached output byte plus a count
of pending 0xFF bytes (carry propagation), and a 32-bit ``range`` that is
renormalized by byte shifts whenever it falls below 2**24. Frequency
tables sum to ``TOTAL_FREQ`` = 2**16.

Bit-exact procedure (all arithmetic on unsigned integers)::

    encode(cum, freq):  r = range // TOTAL; low += r * cum; range = r * freq
                        while range < 2**24: range <<= 8; shift_low()
    shift_low():        if low < 0xFF000000 or low >= 2**32:
                            emit cache + (low >> 32); emit (0xFF + carry) & 0xFF
                            for each pending byte; cache = (low >> 24) & 0xFF
                        else: pending += 1
                        low = (low << 8) & 0xFFFFFFFF
    finish():           5 x shift_low()

The first emitted byte is always the initial cache (0) and is dropped, so
the decoder primes ``code`` from the first four payload bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

TOTAL_BITS = 16
TOTAL_FREQ = 1 << TOTAL_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
ESCAPE_BITS = 32
MAX_SUPPORT = 4096


class DecodeError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (payload byte offset {offset})")
        self.offset = offset


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 0
        self._first = True
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            if self._first:
                self._first = False
            else:
                self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.pending):
                self.out.append((0xFF + carry) & 0xFF)
            self.pending = 0
            self.cache = (self.low >> 24) & 0xFF
        else:
            self.pending += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, cum: int, freq: int, total_bits: int = TOTAL_BITS):
        r = self.range >> total_bits
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw(self, value: int, bits: int):
        """Encode ``bits`` raw bits in 16-bit chunks (uniform frequencies)."""
        while bits > 0:
            n = min(bits, 16)
            bits -= n
            self.encode((value >> bits) & ((1 << n) - 1), 1, n)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("truncated payload", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def decode_freq(self, total_bits: int = TOTAL_BITS) -> int:
        self._r = self.range >> total_bits
        value = self.code // self._r
        if value >> total_bits:
            raise DecodeError("corrupted payload", self.pos)
        return value

    def consume(self, cum: int, freq: int):
        self.code -= self._r * cum
        self.range = self._r * freq
        self._normalize()

    def check_end(self):
        """The encoder's flush is consumed exactly; leftovers mean corruption."""
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} unread trailing bytes", self.pos)

    def decode_raw(self, bits: int) -> int:
        value = 0
        while bits > 0:
            n = min(bits, 16)
            bits -= n
            v = self.decode_freq(n)
            self.consume(v, 1)
            value = (value << n) | v
        return value


def quantize_frequencies(counts: np.ndarray, total: int = TOTAL_FREQ) -> np.ndarray:
    """Scale positive counts to integers >= 1 summing exactly to ``total``."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.size
    if n == 0 or n > total:
        raise ValueError(f"cannot fit {n} symbols into total {total}")
    if np.any(counts <= 0):
        raise ValueError("counts must be positive")
    spare = total - n
    ideal = counts / counts.sum() * spare
    freqs = np.floor(ideal).astype(np.int64)
    left = spare - int(freqs.sum())
    if left:
        order = np.argsort(-(ideal - freqs), kind="stable")
        freqs[order[:left]] += 1
    return freqs + 1


@dataclass
class ChannelTable:
    """Static model for one channel; last table entry is the escape symbol."""

    z_min: int
    counts: np.ndarray
    freqs: np.ndarray = field(init=False)
    cum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.freqs = quantize_frequencies(self.counts)
        self.cum = np.concatenate([[0], np.cumsum(self.freqs)])

    @property
    def n_symbols(self) -> int:
        return self.counts.size - 1

    @property
    def z_max(self) -> int:
        return self.z_min + self.n_symbols - 1

    @property
    def escape(self) -> int:
        return self.counts.size - 1

    def index(self, z: int) -> int:
        i = z - self.z_min
        return i if 0 <= i < self.n_symbols else self.escape

    def log2_prob(self, z: int) -> float:
        """Model cost of ``z`` in bits including escape payload."""
        i = self.index(z)
        bits = -math.log2(self.freqs[i] / TOTAL_FREQ)
        return bits + (ESCAPE_BITS if i == self.escape else 0)

    def probabilities(self) -> np.ndarray:
        return self.freqs / TOTAL_FREQ


class SymbolHistogram:
    """Per-channel Laplace-smoothed frequency tables."""

    def __init__(self, tables: list[ChannelTable]):
        self.tables = tables

    @property
    def channels(self) -> int:
        return len(self.tables)

    @classmethod
    def fit(cls, codes, smoothing: int = 1, margin: int = 2) -> "SymbolHistogram":
        """Fit from integer codes shaped (K,H,W), (N,K,H,W) or a list of those."""
        if isinstance(codes, (list, tuple)):
            if not codes:
                raise ValueError("build_histograms: empty input")
            arrs = [np.asarray(c) for c in codes]
            arrs = [a[None] if a.ndim == 3 else a for a in arrs]
            k = arrs[0].shape[1]
            per_channel = [np.concatenate([a[:, c].reshape(-1) for a in arrs]) for c in range(k)]
        else:
            a = np.asarray(codes)
            if a.size == 0:
                raise ValueError("build_histograms: empty input")
            a = a[None] if a.ndim == 3 else a
            per_channel = [a[:, c].reshape(-1) for c in range(a.shape[1])]
        tables = []
        for vals in per_channel:
            if vals.size == 0:
                raise ValueError("build_histograms: empty input")
            if np.any(vals != np.round(vals)):
                raise ValueError("build_histograms: codes must be integer-valued")
            vals = vals.astype(np.int64)
            lo, hi = int(vals.min()) - margin, int(vals.max()) + margin
            if hi - lo + 1 > MAX_SUPPORT:
                # keep the densest window; the rest goes through the escape path
                med = int(np.median(vals))
                lo, hi = med - MAX_SUPPORT // 2, med + MAX_SUPPORT // 2 - 1
            inside = vals[(vals >= lo) & (vals <= hi)]
            counts = np.bincount(inside - lo, minlength=hi - lo + 1) + smoothing
            escapes = vals.size - inside.size
            tables.append(ChannelTable(lo, np.append(counts, escapes + smoothing)))
        return cls(tables)

    def cross_entropy_bits(self, codes: np.ndarray) -> float:
        """Ideal code length of ``codes`` (K,H,W) under the quantized tables."""
        codes = np.asarray(codes)
        total = 0.0
        for c, t in enumerate(self.tables):
            vals = codes[c].reshape(-1).astype(np.int64)
            idx = vals - t.z_min
            esc = (idx < 0) | (idx >= t.n_symbols)
            idx = np.where(esc, t.escape, idx)
            total += float(-np.log2(t.freqs[idx] / TOTAL_FREQ).sum()) + ESCAPE_BITS * int(esc.sum())
        return total

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<I", len(self.tables))]
        for t in self.tables:
            parts.append(struct.pack("<iI", t.z_min, t.counts.size))
            parts.append(t.counts.astype("<u8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["SymbolHistogram", int]:
        (k,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        tables = []
        for _ in range(k):
            z_min, n = struct.unpack_from("<iI", buf, offset)
            offset += 8
            counts = np.frombuffer(buf, dtype="<u8", count=n, offset=offset).astype(np.int64)
            offset += 8 * n
            tables.append(ChannelTable(z_min, counts))
        return cls(tables), offset


def encode_symbols(symbols, table: ChannelTable, enc: RangeEncoder | None = None) -> RangeEncoder:
    enc = enc or RangeEncoder()
    freqs, cum = table.freqs, table.cum
    for z in symbols:
        i = table.index(int(z))
        enc.encode(int(cum[i]), int(freqs[i]))
        if i == table.escape:
            enc.encode_raw(int(z) & MASK32, ESCAPE_BITS)
    return enc


def _lookup(table: ChannelTable, value: int) -> int:
    return int(np.searchsorted(table.cum, value, side="right")) - 1


def decode_symbols(dec: RangeDecoder, table: ChannelTable, count: int) -> list[int]:
    out = []
    cum, freqs = table.cum, table.freqs
    for _ in range(count):
        v = dec.decode_freq()
        i = _lookup(table, v)
        dec.consume(int(cum[i]), int(freqs[i]))
        if i == table.escape:
            raw = dec.decode_raw(ESCAPE_BITS)
            out.append(raw - (1 << 32) if raw >= 1 << 31 else raw)
        else:
            out.append(table.z_min + i)
    return out


def encode_stream(symbols, table: ChannelTable) -> bytes:
    return encode_symbols(symbols, table).finish()


def decode_stream(data: bytes, table: ChannelTable, count: int) -> list[int]:
    dec = RangeDecoder(data)
    out = decode_symbols(dec, table, count)
    dec.check_end()
    return out
