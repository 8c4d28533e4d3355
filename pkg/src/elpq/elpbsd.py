"""ELP_BSD weight format: digit specs, level tables, codes and bit packing.

A value is ``scale * sum_i s_i * 2**shifts_i[idx_i]`` where each digit stores an
optional sign bit and an index into its own shift-count list.  The packed code
lays digits out first-to-last, each group as ``[sign][index bits, MSB first]``,
so digit 0 occupies the most significant bits.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_SHIFT = 15
MAX_BITS = 16


class InvalidCode(ValueError):
    pass


@dataclass(frozen=True)
class DigitSpec:
    signed: bool
    shifts: tuple[int, ...]

    def __post_init__(self):
        shifts = tuple(int(s) for s in self.shifts)
        if not shifts:
            raise ValueError("a digit needs at least one shift count")
        if any(s < 0 or s > MAX_SHIFT for s in shifts):
            raise ValueError(f"shift counts must lie in 0..{MAX_SHIFT}: {shifts}")
        if any(b <= a for a, b in zip(shifts, shifts[1:])):
            raise ValueError(f"shift counts must be strictly increasing: {shifts}")
        object.__setattr__(self, "shifts", shifts)

    @property
    def index_bits(self) -> int:
        n = len(self.shifts)
        return math.ceil(math.log2(n)) if n > 1 else 0

    @property
    def bits(self) -> int:
        return int(self.signed) + self.index_bits


@dataclass(frozen=True)
class FormatSpec:
    digits: tuple[DigitSpec, ...]
    scale: float = 1.0

    def __post_init__(self):
        digits = tuple(self.digits)
        if not digits:
            raise ValueError("a format needs at least one digit")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "digits", digits)
        if bit_width(self) > MAX_BITS:
            raise ValueError(f"format uses {bit_width(self)} bits, limit is {MAX_BITS}")

    @property
    def max_shift(self) -> int:
        return max(max(d.shifts) for d in self.digits)

    def with_scale(self, scale: float) -> "FormatSpec":
        return FormatSpec(self.digits, float(scale))

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "digits": [{"signed": d.signed, "shifts": list(d.shifts)} for d in self.digits],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FormatSpec":
        digits = tuple(DigitSpec(bool(d["signed"]), tuple(d["shifts"])) for d in doc["digits"])
        return cls(digits, float(doc.get("scale", 1.0)))

    def label(self) -> str:
        parts = []
        for d in self.digits:
            parts.append(("s" if d.signed else "u") + "{" + ",".join(map(str, d.shifts)) + "}")
        return "+".join(parts)


def parse_format(text: str) -> FormatSpec:
    """Build a FormatSpec from JSON text or a path to a JSON file."""
    text = text.strip()
    if not text.startswith("{"):
        text = Path(text).read_text()
    return FormatSpec.from_dict(json.loads(text))


def bit_width(spec: FormatSpec) -> int:
    return sum(d.bits for d in spec.digits)


# ---------------------------------------------------------------------- code fields


def split_code(code: int, spec: FormatSpec) -> list[tuple[int, int]]:
    """Return ``(sign_bit, index)`` for every digit of a packed code."""
    fields = []
    pos = bit_width(spec)
    for d in spec.digits:
        sign = 0
        if d.signed:
            pos -= 1
            sign = (code >> pos) & 1
        idx = 0
        if d.index_bits:
            pos -= d.index_bits
            idx = (code >> pos) & ((1 << d.index_bits) - 1)
        fields.append((sign, idx))
    return fields


def join_code(fields, spec: FormatSpec) -> int:
    code = 0
    for (sign, idx), d in zip(fields, spec.digits):
        if d.signed:
            code = (code << 1) | (sign & 1)
        if idx >= len(d.shifts):
            raise InvalidCode(f"index {idx} out of range for {len(d.shifts)} shift counts")
        code = (code << d.index_bits) | idx
    return code


def digit_terms(code: int, spec: FormatSpec) -> list[tuple[int, int]]:
    """Return ``(sign, shift)`` with sign in {+1, -1} for each digit of ``code``."""
    if code < 0 or code >> bit_width(spec):
        raise InvalidCode(f"code {code} does not fit in {bit_width(spec)} bits")
    terms = []
    for (sign, idx), d in zip(split_code(code, spec), spec.digits):
        if idx >= len(d.shifts):
            raise InvalidCode(f"index {idx} out of range for {len(d.shifts)} shift counts")
        terms.append((-1 if sign else 1, d.shifts[idx]))
    return terms


def integer_value(code: int, spec: FormatSpec) -> int:
    """Value of the code before scaling (an integer sum of signed powers of two)."""
    return sum(s << k for s, k in digit_terms(code, spec))


def decode(code: int, spec: FormatSpec) -> float:
    return spec.scale * integer_value(code, spec)


def valid_codes(spec: FormatSpec):
    """Yield every valid packed code of ``spec`` in ascending order."""
    for code in range(1 << bit_width(spec)):
        if all(idx < len(d.shifts) for (_, idx), d in zip(split_code(code, spec), spec.digits)):
            yield code


# ------------------------------------------------------------------------ the table


@dataclass(frozen=True, eq=False)
class QuantTable:
    """Sorted distinct levels. ``codes[k]`` is the canonical code of ``levels[k]``.

    ``format`` is None for plain (uniform) tables that have no ELP_BSD encoding;
    those still carry integer levels via ``int_levels`` and a ``scale``.
    """

    levels: np.ndarray
    codes: np.ndarray
    int_levels: np.ndarray
    scale: float
    format: FormatSpec | None = None

    def __len__(self):
        return len(self.levels)

    def canonical_code(self, level: float) -> int:
        k = int(np.searchsorted(self.levels, level))
        if k >= len(self.levels) or self.levels[k] != level:
            raise KeyError(level)
        return int(self.codes[k])

    def nearest_index(self, values) -> np.ndarray:
        """Index of the nearest level; exact ties go to the smaller magnitude,
        then to the smaller code."""
        v = np.asarray(values, dtype=np.float64)
        lv = self.levels
        hi = np.clip(np.searchsorted(lv, v), 1, len(lv) - 1) if len(lv) > 1 else np.zeros(v.shape, int)
        if len(lv) == 1:
            return hi
        lo = hi - 1
        d_lo = np.abs(v - lv[lo])
        d_hi = np.abs(v - lv[hi])
        pick_hi = d_hi < d_lo
        tie = d_hi == d_lo
        mag_lo, mag_hi = np.abs(lv[lo]), np.abs(lv[hi])
        tie_hi = (mag_hi < mag_lo) | ((mag_hi == mag_lo) & (self.codes[hi] < self.codes[lo]))
        return np.where(pick_hi | (tie & tie_hi), hi, lo)


def enumerate_levels(spec: FormatSpec) -> QuantTable:
    values: dict[int, int] = {}
    for code in valid_codes(spec):
        iv = integer_value(code, spec)
        if iv not in values:  # ascending iteration keeps the smallest code
            values[iv] = code
    ints = np.array(sorted(values), dtype=np.int64)
    codes = np.array([values[int(i)] for i in ints], dtype=np.int64)
    # scale > 0 so sorting integers sorts scaled levels too
    return QuantTable(ints * spec.scale, codes, ints, spec.scale, spec)


def uniform_table(total_bits: int, scale: float) -> QuantTable:
    """Signed 2's-complement levels ``k * scale`` for ``k`` in the full range."""
    ks = np.arange(-(1 << (total_bits - 1)), 1 << (total_bits - 1), dtype=np.int64)
    return QuantTable(ks * float(scale), ks & ((1 << total_bits) - 1), ks, float(scale), None)


def encode(v: float, table: QuantTable) -> int:
    return int(table.codes[table.nearest_index(v)])


def encode_array(values, table: QuantTable) -> np.ndarray:
    return table.codes[table.nearest_index(values)]


def decode_array(codes, spec: FormatSpec) -> np.ndarray:
    """Vectorised decode via a lookup over the whole code space."""
    lut = code_value_lut(spec)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= len(lut)):
        raise InvalidCode("code outside the format's bit width")
    out = lut[codes]
    if np.isnan(out).any():
        raise InvalidCode("code with an out-of-range index field")
    return out * spec.scale


def code_value_lut(spec: FormatSpec) -> np.ndarray:
    """Integer value of every code as float, NaN for invalid codes."""
    lut = np.full(1 << bit_width(spec), np.nan)
    for code in valid_codes(spec):
        lut[code] = integer_value(code, spec)
    return lut


# -------------------------------------------------------------------------- packing


class TruncatedStream(ValueError):
    pass


def pack_codes(codes, spec: FormatSpec) -> bytes:
    """Concatenate codes MSB-first with no padding between them."""
    width = bit_width(spec)
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if width == 0:
        return b""
    if codes.size and (codes.min() < 0 or codes.max() >> width):
        raise InvalidCode(f"codes must fit in {width} bits")
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bits).tobytes()


def unpack_codes(buf: bytes, count: int, spec: FormatSpec) -> np.ndarray:
    width = bit_width(spec)
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    need = (count * width + 7) // 8
    if len(buf) < need:
        raise TruncatedStream(f"need {need} bytes for {count} codes, got {len(buf)}")
    bits = np.unpackbits(np.frombuffer(buf[:need], dtype=np.uint8))[: count * width]
    bits = bits.reshape(count, width).astype(np.int64)
    weights = np.int64(1) << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits @ weights


# ------------------------------------------------------------ quantized tensor files

QMAGIC = b"CQNT"


def write_quantized(path, codes, dims, spec: FormatSpec) -> None:
    """CQNT: magic, u16 version, u8 rank, u8 reserved, dims, u32 json length,
    FormatSpec JSON, packed codes."""
    dims = tuple(int(d) for d in dims)
    fmt = json.dumps(spec.to_dict(), sort_keys=True).encode()
    buf = struct.pack("<4sHBB", QMAGIC, 1, len(dims), 0)
    buf += struct.pack(f"<{len(dims)}I", *dims)
    buf += struct.pack("<I", len(fmt)) + fmt
    buf += pack_codes(codes, spec)
    Path(path).write_bytes(buf)


def read_quantized(path) -> tuple[np.ndarray, tuple[int, ...], FormatSpec]:
    from .tensorio import LoadError

    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise LoadError("header", "file too short")
    magic, version, rank, _ = struct.unpack_from("<4sHBB", buf, 0)
    if magic != QMAGIC:
        raise LoadError("magic", f"expected {QMAGIC!r}, got {magic!r}")
    if version != 1:
        raise LoadError("version", f"unsupported version {version}")
    if not 1 <= rank <= 4:
        raise LoadError("rank", f"unsupported rank {rank}")
    off = 8
    if len(buf) < off + 4 * rank + 4:
        raise LoadError("dims", "file ends inside the header")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + n:
        raise LoadError("format", "file ends inside the format block")
    spec = FormatSpec.from_dict(json.loads(buf[off : off + n]))
    off += n
    count = int(np.prod(dims))
    try:
        codes = unpack_codes(buf[off:], count, spec)
    except TruncatedStream as e:
        raise LoadError("payload", str(e)) from None
    return codes.reshape(dims), tuple(dims), spec
