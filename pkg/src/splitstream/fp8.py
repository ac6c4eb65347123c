"""8-bit floating point with a searchable exponent width and shared bias.

A code is ``s | E (ebit bits) | M (mbit bits)`` with ``ebit + mbit = 7``.
Exponent field 0 holds subnormals ``M / 2**mbit * 2**(1 - bias)``; every other
field value is a normal ``(1 + M / 2**mbit) * 2**(E - bias)``. No codes are
reserved for Inf or NaN.

Encoding rounds to nearest with ties to even. Magnitudes above the largest
finite value clamp to it (overflow); nonzero magnitudes below the smallest
subnormal flush to a signed zero (underflow). Both count as clipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Fp8Format",
    "ClipStats",
    "QuantizedTensor",
    "format_range",
    "encode_value",
    "decode_value",
    "encode",
    "decode",
    "nonzero_median",
    "clip_stats",
    "bias_interval",
    "search_format",
    "quantize_tensor",
    "dequantize_tensor",
    "CLIP_LIMIT",
    "EBIT_CANDIDATES",
]

EBIT_CANDIDATES = (3, 4, 5, 6)
CLIP_LIMIT = 0.01


@dataclass(frozen=True)
class Fp8Format:
    ebit: int
    bias: int

    def __post_init__(self):
        if self.ebit not in EBIT_CANDIDATES:
            raise ValueError(f"ebit must be in 3..6, got {self.ebit}")
        if int(self.bias) != self.bias:
            raise ValueError("bias must be an integer")

    @property
    def mbit(self) -> int:
        return 7 - self.ebit

    def __str__(self):
        return f"e{self.ebit}m{self.mbit}b{self.bias}"

    @classmethod
    def parse(cls, text: str) -> "Fp8Format":
        """Inverse of ``str(fmt)``, e.g. ``"e4m3b7"``."""
        head, bias = text.split("b", 1)
        ebit, _ = head[1:].split("m", 1)
        return cls(int(ebit), int(bias))


@dataclass(frozen=True)
class ClipStats:
    overflow_count: int
    underflow_count: int
    total_count: int

    @property
    def proportion(self) -> float:
        if self.total_count == 0:
            return 0.0
        return (self.overflow_count + self.underflow_count) / self.total_count


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, ...]
    codes: np.ndarray
    format: Fp8Format
    stats: ClipStats

    def __post_init__(self):
        if self.codes.size != int(np.prod(self.shape)):
            raise ValueError("code count does not match shape")


def format_range(fmt: Fp8Format) -> tuple[float, float]:
    """Smallest positive subnormal and largest finite magnitude of ``fmt``."""
    m = fmt.mbit
    lo = math.ldexp(1.0, 1 - fmt.bias - m)
    hi = math.ldexp(2.0 - math.ldexp(1.0, -m), (1 << fmt.ebit) - 1 - fmt.bias)
    return lo, hi


@lru_cache(maxsize=512)
def _positive_table(fmt: Fp8Format) -> np.ndarray:
    """Values of codes 0..127, strictly increasing."""
    m = fmt.mbit
    codes = np.arange(128)
    e = codes >> m
    frac = (codes & ((1 << m) - 1)).astype(np.float64)
    sub = np.ldexp(frac, 1 - fmt.bias - m)
    nrm = np.ldexp(frac + (1 << m), e - fmt.bias - m)
    table = np.where(e == 0, sub, nrm)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=512)
def _midpoints(fmt: Fp8Format) -> np.ndarray:
    t = _positive_table(fmt)
    # exact in float64: neighbours differ by at most mbit+2 significant bits
    mid = (t[:-1] + t[1:]) / 2
    mid.setflags(write=False)
    return mid


def _encode_magnitudes(a: np.ndarray, fmt: Fp8Format):
    """Codes (0..127) for non-negative float64 magnitudes, plus clip masks."""
    table = _positive_table(fmt)
    lo, hi = table[1], table[-1]
    over = a > hi
    under = (a > 0) & (a < lo)
    mid = _midpoints(fmt)
    # idx = number of midpoints strictly below a; a tie lands on the lower code
    idx = np.searchsorted(mid, a, side="left")
    tie = (idx < mid.size) & (mid[np.minimum(idx, mid.size - 1)] == a)
    # on a tie the candidates are idx and idx + 1; pick the even code
    idx = np.where(tie & (idx % 2 == 1), idx + 1, idx)
    idx = np.where(over, 127, idx)
    idx = np.where(under, 0, idx)
    return idx.astype(np.uint8), over, under


def encode(x, fmt: Fp8Format) -> np.ndarray:
    """Vectorized encode of a finite array to uint8 codes."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot encode NaN or Inf")
    codes, _, _ = _encode_magnitudes(np.abs(x), fmt)
    return codes | (np.signbit(x).astype(np.uint8) << 7)


def decode(codes, fmt: Fp8Format) -> np.ndarray:
    """Vectorized decode of uint8 codes to float64 values."""
    codes = np.asarray(codes, dtype=np.uint8)
    mag = _positive_table(fmt)[codes & 0x7F]
    return np.where(codes & 0x80, -mag, mag)


def encode_value(x: float, fmt: Fp8Format) -> tuple[int, str | None]:
    """Encode one value; the flag is ``"overflow"``, ``"underflow"`` or ``None``."""
    if not math.isfinite(x):
        raise ValueError(f"cannot encode {x!r}")
    code, over, under = _encode_magnitudes(np.array([abs(x)]), fmt)
    flag = "overflow" if over[0] else "underflow" if under[0] else None
    sign = 0x80 if math.copysign(1.0, x) < 0 else 0
    return int(code[0]) | sign, flag


def decode_value(code: int, fmt: Fp8Format) -> float:
    if not 0 <= code <= 0xFF:
        raise ValueError("code must fit in 8 bits")
    mag = float(_positive_table(fmt)[code & 0x7F])
    return -mag if code & 0x80 else mag


def nonzero_median(x) -> float | None:
    """Lower median of ``|x|`` over nonzero entries; ``None`` if all are zero."""
    a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
    a = a[a != 0]
    if a.size == 0:
        return None
    k = (a.size - 1) // 2
    return float(np.partition(a, k)[k])


def clip_stats(x, fmt: Fp8Format) -> ClipStats:
    a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
    lo, hi = format_range(fmt)
    return ClipStats(
        overflow_count=int(np.count_nonzero(a > hi)),
        underflow_count=int(np.count_nonzero((a > 0) & (a < lo))),
        total_count=int(a.size),
    )


def bias_interval(ebit: int, median: float) -> range:
    """Integer biases whose representable range brackets ``median``.

    Bias ``b`` qualifies when ``min_positive(b) <= median <= max_positive(b)``.
    Both endpoints scale as ``2**-b``, so the set is a contiguous interval.
    """
    base_lo, base_hi = format_range(Fp8Format(ebit, 0))
    # min_positive(b) = base_lo * 2**-b <= median  <=>  b >= log2(base_lo / median)
    b_min = math.ceil(math.log2(base_lo / median))
    b_max = math.floor(math.log2(base_hi / median))
    # log2 may be off by one ulp at exact powers of two; settle against the range
    while format_range(Fp8Format(ebit, b_min))[0] > median:
        b_min += 1
    while format_range(Fp8Format(ebit, b_min - 1))[0] <= median:
        b_min -= 1
    while format_range(Fp8Format(ebit, b_max))[1] < median:
        b_max -= 1
    while format_range(Fp8Format(ebit, b_max + 1))[1] >= median:
        b_max += 1
    return range(b_min, b_max + 1)


def search_format(x, limit: float = CLIP_LIMIT) -> Fp8Format | None:
    """First ``(ebit, bias)`` whose clip proportion is below ``limit``.

    Scans ``ebit`` from 3 to 6 and, for each, the bias interval around the
    nonzero median of ``|x|`` in ascending order. Returns ``None`` when the
    tensor is all zeros or no candidate qualifies; the caller then sends the
    tensor unquantized.
    """
    a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
    median = nonzero_median(a)
    if median is None:
        return None
    nz = np.sort(a[a != 0])
    n_zero = a.size - nz.size
    for ebit in EBIT_CANDIDATES:
        for bias in bias_interval(ebit, median):
            fmt = Fp8Format(ebit, bias)
            lo, hi = format_range(fmt)
            # sorted magnitudes make the range check two binary searches
            under = int(np.searchsorted(nz, lo, side="left"))
            over = nz.size - int(np.searchsorted(nz, hi, side="right"))
            if (under + over) / (nz.size + n_zero) < limit:
                return fmt
    return None


def quantize_tensor(x: np.ndarray, fmt: Fp8Format) -> QuantizedTensor:
    x = np.asarray(x)
    if np.isnan(x).any():
        raise ValueError("cannot quantize NaN")
    xf = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(xf)):
        raise ValueError("cannot quantize Inf")
    codes, over, under = _encode_magnitudes(np.abs(xf).ravel(), fmt)
    codes |= np.signbit(xf).ravel().astype(np.uint8) << 7
    stats = ClipStats(int(over.sum()), int(under.sum()), int(xf.size))
    return QuantizedTensor(tuple(x.shape), codes, fmt, stats)


def dequantize_tensor(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    return decode(q.codes, q.format).astype(dtype).reshape(q.shape)
