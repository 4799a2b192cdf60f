"""Bit-level codecs for the 16/8-bit storage formats.

bfloat16 <-> binary32 and bfloat8 <-> binary16 are plain shifts of the bit
pattern.  posit<nbits, esbits> decode/encode is exact: decode returns a
binary64 value (exact for nbits <= 32, esbits <= 3) and encode rounds to
nearest, ties to even on the bit string, saturating at minpos/maxpos.

Everything here works on ``int`` bit patterns; the array helpers accept
numpy ``uint32``/``uint16`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

__all__ = [
    "f32_to_bits",
    "bits_to_f32",
    "f32_to_bf16_trunc",
    "f32_to_bf16",
    "bf16_to_f32_zeropad",
    "bf16_to_f32_replicate",
    "bf16_to_f32",
    "bf16_value",
    "f16_to_bf8",
    "bf8_to_f16",
    "bf8_value",
    "PositFormat",
    "PositBits",
    "posit_decode",
    "posit_encode",
    "posit_check",
    "PositCheckReport",
    "relative_error",
    "roundtrip_errors",
    "ErrorHistogram",
    "error_density",
]

Fill = Literal["zeropad", "replicate"]

_MASK16 = 0xFFFF
_MASK32 = 0xFFFFFFFF


# ── binary32 helpers ────────────────────────────────────────────────────


def f32_to_bits(x: float) -> int:
    """binary32 bit pattern of ``x`` (rounded to binary32 first)."""
    return int(np.array(x, dtype=np.float32).view(np.uint32))


def bits_to_f32(bits: int) -> float:
    return float(np.array(bits & _MASK32, dtype=np.uint32).view(np.float32))


# ── bfloat16 ────────────────────────────────────────────────────────────


def f32_to_bf16_trunc(x):
    """Keep the upper 16 bits of a binary32 pattern (no rounding).

    Works on ints and on unsigned numpy arrays.
    """
    if isinstance(x, np.ndarray):
        return (x.astype(np.uint32) >> np.uint32(16)).astype(np.uint16)
    return (x & _MASK32) >> 16


def _f32_to_bf16_rne_scalar(x: int) -> int:
    x &= _MASK32
    if (x & 0x7F800000) == 0x7F800000 and (x & 0x007FFFFF):
        # NaN: truncate, but keep it a NaN if the payload lived in the low half
        return (x >> 16) | 0x0040
    lsb = (x >> 16) & 1
    return ((x + 0x7FFF + lsb) >> 16) & _MASK16


def f32_to_bf16(x, rounding: Literal["trunc", "rne"] = "trunc"):
    """binary32 -> bfloat16 with either truncation or round-to-nearest-even.

    The kernels only ever use truncation; RNE exists for comparison.
    """
    if rounding == "trunc":
        return f32_to_bf16_trunc(x)
    if rounding != "rne":
        raise ValueError(f"unknown rounding mode {rounding!r}")
    if isinstance(x, np.ndarray):
        return np.array([_f32_to_bf16_rne_scalar(int(v)) for v in x.ravel()],
                        dtype=np.uint16).reshape(x.shape)
    return _f32_to_bf16_rne_scalar(x)


def bf16_to_f32_zeropad(b):
    """Left shift by 16, zero low half."""
    if isinstance(b, np.ndarray):
        return b.astype(np.uint32) << np.uint32(16)
    return (b & _MASK16) << 16


def bf16_to_f32_replicate(b):
    """Copy the 16-bit pattern into both halves of the binary32 word."""
    if isinstance(b, np.ndarray):
        w = b.astype(np.uint32)
        return (w << np.uint32(16)) | w
    b &= _MASK16
    return (b << 16) | b


def bf16_to_f32(b, fill: Fill = "zeropad"):
    if fill == "zeropad":
        return bf16_to_f32_zeropad(b)
    if fill == "replicate":
        return bf16_to_f32_replicate(b)
    raise ValueError(f"unknown fill mode {fill!r}")


def bf16_value(b: int) -> float:
    """Real value of a bfloat16 pattern; subnormals read as (signed) zero."""
    b &= _MASK16
    if (b & 0x7F80) == 0:
        return -0.0 if b & 0x8000 else 0.0
    return bits_to_f32(b << 16)


# ── bfloat8 (upper byte of binary16) ────────────────────────────────────


def f16_to_bf8(h):
    if isinstance(h, np.ndarray):
        return (h.astype(np.uint16) >> np.uint16(8)).astype(np.uint8)
    return (h & _MASK16) >> 8


def bf8_to_f16(b):
    if isinstance(b, np.ndarray):
        return b.astype(np.uint16) << np.uint16(8)
    return (b & 0xFF) << 8


def bf8_value(b: int) -> float:
    return float(np.array(bf8_to_f16(b), dtype=np.uint16).view(np.float16))


# ── posit ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class PositFormat:
    nbits: int
    esbits: int

    def __post_init__(self):
        if not 2 <= self.nbits <= 32:
            raise ValueError(f"nbits must be in [2, 32], got {self.nbits}")
        if not 0 <= self.esbits <= self.nbits - 2:
            raise ValueError(f"esbits must be in [0, nbits-2], got {self.esbits}")
        if (self.nbits - 2) << self.esbits > 1022:
            raise ValueError(f"{self} spans more than the binary64 normal range")

    @property
    def useed(self) -> int:
        return 1 << (1 << self.esbits)

    @property
    def mask(self) -> int:
        return (1 << self.nbits) - 1

    @property
    def nar(self) -> int:
        return 1 << (self.nbits - 1)

    @property
    def maxpos(self) -> int:
        return self.nar - 1

    def __str__(self) -> str:
        return f"posit<{self.nbits},{self.esbits}>"


@dataclass(frozen=True)
class PositBits:
    """An nbits-wide posit pattern, stored unsigned."""

    bits: int
    format: PositFormat = field(default_factory=lambda: PositFormat(16, 2))

    def __post_init__(self):
        if not 0 <= self.bits <= self.format.mask:
            raise ValueError(
                f"pattern {self.bits:#x} does not fit {self.format}")

    @property
    def is_nar(self) -> bool:
        return self.bits == self.format.nar

    @property
    def signed(self) -> int:
        """Pattern read as an nbits two's-complement integer."""
        if self.bits & self.format.nar:
            return self.bits - (1 << self.format.nbits)
        return self.bits

    def decode(self) -> float:
        return posit_decode(self.bits, self.format)


def _fields(bits: int, fmt: PositFormat):
    """Split a positive pattern into (k, e, frac, fbits)."""
    n, es = fmt.nbits, fmt.esbits
    rem = n - 1                       # bits after the sign
    body = bits & ((1 << rem) - 1)
    lead = (body >> (rem - 1)) & 1
    run = 0
    while run < rem and ((body >> (rem - 1 - run)) & 1) == lead:
        run += 1
    k = run - 1 if lead else -run
    left = max(rem - run - 1, 0)      # bits after the terminating bit
    tail = body & ((1 << left) - 1)
    if left >= es:
        e = tail >> (left - es)
        fbits = left - es
        frac = tail & ((1 << fbits) - 1)
    else:
        e = tail << (es - left)       # missing exponent bits read as 0
        fbits = 0
        frac = 0
    return k, e, frac, fbits


def posit_decode(bits: int, fmt: PositFormat) -> float:
    """Exact value of a posit pattern. 0 -> 0.0, NaR -> nan."""
    if not 0 <= bits <= fmt.mask:
        raise ValueError(f"pattern {bits:#x} does not fit {fmt}")
    if bits == 0:
        return 0.0
    if bits == fmt.nar:
        return math.nan
    neg = bool(bits & fmt.nar)
    if neg:
        bits = (-bits) & fmt.mask
    k, e, frac, fbits = _fields(bits, fmt)
    scale = (k << fmt.esbits) + e
    val = math.ldexp((1 << fbits) + frac, scale - fbits)
    return -val if neg else val


def posit_encode(x: float, fmt: PositFormat) -> int:
    """Nearest posit pattern to ``x`` (RNE on the bit string, saturating).

    NaN and infinities map to NaR, 0 to 0.  Finite nonzero values never
    round to 0 or NaR.
    """
    if math.isnan(x) or math.isinf(x):
        return fmt.nar
    if x == 0:
        return 0
    n, es = fmt.nbits, fmt.esbits
    m, exp = math.frexp(abs(x))        # |x| = m * 2**exp, m in [0.5, 1)
    scale = exp - 1
    frac = int(math.ldexp(2 * m - 1, 52))  # 52 exact fraction bits
    k = scale >> es
    e = scale - (k << es)
    if k >= 0:
        rlen = k + 2
        regime = ((1 << (k + 1)) - 1) << 1
    else:
        rlen = -k + 1
        regime = 1
    body = (((regime << es) | e) << 52) | frac
    length = rlen + es + 52
    shift = length - (n - 1)
    if shift > 0:
        keep = body >> shift
        guard = (body >> (shift - 1)) & 1
        sticky = body & ((1 << (shift - 1)) - 1)
        if guard and (sticky or keep & 1):
            keep += 1
    else:
        keep = body << -shift
    keep = min(max(keep, 1), fmt.maxpos)
    return (-keep) & fmt.mask if x < 0 else keep


# ── conversion error ────────────────────────────────────────────────────


def relative_error(x: float, y: float) -> float:
    """|x - y| / |x|; undefined for x == 0."""
    if x == 0:
        raise ZeroDivisionError("relative error undefined for x == 0")
    return abs(x - y) / abs(x)


@dataclass
class ErrorHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mode: str
    n: int
    seed: int | None = None
    mean: float = 0.0
    max: float = 0.0

    def __post_init__(self):
        if int(self.counts.sum()) != self.n:
            raise ValueError("histogram counts do not sum to n")

    def to_csv(self) -> str:
        lines = [f"# mode={self.mode} n={self.n} seed={self.seed}",
                 "bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)}")
        return "\n".join(lines) + "\n"


Sampler = Callable[[np.random.Generator, int], np.ndarray]

SAMPLERS: dict[str, Sampler] = {
    "normal": lambda rng, n: rng.standard_normal(n).astype(np.float32),
    "uniform": lambda rng, n: rng.uniform(-1.0, 1.0, n).astype(np.float32),
}


def roundtrip_errors(x: np.ndarray, mode: Fill) -> np.ndarray:
    """Relative error of binary32 -> bfloat16 -> binary32 for each sample."""
    x = np.asarray(x, dtype=np.float32)
    if np.any(x == 0):
        raise ZeroDivisionError("relative error undefined for zero samples")
    packed = f32_to_bf16_trunc(x.view(np.uint32))
    back = bf16_to_f32(packed, mode).view(np.float32).astype(np.float64)
    xd = x.astype(np.float64)
    return np.abs(xd - back) / np.abs(xd)


def error_density(mode: Fill, sampler: str | Sampler = "normal", n: int = 10**6,
                  bins: int = 64, seed: int = 0,
                  samples: np.ndarray | None = None) -> ErrorHistogram:
    """Histogram of bfloat16 round-trip relative error under ``mode``.

    Bins span [0, max(2**-7, max error)] linearly.  Zero samples are
    dropped; a sampler that yields nothing but zeros is an error.
    """
    if n < 1 or bins < 1:
        raise ValueError("n and bins must be >= 1")
    if samples is None:
        draw = SAMPLERS[sampler] if isinstance(sampler, str) else sampler
        samples = draw(np.random.default_rng(seed), n)
    x = np.asarray(samples, dtype=np.float32)
    x = x[x != 0]
    if x.size == 0:
        raise ValueError("sampler produced only zeros")
    err = roundtrip_errors(x, mode)
    hi = max(2.0 ** -7, float(err.max()))
    counts, edges = np.histogram(err, bins=bins, range=(0.0, hi))
    return ErrorHistogram(edges=edges, counts=counts, mode=mode, n=int(x.size),
                          seed=seed, mean=float(err.mean()), max=float(err.max()))


@dataclass
class PositCheckReport:
    format: PositFormat
    checked: int = 0
    violations: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def posit_check(fmt: PositFormat, max_violations: int = 100) -> PositCheckReport:
    """Exhaustively verify a posit format (nbits <= 16).

    Checks the special patterns, encode(decode(p)) == p on every other
    pattern, and that two's-complement order equals value order.
    """
    if fmt.nbits > 16:
        raise ValueError("exhaustive check is limited to nbits <= 16")
    report = PositCheckReport(fmt)

    def bad(p, why):
        if len(report.violations) < max_violations:
            report.violations.append((p, why))

    if posit_decode(0, fmt) != 0.0:
        bad(0, "zero pattern does not decode to 0")
    if not math.isnan(posit_decode(fmt.nar, fmt)):
        bad(fmt.nar, "NaR pattern does not decode to NaR")
    half = 1 << (fmt.nbits - 1)
    prev = None
    # walk patterns in signed order: -2^(n-1)+1 .. 2^(n-1)-1
    for s in range(-half + 1, half):
        p = s & fmt.mask
        v = posit_decode(p, fmt)
        if p != 0:
            report.checked += 1
            if math.isnan(v) or v == 0:
                bad(p, "non-special pattern decodes to a special value")
            elif posit_encode(v, fmt) != p:
                bad(p, f"encode(decode) gives {posit_encode(v, fmt):#x}")
        if prev is not None and not v > prev:
            bad(p, "value order disagrees with pattern order")
        prev = v
    return report
