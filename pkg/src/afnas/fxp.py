"""Two's-complement fixed-point formats, the rounding quantizer and its STE.

A format ``(w, p)`` has ``w`` total bits and ``p`` fractional bits. Values are
rounded half away from zero onto the ``2**-p`` grid and then clipped to
``[-2**(w-p-1), 2**(w-p-1) - 1]``. The upper bound is deliberately the literal
``2**(w-p-1) - 1`` rather than the largest code; set ``saturate_to_code`` to
clip at ``2**(w-p-1) - 2**-p`` instead.

All real-valued routines work on float64 scalars or arrays. Every value of a
format with ``w <= 32`` is exactly representable in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CodeRangeError, ContractError, QuantDomainError

__all__ = [
    "FxpFormat",
    "QuantPair",
    "SEARCH_QUANT_PAIRS",
    "quantize",
    "to_code",
    "from_code",
    "ste_mask",
    "ste_grad",
    "round_shift",
    "div_round",
    "saturate_code",
]


@dataclass(frozen=True)
class FxpFormat:
    width_bits: int
    precision_bits: int
    saturate_to_code: bool = False

    def __post_init__(self):
        w, p = self.width_bits, self.precision_bits
        if not (isinstance(w, (int, np.integer)) and isinstance(p, (int, np.integer))):
            raise ContractError(f"format fields must be integers, got ({w!r}, {p!r})")
        if not 2 <= w <= 32:
            raise ContractError(f"width_bits must be in [2, 32], got {w}")
        if not 0 <= p < w:
            raise ContractError(f"precision_bits must be in [0, {w}), got {p}")

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.precision_bits

    @property
    def lo(self) -> float:
        return -(2.0 ** (self.width_bits - self.precision_bits - 1))

    @property
    def hi(self) -> float:
        top = 2.0 ** (self.width_bits - self.precision_bits - 1)
        return top - self.lsb if self.saturate_to_code else top - 1.0

    @property
    def code_min(self) -> int:
        return -(1 << (self.width_bits - 1))

    @property
    def code_max(self) -> int:
        return (1 << (self.width_bits - 1)) - 1

    @property
    def code_lo(self) -> int:
        """Smallest code ``quantize`` can produce."""
        return self.code_min

    @property
    def code_hi(self) -> int:
        """Largest code ``quantize`` can produce."""
        return int(self.hi * (1 << self.precision_bits))

    def __str__(self):
        return f"Q{self.width_bits}.{self.precision_bits}"


@dataclass(frozen=True)
class QuantPair:
    weights: FxpFormat
    activations: FxpFormat

    @classmethod
    def of(cls, w_w, p_w, w_a=None, p_a=None):
        """Build from bare integers; activations default to the weight format."""
        if w_a is None:
            w_a, p_a = w_w, p_w
        return cls(FxpFormat(w_w, p_w), FxpFormat(w_a, p_a))

    @property
    def total_bits(self) -> int:
        return self.weights.width_bits + self.activations.width_bits

    def as_tuple(self):
        return (
            self.weights.width_bits,
            self.weights.precision_bits,
            self.activations.width_bits,
            self.activations.precision_bits,
        )


# (w, p) pairs of the architecture search space; each is used for both
# weights and activations of a genome.
SEARCH_QUANT_PAIRS = (
    (32, 16),
    (24, 16),
    (16, 10),
    (16, 8),
    (16, 12),
    (12, 6),
    (12, 8),
)


def _as_float(x):
    arr = np.asarray(x, dtype=np.float64)
    # min/max propagate NaN and expose infinities at a fraction of isfinite's cost
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise QuantDomainError("quantize() requires finite input")
    return arr


def _ret(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def quantize(x, fmt: FxpFormat):
    """Round half away from zero onto the format grid, then clip."""
    arr = _as_float(x)
    scale = float(1 << fmt.precision_bits)
    q = np.multiply(arr, scale, out=np.empty_like(arr))
    q += np.copysign(0.5, q)
    np.trunc(q, out=q)
    q *= 1.0 / scale
    np.clip(q, fmt.lo, fmt.hi, out=q)
    # normalise -0.0 so codes and byte dumps are stable
    q += 0.0
    return _ret(q, x)


def to_code(x, fmt: FxpFormat):
    """Integer code of an already-quantized value."""
    arr = np.asarray(x, dtype=np.float64)
    scaled = arr * float(1 << fmt.precision_bits)
    if not np.all(np.isfinite(scaled)):
        raise QuantDomainError("to_code() requires finite input")
    if np.any(scaled != np.round(scaled)):
        raise ContractError(f"value is not on the {fmt} grid")
    if np.any(scaled < fmt.code_min) or np.any(scaled > fmt.code_max):
        raise CodeRangeError(f"code outside [{fmt.code_min}, {fmt.code_max}] for {fmt}")
    codes = scaled.astype(np.int64)
    return int(codes) if np.ndim(x) == 0 else codes


def from_code(c, fmt: FxpFormat):
    if np.ndim(c) == 0:
        c = int(c)
        if not fmt.code_min <= c <= fmt.code_max:
            raise CodeRangeError(f"code {c} outside {fmt}")
        return c / float(1 << fmt.precision_bits)
    arr = np.asarray(c)
    if arr.size and (arr.min() < fmt.code_min or arr.max() > fmt.code_max):
        raise CodeRangeError(f"code outside [{fmt.code_min}, {fmt.code_max}] for {fmt}")
    return arr.astype(np.float64) / float(1 << fmt.precision_bits)


def ste_mask(x, fmt: FxpFormat):
    """1.0 where ``x`` is strictly inside the clip range, else 0.0."""
    arr = np.asarray(x, dtype=np.float64)
    m = ((arr > fmt.lo) & (arr < fmt.hi)).astype(np.float64)
    return _ret(m, x)


def ste_grad(upstream, x, fmt: FxpFormat):
    """Clipped straight-through gradient of ``quantize`` at ``x``."""
    g = np.asarray(upstream, dtype=np.float64) * ste_mask(np.asarray(x), fmt)
    return _ret(g, np.broadcast(np.asarray(upstream), np.asarray(x)))


# --- integer helpers used by the deployment engine ---------------------------


def _sign_split(v):
    neg = v < 0
    return neg, np.where(neg, -v, v)


def round_shift(v, shift: int):
    """``v / 2**shift`` rounded half away from zero; left shift if negative.

    Works on int64 and object (Python int) arrays alike.
    """
    v = np.asarray(v)
    if shift <= 0:
        return v * (1 << -shift)
    # floor((v + half) / 2**shift), nudged down by one for negatives so
    # that their ties also round away from zero
    return (v + ((1 << (shift - 1)) - (v < 0))) >> shift


def div_round(num, den: int):
    """Integer ``num / den`` rounded half away from zero, ``den > 0``."""
    num = np.asarray(num)
    neg, mag = _sign_split(num)
    mag = (2 * mag + den) // (2 * den)
    return np.where(neg, -mag, mag)


def saturate_code(c, lo: int, hi: int):
    return np.minimum(np.maximum(np.asarray(c), lo), hi)
