"""Fixed-point number grids and the rounding rules every weight/trace write
goes through.

Two grids matter in practice: signed even 8-bit integers for synaptic
weights ({-128, -126, ..., 126}) and unsigned 7-bit integers for traces
({0, ..., 127}). Stochastic rounding is driven by a counter-based seeded
generator so that every draw is a pure function of
(seed, stream_id, counter, lane) and runs replay bit-exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np

Real = Union[int, float, Fraction]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class Rounding(enum.Enum):
    STOCHASTIC = "stochastic"
    NEAREST = "nearest"
    NEAREST_EVEN_TIE_TOWARD_ZERO = "nearest_even_tie_toward_zero"


@dataclass(frozen=True)
class QuantSpec:
    """Precision rules for one register class (bit width, sign, grid, mode)."""

    bits: int
    signed: bool
    even_only: bool
    rounding: Rounding

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")
        if self.even_only and not self.signed:
            raise ValueError("even_only grids are signed (even weight grid)")

    @property
    def step(self) -> int:
        return 2 if self.even_only else 1

    @property
    def lo(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def hi(self) -> int:
        hi = (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1
        if self.even_only and hi % 2:
            hi -= 1
        return hi

    def contains(self, v: int) -> bool:
        return self.lo <= v <= self.hi and (not self.even_only or v % 2 == 0)


WEIGHT_SPEC = QuantSpec(bits=8, signed=True, even_only=True, rounding=Rounding.STOCHASTIC)
TRACE_SPEC = QuantSpec(bits=7, signed=False, even_only=False, rounding=Rounding.STOCHASTIC)


def _mix64(z: int) -> int:
    """Finalizer-style 64-bit mix (bijective on the 64-bit space)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def stream_id_for(label: str) -> int:
    """Stable 64-bit stream id for a component label (FNV-1a)."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """Counter-based deterministic generator keyed by (seed, stream_id).

    Each call to :meth:`u64` / :meth:`uniforms` advances the counter by one
    and yields one value per lane, where the value is a pure function of
    (seed, stream_id, counter, lane). Distinct stream ids give independent
    streams, so every component (per-client traces, per-synapse weight
    rounding, data generation) can own its own replayable stream.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = seed & _MASK64
        self.stream_id = stream_id & _MASK64
        self.counter = counter
        self._base = _mix64(_mix64(self.seed ^ _GOLDEN) ^ _mix64(self.stream_id))

    def fork(self, child: Union[int, str]) -> "Rng":
        """Derive an independent child stream; the parent is not advanced."""
        child_id = stream_id_for(child) if isinstance(child, str) else child & _MASK64
        return Rng(self.seed, _mix64(self.stream_id ^ _mix64(child_id ^ _GOLDEN)))

    def clone(self) -> "Rng":
        return Rng(self.seed, self.stream_id, self.counter)

    def u64(self, n: int) -> np.ndarray:
        h = _mix64(self._base + self.counter * _GOLDEN)
        self.counter += 1
        lanes = np.arange(n, dtype=np.uint64)
        return _mix64_np(np.uint64(h) + lanes * np.uint64(0xD1342543DE82EF95))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), one per lane, advancing the counter once."""
        return (self.u64(n) >> np.uint64(11)) * (2.0 ** -53)

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])


def stochastic_round_array(values: np.ndarray, spec: QuantSpec, rng: Rng) -> np.ndarray:
    """Vectorized stochastic rounding onto spec's grid.

    Each value rounds to one of its two neighboring grid points, choosing the
    upper one with probability equal to the fractional position between them,
    so the expectation equals the input exactly. Out-of-range values saturate
    deterministically. Consumes one counter tick; lane i serves element i.
    """
    if spec.rounding is not Rounding.STOCHASTIC:
        raise ValueError("stochastic_round requires a spec with stochastic rounding")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite input")
    u = rng.uniforms(values.size).reshape(values.shape)
    step = float(spec.step)
    a = np.floor(values / step) * step
    frac = (values - a) / step
    out = np.where(u < frac, a + step, a)
    out = np.clip(out, spec.lo, spec.hi)
    return out.astype(np.int64)


def stochastic_round(v: Real, spec: QuantSpec, rng: Rng) -> int:
    """Stochastically round one value onto spec's grid (see array form)."""
    return int(stochastic_round_array(np.array([float(v)]), spec, rng)[0])


def round_nearest_even_int(v: Real) -> int:
    """Nearest even integer to v; exact ties resolve toward zero.

    Computed in exact rational arithmetic so float and Fraction inputs give
    platform-independent results.
    """
    if isinstance(v, float) and not math.isfinite(v):
        raise ValueError("non-finite input")
    q = Fraction(v) / 2
    m = math.floor(q)
    r = q - m
    if r > Fraction(1, 2):
        m += 1
    elif r == Fraction(1, 2):
        # Candidates 2m and 2m+2 straddle the odd midpoint 2m+1.
        if 2 * m + 1 < 0:
            m += 1
    return 2 * m


def clamp_to_spec(v: int, spec: QuantSpec) -> int:
    """Saturating clamp into spec's representable set.

    On even-only grids an odd value additionally drops its low bit by
    rounding toward zero.
    """
    v = int(min(max(v, spec.lo), spec.hi))
    if spec.even_only and v % 2:
        v += -1 if v > 0 else 1
    return v


def quantize(v: Real, spec: QuantSpec, rng: Rng | None = None) -> int:
    """Round v onto spec's grid using the spec's rounding mode, saturating."""
    if isinstance(v, float) and not math.isfinite(v):
        raise ValueError("non-finite input")
    if spec.rounding is Rounding.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic rounding requires an rng")
        return stochastic_round(v, spec, rng)
    q = Fraction(v) / spec.step
    m = math.floor(q)
    r = q - m
    if r > Fraction(1, 2):
        m += 1
    elif r == Fraction(1, 2):
        if spec.rounding is Rounding.NEAREST:
            # Banker's rounding on the grid-quotient.
            m += m % 2
        elif 2 * m + 1 < 0:
            m += 1
    return clamp_to_spec(m * spec.step, spec)
