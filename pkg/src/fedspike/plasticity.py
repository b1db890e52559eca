"""Error-triggered three-factor learning on the plastic output layer.

The rule keeps two exponentially decaying pre-synaptic traces per input
(stochastically rounded to 7 bits each step); their difference is the
pre-synaptic kernel. A per-neuron error unit compares the spike count in a
fixed window against a target and, when the error exceeds a threshold, every
incoming weight moves by learning_rate * error * kernel, gated by a box
function of the post-synaptic membrane, then stochastically rounded back to
the even 8-bit weight grid.

The same update is also expressible as a small sum-of-products program
(coefficient times a product of state factors); compile_soel_to_sop emits
that form and evaluate_sop runs it in exact arithmetic, which the tests use
to cross-check the direct implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Sequence, Union

import numpy as np

from .quant import Rng, QuantSpec, WEIGHT_SPEC, TRACE_SPEC, stochastic_round_array
from .snn import DenseLayer

TRACE_MAX = TRACE_SPEC.hi  # 127

IntOrArray = Union[int, np.ndarray]


@dataclass(frozen=True)
class TraceState:
    """Pair of decaying pre-synaptic traces (scalar or per-input arrays)."""

    x1: IntOrArray
    x2: IntOrArray
    alpha1_shift: int = 2
    alpha2_shift: int = 4
    impulse1: int = 16
    impulse2: int = 16

    def __post_init__(self):
        if not (1 <= self.alpha1_shift <= 12 and 1 <= self.alpha2_shift <= 12):
            raise ValueError("trace decay shifts must be in [1, 12]")
        if self.alpha1_shift == self.alpha2_shift:
            raise ValueError("trace decay shifts must differ or the kernel is zero")
        for imp in (self.impulse1, self.impulse2):
            if not 0 <= imp <= TRACE_MAX:
                raise ValueError("trace impulse must be in [0, 127]")
        for x in (self.x1, self.x2):
            if np.any(np.asarray(x) < 0) or np.any(np.asarray(x) > TRACE_MAX):
                raise ValueError("trace value outside [0, 127]")


@dataclass(frozen=True)
class ErrorUnit:
    """Windowed spike-count comparator feeding the weight update."""

    target: int = 0
    window: int = 16
    threshold: int = 1
    offset: int = 64
    last_error: int = 0
    error_register: int = 64

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if not 0 <= self.offset <= 127:
            raise ValueError("offset must be in [0, 127]")
        if not 0 <= self.error_register <= 127:
            raise ValueError("error_register must be in [0, 127]")
        if self.target < 0:
            raise ValueError("target must be >= 0")

    @property
    def triggered(self) -> bool:
        return abs(self.last_error) > self.threshold


@dataclass(frozen=True)
class BoxGate:
    """Unit step band over the post-synaptic membrane."""

    u_min: int
    u_max: int

    def __post_init__(self):
        if self.u_min > self.u_max:
            raise ValueError("u_min must not exceed u_max")


@dataclass(frozen=True)
class PlasticityConfig:
    learning_rate: Fraction = Fraction(1)
    quant: QuantSpec = WEIGHT_SPEC
    box_enabled: bool = True

    def __post_init__(self):
        lr = Fraction(self.learning_rate)
        object.__setattr__(self, "learning_rate", lr)
        num, den = lr.numerator, lr.denominator
        power_of_two = num > 0 and (num & (num - 1)) == 0 and (den & (den - 1)) == 0
        if not (power_of_two and (num == 1 or den == 1)):
            raise ValueError(f"learning_rate must be a power of two, got {lr}")


def _decay_and_round(x: np.ndarray, shift: int, rng: Rng) -> np.ndarray:
    # x * (1 - 2^-shift) is dyadic and exact in float64 for 7-bit x.
    decayed = x.astype(np.float64) * (1.0 - 0.5**shift)
    return stochastic_round_array(decayed, TRACE_SPEC, rng)


def update_trace(t: TraceState, pre_spike: IntOrArray, rng: Rng) -> TraceState:
    """One timestep of both traces: decay, round to 7 bits, add impulses.

    pre_spike is 0/1 (scalar or array broadcastable against the traces).
    Consumes two rng draws, one per trace, in a fixed order.
    """
    scalar = np.ndim(t.x1) == 0 and np.ndim(pre_spike) == 0
    spike = np.asarray(pre_spike, dtype=np.int64)
    new = []
    for x, shift, impulse in (
        (t.x1, t.alpha1_shift, t.impulse1),
        (t.x2, t.alpha2_shift, t.impulse2),
    ):
        decayed = _decay_and_round(np.asarray(x, dtype=np.int64), shift, rng)
        new.append(np.minimum(decayed + impulse * spike, TRACE_MAX))
    if scalar:
        return replace(t, x1=int(new[0][()]), x2=int(new[1][()]))
    return replace(t, x1=new[0], x2=new[1])


def pre_kernel(t: TraceState) -> IntOrArray:
    """Difference of the two traces; the pre-synaptic factor of the update."""
    diff = np.asarray(t.x2, dtype=np.int64) - np.asarray(t.x1, dtype=np.int64)
    return int(diff[()]) if diff.ndim == 0 else diff


def evaluate_error(unit: ErrorUnit, spike_count: int) -> tuple[ErrorUnit, bool]:
    """Compare the window's spike count against the target at a boundary."""
    err = unit.target - int(spike_count)
    triggered = abs(err) > unit.threshold
    if triggered:
        register = unit.offset + max(-unit.offset, min(err, 127 - unit.offset))
    else:
        register = unit.offset
    return replace(unit, last_error=err, error_register=register), triggered


def box_gate(gate: BoxGate, membrane: IntOrArray) -> IntOrArray:
    """1 where u_min <= membrane <= u_max (inclusive), else 0."""
    m = np.asarray(membrane)
    out = ((m >= gate.u_min) & (m <= gate.u_max)).astype(np.int64)
    return int(out[()]) if out.ndim == 0 else out


def _soel_delta(unit: ErrorUnit, kernel: IntOrArray, gate_value: IntOrArray,
                cfg: PlasticityConfig) -> np.ndarray:
    lr = cfg.learning_rate
    raw = (unit.error_register - unit.offset) * np.asarray(kernel, dtype=np.int64)
    raw = raw * np.asarray(gate_value, dtype=np.int64)
    # Exact: operands are small integers scaled by a power of two.
    return raw.astype(np.float64) * (lr.numerator / lr.denominator)


def apply_soel_update(w: IntOrArray, unit: ErrorUnit, t: TraceState,
                      gate_value: IntOrArray, cfg: PlasticityConfig,
                      rng: Rng) -> IntOrArray:
    """One triggered weight update, stochastically rounded onto the even grid.

    Returns w unchanged (and draws nothing) when the unit is not triggered.
    """
    if not unit.triggered:
        return w
    delta = _soel_delta(unit, pre_kernel(t), gate_value, cfg)
    target = np.asarray(w, dtype=np.float64) + delta
    out = stochastic_round_array(np.atleast_1d(target), cfg.quant, rng)
    return int(out[0]) if np.ndim(w) == 0 else out.reshape(np.shape(w))


def unquantized_update(w: IntOrArray, unit: ErrorUnit, t: TraceState,
                       gate_value: IntOrArray, cfg: PlasticityConfig) -> np.ndarray:
    """Exact-arithmetic companion of apply_soel_update (no rounding).

    Shares operands with the quantized path; saturates at the weight range
    ends but keeps fractional precision. Used as a fidelity reference.
    """
    target = np.asarray(w, dtype=np.float64)
    if unit.triggered:
        target = target + _soel_delta(unit, pre_kernel(t), gate_value, cfg)
    return np.clip(target, cfg.quant.lo, cfg.quant.hi)


# --- sum-of-products rule programs -----------------------------------------

FACTOR_NAMES = ("x1", "x2", "error_register", "constant", "pre_spike", "post_spike")


@dataclass(frozen=True)
class SopTerm:
    coeff: Fraction
    factors: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "coeff", Fraction(self.coeff))
        object.__setattr__(self, "factors", tuple(self.factors))
        for name in self.factors:
            if name not in FACTOR_NAMES:
                raise ValueError(f"unknown factor {name!r}")


@dataclass(frozen=True)
class SopProgram:
    terms: tuple[SopTerm, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))


def compile_soel_to_sop(cfg: PlasticityConfig, unit: ErrorUnit) -> SopProgram:
    """Expand learning_rate * (E - C) * (x2 - x1) into four product terms."""
    lr, c = cfg.learning_rate, unit.offset
    return SopProgram((
        SopTerm(lr, ("error_register", "x2")),
        SopTerm(-lr, ("error_register", "x1")),
        SopTerm(-lr * c, ("x2",)),
        SopTerm(lr * c, ("x1",)),
    ))


def evaluate_sop(program: SopProgram, bindings: Mapping[str, IntOrArray]):
    """Run a sum-of-products program exactly.

    Scalar bindings give an int (or an exact Fraction when the result is not
    integral); array bindings give an int64 array and raise if any entry
    would be fractional.
    """
    for term in program.terms:
        for name in term.factors:
            if name not in bindings:
                raise ValueError(f"unbound factor reference {name!r}")

    if any(isinstance(v, np.ndarray) for v in bindings.values()):
        denom = 1
        for term in program.terms:
            denom = denom * term.coeff.denominator // np.gcd(denom, term.coeff.denominator)
        total = None
        for term in program.terms:
            part = np.int64(term.coeff.numerator * (denom // term.coeff.denominator))
            for name in term.factors:
                part = part * np.asarray(bindings[name], dtype=np.int64)
            total = part if total is None else total + part
        if total is None:
            return 0
        total = np.asarray(total, dtype=np.int64)
        if denom > 1:
            if np.any(total % denom):
                raise ValueError("sum of products is not integral for these bindings")
            total = total // denom
        return total

    total = Fraction(0)
    for term in program.terms:
        part = term.coeff
        for name in term.factors:
            part *= int(bindings[name])
        total += part
    return int(total) if total.denominator == 1 else total


# --- vectorized trainer -----------------------------------------------------

@dataclass
class TrainStats:
    """Aggregate of one training pass over a spike window."""

    boundaries: int = 0
    triggered_updates: int = 0
    error_l1: int = 0
    spike_counts: np.ndarray | None = None
    error_per_class: np.ndarray | None = None


class SoelEngine:
    """Drives error-triggered updates on one network's dense output layer.

    Holds the trace/error/gate configuration and two private rng streams
    (trace rounding and weight rounding) whose counters advance only with
    use, so a rerun with the same seed replays bit-exactly.
    """

    def __init__(self, cfg: PlasticityConfig, unit_template: ErrorUnit,
                 trace_template: TraceState, gate: BoxGate, rng: Rng):
        self.cfg = cfg
        self.unit_template = unit_template
        self.trace_template = trace_template
        self.gate = gate
        self._trace_rng = rng.fork("traces")
        self._weight_rng = rng.fork("updates")

    def train_on_spikes(self, head: DenseLayer, pre_spikes: np.ndarray,
                        targets: Sequence[int]) -> TrainStats:
        """One pass over a (steps, pre_size) 0/1 spike array.

        targets holds the desired spike count per output neuron per window.
        The head's weights are updated in place at each window boundary
        where some unit's error exceeds its threshold.
        """
        steps, pre_size = pre_spikes.shape
        n_out = head.out_size
        if len(targets) != n_out:
            raise ValueError(f"need {n_out} targets, got {len(targets)}")

        head.reset()
        zeros = np.zeros(pre_size, dtype=np.int64)
        trace = replace(self.trace_template, x1=zeros, x2=zeros.copy())
        units = [replace(self.unit_template, target=int(t), last_error=0,
                         error_register=self.unit_template.offset)
                 for t in targets]
        window = self.unit_template.window

        stats = TrainStats(spike_counts=np.zeros(n_out, dtype=np.int64),
                           error_per_class=np.zeros(n_out, dtype=np.int64))
        window_counts = np.zeros(n_out, dtype=np.int64)
        for t in range(steps):
            post = head.step(pre_spikes[t].astype(np.int64))
            trace = update_trace(trace, pre_spikes[t].astype(np.int64), self._trace_rng)
            window_counts += post
            stats.spike_counts += post
            if (t + 1) % window == 0:
                stats.boundaries += 1
                self._boundary_update(head, trace, units, window_counts, stats)
                window_counts[:] = 0
        return stats

    def _boundary_update(self, head, trace, units, window_counts, stats):
        any_triggered = False
        for i, unit in enumerate(units):
            units[i], triggered = evaluate_error(unit, int(window_counts[i]))
            stats.error_l1 += abs(units[i].last_error)
            stats.error_per_class[i] += abs(units[i].last_error)
            any_triggered |= triggered
        if not any_triggered:
            return
        stats.triggered_updates += sum(u.triggered for u in units)

        if self.cfg.box_enabled:
            gates = box_gate(self.gate, head.voltage)
        else:
            gates = np.ones(head.out_size, dtype=np.int64)
        kernel = pre_kernel(trace)
        lr = self.cfg.learning_rate
        row = np.array(
            [(u.error_register - u.offset) if u.triggered else 0 for u in units],
            dtype=np.int64,
        ) * gates
        delta = np.outer(row, kernel).astype(np.float64) * (lr.numerator / lr.denominator)
        new_w = stochastic_round_array(
            head.w.astype(np.float64) + delta, self.cfg.quant, self._weight_rng
        )
        head.set_weights(new_w.astype(np.int8))
