"""Discrete-time spiking network with integer-exact dynamics.

Neurons are current-based leaky integrate-and-fire with shift-based decay
(decay factor 1 - 2^-k per step, shift 0 disables decay), hard reset to zero
and an optional refractory period. All accumulators saturate at 24 bits so a
run is reproducible bit-exactly for fixed inputs, weights and seed.

Layers: sum pooling (stateless, conserves spike counts), convolution and
dense, both spiking. The final dense layer is the plastic output layer; all
layers before it are frozen at run time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .quant import Rng, WEIGHT_SPEC

ACC_MIN = -(1 << 23)
ACC_MAX = (1 << 23) - 1

Shape = tuple[int, int, int]


@dataclass(frozen=True)
class NeuronParams:
    current_decay_shift: int = 1
    voltage_decay_shift: int = 1
    threshold: int = 256
    refractory_steps: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        for name in ("current_decay_shift", "voltage_decay_shift"):
            if not 0 <= getattr(self, name) <= 12:
                raise ValueError(f"{name} must be in [0, 12]")
        if self.refractory_steps < 0:
            raise ValueError("refractory_steps must be >= 0")


@dataclass
class NeuronState:
    current: int = 0
    voltage: int = 0
    refractory_remaining: int = 0
    spiked_last_step: bool = False


@dataclass
class SpikeCounter:
    """Exact per-neuron spike counts since window_start."""

    counts: np.ndarray
    window_start: int = 0


def _sat24(x):
    return np.clip(x, ACC_MIN, ACC_MAX) if isinstance(x, np.ndarray) else max(ACC_MIN, min(ACC_MAX, x))


def step_neuron(state: NeuronState, params: NeuronParams, input_sum: int) -> NeuronState:
    """Advance one neuron one timestep (pure; returns the new state)."""
    i = state.current
    if params.current_decay_shift:
        i -= i >> params.current_decay_shift
    i = _sat24(i + input_sum)

    if state.refractory_remaining > 0:
        return NeuronState(i, 0, state.refractory_remaining - 1, False)

    u = state.voltage
    if params.voltage_decay_shift:
        u -= u >> params.voltage_decay_shift
    u = _sat24(u + i)
    if u >= params.threshold:
        return NeuronState(i, 0, params.refractory_steps, True)
    return NeuronState(i, u, 0, False)


@dataclass
class LayerTopology:
    """Serializable description of one layer (shape chain plus weights)."""

    kind: str  # "sum_pool" | "conv" | "dense"
    kernel: int
    stride: int
    zero_pad: bool
    in_shape: Shape
    out_shape: Shape
    weights: Optional[np.ndarray] = None  # even int8 values, None for pools

    def weight_count(self) -> int:
        return 0 if self.weights is None else self.weights.size


def _check_even(weights: np.ndarray):
    if weights.size and np.any(weights % 2 != 0):
        raise ValueError("odd weight value on the even 8-bit grid")
    if weights.size and (weights.min() < WEIGHT_SPEC.lo or weights.max() > WEIGHT_SPEC.hi):
        raise ValueError("weight outside even 8-bit range")


class SumPoolLayer:
    """k x k sum pooling; passes spike counts through without loss."""

    def __init__(self, topo: LayerTopology):
        self.topo = topo
        ih, iw, ic = topo.in_shape
        oh, ow, oc = topo.out_shape
        k = topo.kernel
        if ic != oc or ih != oh * k or iw != ow * k:
            raise ValueError(f"pool shapes do not chain: {topo.in_shape} -{k}a-> {topo.out_shape}")

    def reset(self):
        pass

    def step(self, x: np.ndarray) -> np.ndarray:
        k = self.topo.kernel
        oh, ow, oc = self.topo.out_shape
        return x.reshape(oh, k, ow, k, oc).sum(axis=(1, 3))


class _SpikingLayer:
    """Shared integrate-and-fire state machine over an array of neurons."""

    def __init__(self, out_shape, params: NeuronParams):
        self.params = params
        self._shape = out_shape
        self.reset()

    def reset(self):
        self.current = np.zeros(self._shape, dtype=np.int64)
        self.voltage = np.zeros(self._shape, dtype=np.int64)
        self.refractory = np.zeros(self._shape, dtype=np.int64)

    def _fire(self, drive: np.ndarray) -> np.ndarray:
        p = self.params
        i = self.current
        if p.current_decay_shift:
            i = i - (i >> p.current_decay_shift)
        i = _sat24(i + drive)
        self.current = i

        in_refractory = self.refractory > 0
        u = self.voltage
        if p.voltage_decay_shift:
            u = u - (u >> p.voltage_decay_shift)
        u = _sat24(u + i)
        u = np.where(in_refractory, 0, u)
        spikes = (u >= p.threshold) & ~in_refractory
        self.voltage = np.where(spikes, 0, u)
        self.refractory = np.where(
            spikes, p.refractory_steps, np.maximum(self.refractory - 1, 0)
        )
        return spikes.astype(np.int64)


class ConvLayer(_SpikingLayer):
    def __init__(self, topo: LayerTopology, params: NeuronParams):
        if topo.weights is None:
            raise ValueError("conv layer requires weights")
        _check_even(topo.weights)
        self.topo = topo
        ih, iw, ic = topo.in_shape
        oh, ow, oc = topo.out_shape
        k, s = topo.kernel, topo.stride
        self.w = topo.weights.astype(np.int64).reshape(oc, ic, k, k)
        pad = (k - 1) // 2 if topo.zero_pad else 0
        if topo.zero_pad and k % 2 == 0:
            raise ValueError("zero-padded conv requires an odd kernel")
        self._pad = pad
        if oh != (ih + 2 * pad - k) // s + 1 or ow != (iw + 2 * pad - k) // s + 1:
            raise ValueError(f"conv shapes do not chain: {topo.in_shape} -> {topo.out_shape}")
        super().__init__((oh, ow, oc), params)

    def step(self, x: np.ndarray) -> np.ndarray:
        k, s = self.topo.kernel, self.topo.stride
        oh, ow, _ = self.topo.out_shape
        if self._pad:
            x = np.pad(x, ((self._pad, self._pad), (self._pad, self._pad), (0, 0)))
        drive = np.zeros(self._shape, dtype=np.int64)
        for dy in range(k):
            for dx in range(k):
                window = x[dy : dy + oh * s : s, dx : dx + ow * s : s, :]
                drive += np.einsum("hwi,oi->hwo", window, self.w[:, :, dy, dx])
        return self._fire(_sat24(drive))


class DenseLayer(_SpikingLayer):
    def __init__(self, topo: LayerTopology, params: NeuronParams):
        if topo.weights is None:
            raise ValueError("dense layer requires weights")
        _check_even(topo.weights)
        self.topo = topo
        self.in_size = int(np.prod(topo.in_shape))
        self.out_size = topo.out_shape[2]
        self.w = topo.weights.astype(np.int64).reshape(self.out_size, self.in_size)
        super().__init__((self.out_size,), params)

    def step(self, x: np.ndarray) -> np.ndarray:
        drive = _sat24(self.w @ x.reshape(-1))
        return self._fire(drive)

    def set_weights(self, w: np.ndarray):
        _check_even(w)
        self.w = w.astype(np.int64).reshape(self.out_size, self.in_size)
        self.topo.weights = self.w.astype(np.int8).copy()


_LAYER_CLASSES = {"sum_pool": SumPoolLayer, "conv": ConvLayer, "dense": DenseLayer}


class Network:
    """A stack of layers ending in the plastic dense output layer."""

    def __init__(self, layers: Sequence):
        if not layers or not isinstance(layers[-1], DenseLayer):
            raise ValueError("network must end in a dense output layer")
        self.layers = list(layers)
        self.input_shape = layers[0].topo.in_shape

    @property
    def output_layer(self) -> DenseLayer:
        return self.layers[-1]

    @property
    def topologies(self) -> list[LayerTopology]:
        return [l.topo for l in self.layers]

    def reset_state(self):
        for l in self.layers:
            l.reset()

    def step(self, frame: np.ndarray) -> np.ndarray:
        x = frame
        for l in self.layers:
            x = l.step(x)
        return x

    def forward_window(self, frames: np.ndarray) -> SpikeCounter:
        """Run a full sample window; returns exact output spike counts."""
        if tuple(frames.shape[1:]) != self.input_shape:
            raise ValueError(
                f"frame shape {tuple(frames.shape[1:])} does not match input {self.input_shape}"
            )
        self.reset_state()
        counts = np.zeros(self.output_layer.out_size, dtype=np.int64)
        for t in range(frames.shape[0]):
            counts += self.step(frames[t])
        return SpikeCounter(counts=counts, window_start=0)

    def hidden_forward(self, frames: np.ndarray) -> np.ndarray:
        """Spike trains feeding the output layer: (steps, pre_size) int8.

        The prefix is frozen, so for a fixed sample this is a pure function
        of the sample and can be cached across epochs and rounds.
        """
        if tuple(frames.shape[1:]) != self.input_shape:
            raise ValueError(
                f"frame shape {tuple(frames.shape[1:])} does not match input {self.input_shape}"
            )
        for l in self.layers[:-1]:
            l.reset()
        out = np.empty((frames.shape[0], self.output_layer.in_size), dtype=np.int8)
        for t in range(frames.shape[0]):
            x = frames[t]
            for l in self.layers[:-1]:
                x = l.step(x)
            out[t] = x.reshape(-1)
        return out


def classify(counter: SpikeCounter) -> int:
    """Argmax of output spike counts; ties break toward the lowest index."""
    if counter.counts.size < 1:
        raise ValueError("classify requires at least one neuron")
    return int(np.argmax(counter.counts))


# --- architecture parsing -------------------------------------------------

_TOKEN_POOL = re.compile(r"^(\d+)a$")
_TOKEN_CONV = re.compile(r"^(\d+)c(\d+)(z?)$")
_TOKEN_DENSE = re.compile(r"^dense(\d+)$")
_TOKEN_INPUT = re.compile(r"^(\d+)x(\d+)x(\d+)$")

ARCH_PRESETS = {
    # 128x128x2 event input, frozen conv trunk, dense 512 hidden, plastic head.
    "gesture128": "128x128x2, 4a, 16c5z, 2a, 32c3z, 2a, dense512, out",
    # Small sensor variant for desk-scale experiments.
    "desk": "32x32x2, 2a, dense96, out",
}


def parse_arch(text: str, num_classes: int) -> list[LayerTopology]:
    """Parse an architecture string into a chained topology list.

    Grammar: "HxWxC, <k>a, <f>c<k>[z], dense<n>, ..., out". The trailing
    "out" is the plastic dense head with num_classes units.
    """
    text = ARCH_PRESETS.get(text.strip(), text)
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if len(tokens) < 2:
        raise ValueError(f"architecture needs an input shape and layers: {text!r}")
    m = _TOKEN_INPUT.match(tokens[0])
    if not m:
        raise ValueError(f"first token must be an input shape HxWxC, got {tokens[0]!r}")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    shape: Shape = (int(m.group(1)), int(m.group(2)), int(m.group(3)))
    if tokens[-1] != "out":
        raise ValueError("architecture must end with the 'out' head token")

    topos: list[LayerTopology] = []
    for tok in tokens[1:]:
        if tok == "out":
            topos.append(
                LayerTopology("dense", 0, 0, False, shape, (1, 1, num_classes))
            )
            shape = (1, 1, num_classes)
            continue
        if m := _TOKEN_POOL.match(tok):
            k = int(m.group(1))
            h, w, c = shape
            if h % k or w % k:
                raise ValueError(f"pool {k}a does not divide {shape}")
            out = (h // k, w // k, c)
            topos.append(LayerTopology("sum_pool", k, k, False, shape, out))
        elif m := _TOKEN_CONV.match(tok):
            f, k, pad = int(m.group(1)), int(m.group(2)), bool(m.group(3))
            h, w, c = shape
            if pad:
                out = (h, w, f)
            else:
                if h < k or w < k:
                    raise ValueError(f"conv {tok} kernel exceeds input {shape}")
                out = (h - k + 1, w - k + 1, f)
            topos.append(LayerTopology("conv", k, 1, pad, shape, out))
        elif m := _TOKEN_DENSE.match(tok):
            n = int(m.group(1))
            out = (1, 1, n)
            topos.append(LayerTopology("dense", 0, 0, False, shape, out))
        else:
            raise ValueError(f"unknown architecture token {tok!r}")
        shape = topos[-1].out_shape
    return topos


def _generate_even_weights(shape, mag: int, rng: Rng) -> np.ndarray:
    """Uniform even integers in [-mag, mag] (mag rounded down to even)."""
    half = max(mag // 2, 1)
    n = int(np.prod(shape))
    draws = rng.u64(n) % np.uint64(2 * half + 1)
    return (2 * (draws.astype(np.int64) - half)).astype(np.int8).reshape(shape)


def build_network(
    topos: Sequence[LayerTopology],
    hidden_params: NeuronParams,
    output_params: NeuronParams,
    rng: Optional[Rng] = None,
    hidden_init_mag: int = 16,
) -> Network:
    """Materialize a network: frozen hidden weights, zeroed plastic head.

    Topologies without weights get them filled in: hidden conv/dense layers
    draw fixed random even integers from rng (stream per layer), the output
    head starts at zero so the first error signal is maximal.
    """
    for prev, nxt in zip(topos, topos[1:]):
        if int(np.prod(prev.out_shape)) != int(np.prod(nxt.in_shape)) and prev.out_shape != nxt.in_shape:
            raise ValueError(
                f"layer shapes do not chain: {prev.out_shape} -> {nxt.in_shape}"
            )
    layers = []
    for idx, topo in enumerate(topos):
        is_output = idx == len(topos) - 1
        if topo.kind == "sum_pool":
            layers.append(SumPoolLayer(topo))
            continue
        if topo.weights is None:
            if topo.kind == "conv":
                oc, (ih, iw, ic), k = topo.out_shape[2], topo.in_shape, topo.kernel
                wshape = (oc, ic, k, k)
            else:
                wshape = (topo.out_shape[2], int(np.prod(topo.in_shape)))
            if is_output:
                w = np.zeros(wshape, dtype=np.int8)
            else:
                if rng is None:
                    raise ValueError("hidden weights missing and no rng to generate them")
                w = _generate_even_weights(wshape, hidden_init_mag, rng.fork(f"hidden/{idx}"))
            topo = replace(topo, weights=w)
        params = output_params if is_output else hidden_params
        layers.append(_LAYER_CLASSES[topo.kind](topo, params))
    return Network(layers)
