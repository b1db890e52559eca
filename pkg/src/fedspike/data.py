"""Event streams: file IO, spike-frame binning, synthetic gestures, splits.

Events are (timestamp_us, x, y, polarity) records. The binary file format
"NFEV" is little-endian: magic, version u16=1, width u16, height u16,
class_label u16, subject u16, event_count u32, then 9 bytes per event
(timestamp_us u32, x u16, y u16, polarity u8). Timestamps must be
non-decreasing; coordinates must sit inside the declared sensor.

Synthetic gestures stand in for recorded data at desk scale: each class is a
moving pattern (a bar drifting in one of eight directions, or a rotating
spoke) with ON events where the pattern newly covers a pixel and OFF events
where it leaves one, plus optional Poisson background noise. Generation is
deterministic per (class, seed).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .quant import Rng

MAGIC = b"NFEV"
VERSION = 1
DEFAULT_DURATION_US = 1_450_000

EVENT_DTYPE = np.dtype(
    [("timestamp_us", "<u4"), ("x", "<u2"), ("y", "<u2"), ("polarity", "u1")]
)

NUM_SYNTHETIC_CLASSES = 10

# Unit steps for the eight drift directions, counter-clockwise from "right".
_DRIFT_DIRECTIONS = [
    (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)
]


class EventFormatError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class GestureSample:
    """One gesture recording: an event stream plus its metadata."""

    events: np.ndarray  # EVENT_DTYPE records, timestamps non-decreasing
    label: int
    subject: int = 0
    width: int = 32
    height: int = 32
    duration_us: int = DEFAULT_DURATION_US

    def validate(self):
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            raise EventFormatError("BAD_DTYPE", "events must use the event record dtype")
        if len(ev) == 0:
            return
        if np.any(np.diff(ev["timestamp_us"].astype(np.int64)) < 0):
            raise EventFormatError("NON_MONOTONIC", "timestamps decrease within the stream")
        if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
            raise EventFormatError("OUT_OF_BOUNDS", "event coordinate outside the sensor")
        if ev["polarity"].max() > 1:
            raise EventFormatError("BAD_POLARITY", "polarity must be 0 or 1")


@dataclass
class ShotAssignment:
    """Per-client one-shot training sets: one sample per novel class."""

    shots: dict[int, list[GestureSample]] = field(default_factory=dict)

    def __post_init__(self):
        for client, samples in self.shots.items():
            labels = [s.label for s in samples]
            if len(set(labels)) != len(labels):
                raise ValueError(f"client {client} holds duplicate classes")


def write_events(path, sample: GestureSample):
    sample.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHHHHI", VERSION, sample.width, sample.height,
                             sample.label, sample.subject, len(sample.events)))
        fh.write(sample.events.astype(EVENT_DTYPE).tobytes())


def read_events(path) -> GestureSample:
    with open(path, "rb") as fh:
        header = fh.read(4)
        if header != MAGIC:
            raise EventFormatError("BAD_MAGIC", "bad magic: not an event file")
        rest = fh.read(14)
        if len(rest) != 14:
            raise EventFormatError("TRUNCATED", "unexpected end of event file")
        version, width, height, label, subject, count = struct.unpack("<HHHHHI", rest)
        if version != VERSION:
            raise EventFormatError("BAD_VERSION", f"unsupported event file version {version}")
        raw = fh.read(count * EVENT_DTYPE.itemsize)
        if len(raw) != count * EVENT_DTYPE.itemsize:
            raise EventFormatError("TRUNCATED", "unexpected end of event file")
        if fh.read(1):
            raise EventFormatError("TRAILING_DATA", "trailing bytes after last event")
    events = np.frombuffer(raw, dtype=EVENT_DTYPE).copy()
    duration = DEFAULT_DURATION_US
    if len(events):
        duration = max(duration, int(events["timestamp_us"].max()) + 1)
    sample = GestureSample(events, label, subject, width, height, duration)
    sample.validate()
    return sample


def bin_events(sample: GestureSample, dt_us: int,
               sensor_shape: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Discretize a sample into binary frames (steps, height, width, 2).

    An event at time t lands in step floor(t / dt_us); several events in the
    same (step, pixel, polarity) cell collapse to a single spike.
    """
    if dt_us <= 0:
        raise ValueError("dt_us must be positive")
    height, width = sensor_shape or (sample.height, sample.width)
    if (height, width) != (sample.height, sample.width):
        raise ValueError(
            f"sensor shape {(height, width)} does not match sample "
            f"{(sample.height, sample.width)}"
        )
    steps = math.ceil(sample.duration_us / dt_us)
    frames = np.zeros((steps, height, width, 2), dtype=np.int8)
    ev = sample.events
    if len(ev):
        step = ev["timestamp_us"] // dt_us
        if step.max() >= steps:
            raise ValueError("event timestamp beyond the sample duration")
        frames[step, ev["y"], ev["x"], ev["polarity"]] = 1
    return frames


def _poisson_count(rng: Rng, rate: float) -> int:
    if rate <= 0:
        return 0
    limit = math.exp(-rate)
    k, p = 0, 1.0
    while True:
        p *= rng.uniform()
        if p <= limit:
            return k
        k += 1


def _pattern_pixels(class_index: int, t: int, steps: int,
                    width: int, height: int) -> set[tuple[int, int]]:
    cx0, cy0 = (width - 1) / 2, (height - 1) / 2
    if class_index < 8:
        dx, dy = _DRIFT_DIRECTIONS[class_index]
        norm = math.hypot(dx, dy)
        margin = 4.0
        travel = min(width, height) - 2 * margin
        offset = travel * t / max(steps - 1, 1) - travel / 2
        cx = cx0 + dx / norm * offset
        cy = cy0 + dy / norm * offset
        px, py = -dy / norm, dx / norm  # bar lies perpendicular to the motion
        half = min(width, height) // 3
        points = ((cx + px * i, cy + py * i) for i in range(-half, half + 1))
    else:
        sign = 1 if class_index == 8 else -1
        angle = sign * 2 * math.pi * t / steps
        radius = min(width, height) / 2 - 2
        n = int(radius) + 1
        points = ((cx0 + math.cos(angle) * r, cy0 + math.sin(angle) * r)
                  for r in np.linspace(0, radius, n))
    pixels = set()
    for fx, fy in points:
        x, y = round(fx), round(fy)
        if 0 <= x < width and 0 <= y < height:
            pixels.add((x, y))
    return pixels


def generate_synthetic(class_index: int, seed: int, *, width: int = 32,
                       height: int = 32, duration_us: int = DEFAULT_DURATION_US,
                       step_us: int = 10_000, noise_rate: float = 1.0,
                       subject: int = 0) -> GestureSample:
    """Make one synthetic gesture: a class-specific moving pattern plus noise.

    noise_rate is the mean number of background events per generator step.
    """
    if not 0 <= class_index < NUM_SYNTHETIC_CLASSES:
        raise ValueError(f"class_index must be in [0, {NUM_SYNTHETIC_CLASSES})")
    rng = Rng(seed).fork(f"synthetic/{class_index}/{subject}")
    steps = math.ceil(duration_us / step_us)
    rows = []
    covered: set[tuple[int, int]] = set()
    for t in range(steps):
        base = t * step_us
        current = _pattern_pixels(class_index, t, steps, width, height)
        for x, y in sorted(current - covered):
            rows.append((base, x, y, 1))
        for x, y in sorted(covered - current):
            rows.append((base, x, y, 0))
        covered = current
        for _ in range(_poisson_count(rng, noise_rate)):
            draw = rng.u64(3)
            x = int(draw[0] % np.uint64(width))
            y = int(draw[1] % np.uint64(height))
            pol = int(draw[2] % np.uint64(2))
            jitter = int(rng.u64(1)[0] % np.uint64(step_us))
            rows.append((min(base + jitter, duration_us - 1), x, y, pol))
    events = np.array(rows, dtype=EVENT_DTYPE)
    events = events[np.argsort(events["timestamp_us"], kind="stable")]
    sample = GestureSample(events, class_index, subject, width, height, duration_us)
    sample.validate()
    return sample


def _shuffle(items: list, rng: Rng) -> list:
    order = np.argsort(rng.u64(len(items)), kind="stable")
    return [items[i] for i in order]


def make_splits(samples: Sequence[GestureSample], num_clients: int,
                test_size: int, seed: int) -> tuple[ShotAssignment, list[GestureSample]]:
    """Partition samples into per-client one-shot sets and a shared test set.

    Every client receives exactly one sample of each class; no sample is
    shared between clients or with the test set. When enough subjects cover
    every class, each client is pinned to one subject and test samples come
    from the held-out subjects; otherwise the split is only sample-disjoint.
    """
    classes = sorted({s.label for s in samples})
    if not classes:
        raise ValueError("no samples to split")
    by_class = {c: [s for s in samples if s.label == c] for c in classes}

    per_class_test = {c: test_size // len(classes) for c in classes}
    for c in classes[: test_size % len(classes)]:
        per_class_test[c] += 1
    for c in classes:
        need = num_clients + per_class_test[c]
        if len(by_class[c]) < need:
            raise ValueError(
                f"insufficient samples for class {c}: need {need}, have {len(by_class[c])}"
            )

    rng = Rng(seed).fork("splits")
    common_subjects = set(s.subject for s in by_class[classes[0]])
    for c in classes[1:]:
        common_subjects &= {s.subject for s in by_class[c]}

    shots = {k: [] for k in range(num_clients)}
    if len(common_subjects) >= num_clients:
        client_subjects = _shuffle(sorted(common_subjects), rng)[:num_clients]
        taken = set()
        for c in classes:
            for k, subj in enumerate(client_subjects):
                pick = next(s for s in by_class[c]
                            if s.subject == subj and id(s) not in taken)
                shots[k].append(pick)
                taken.add(id(pick))
        shot_subjects = set(client_subjects)
        pools = {c: _shuffle([s for s in by_class[c] if id(s) not in taken], rng)
                 for c in classes}
    else:
        shuffled = {c: _shuffle(by_class[c], rng) for c in classes}
        for c in classes:
            for k in range(num_clients):
                shots[k].append(shuffled[c][k])
        shot_subjects = {s.subject for group in shots.values() for s in group}
        pools = {c: shuffled[c][num_clients:] for c in classes}

    test: list[GestureSample] = []
    for c in classes:
        preferred = [s for s in pools[c] if s.subject not in shot_subjects]
        rest = [s for s in pools[c] if s.subject in shot_subjects]
        test.extend((preferred + rest)[: per_class_test[c]])
    return ShotAssignment(shots), test
