"""Experiment configuration: an INI file plus command-line overrides.

One flat dataclass carries every knob an experiment run needs, grouped into
INI sections that mirror the package modules ([network], [plasticity],
[federation], [data], [seed]). Values are validated eagerly at load time so
a bad config fails before any work starts, and the error names the field.

The master seed is the only seed in the file. Every component forks its own
named stream from it (the network builder, each client's trainer, the
synthetic data generator, the split shuffler), so runs are reproducible
end to end from one integer.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields
from fractions import Fraction

from .data import NUM_SYNTHETIC_CLASSES
from .plasticity import (
    BoxGate,
    ErrorUnit,
    PlasticityConfig,
    TraceState,
)
from .snn import NeuronParams, parse_arch


class ConfigError(ValueError):
    """A config value failed validation; the message names the field."""


def parse_fraction(text: str) -> Fraction:
    """Parse "1", "3", or "1/8" into an exact rational."""
    parts = text.strip().split("/")
    try:
        if len(parts) == 1:
            return Fraction(int(parts[0]))
        if len(parts) == 2:
            return Fraction(int(parts[0]), int(parts[1]))
    except (ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"bad fraction {text!r}: {err}") from err
    raise ConfigError(f"bad fraction {text!r}")


def parse_address(text: str) -> tuple[str, int]:
    """Parse "host:port" into an address tuple."""
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address must be host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError as err:
        raise ConfigError(f"bad port in address {text!r}") from err


@dataclass
class ExperimentConfig:
    # [network]
    arch: str = "desk"
    hidden_threshold: int = 64
    output_threshold: int = 512
    current_decay_shift: int = 3
    voltage_decay_shift: int = 3
    refractory_hidden: int = 0
    refractory_output: int = 0
    hidden_init_mag: int = 32

    # [plasticity]
    window: int = 16
    error_threshold: int = 3
    error_offset: int = 64
    learning_rate: Fraction = Fraction(1, 128)
    alpha1_shift: int = 2
    alpha2_shift: int = 4
    impulse1: int = 16
    impulse2: int = 16
    box_enabled: bool = True
    box_low: int = 0
    box_high: int = 1024
    target_rate: int = 12
    off_target: int = 0

    # [federation]
    clients: int = 5
    rounds: int = 8
    local_epochs: int = 1
    transport: str = "inproc"
    listen: tuple[str, int] = ("127.0.0.1", 7177)
    timeout_s: float = 30.0

    # [data]
    classes: int = 5
    width: int = 32
    height: int = 32
    duration_us: int = 1_450_000
    step_us: int = 10_000
    dt_us: int = 10_000
    noise_rate: float = 1.0
    test_size: int = 100

    # [seed]
    master_seed: int = 7

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(ok: bool, section: str, key: str, why: str):
            if not ok:
                raise ConfigError(f"[{section}] {key}: {why}")

        need(self.hidden_threshold > 0, "network", "hidden_threshold", "must be > 0")
        need(self.output_threshold > 0, "network", "output_threshold", "must be > 0")
        for key in ("current_decay_shift", "voltage_decay_shift"):
            need(0 <= getattr(self, key) <= 12, "network", key, "must be in [0, 12]")
        need(self.refractory_hidden >= 0, "network", "refractory_hidden", "must be >= 0")
        need(self.refractory_output >= 0, "network", "refractory_output", "must be >= 0")
        need(0 <= self.hidden_init_mag <= 126, "network", "hidden_init_mag",
             "must be in [0, 126]")

        need(self.window >= 1, "plasticity", "window", "must be >= 1")
        need(self.error_threshold >= 0, "plasticity", "error_threshold", "must be >= 0")
        need(0 <= self.error_offset <= 127, "plasticity", "error_offset",
             "must be in [0, 127]")
        for key in ("alpha1_shift", "alpha2_shift"):
            need(1 <= getattr(self, key) <= 12, "plasticity", key, "must be in [1, 12]")
        need(self.alpha1_shift != self.alpha2_shift, "plasticity", "alpha2_shift",
             "must differ from alpha1_shift")
        for key in ("impulse1", "impulse2"):
            need(0 <= getattr(self, key) <= 127, "plasticity", key,
                 "must be in [0, 127]")
        need(self.box_low <= self.box_high, "plasticity", "box_high",
             "must be >= box_low")
        need(self.target_rate >= 0, "plasticity", "target_rate", "must be >= 0")
        need(self.off_target >= 0, "plasticity", "off_target", "must be >= 0")
        try:
            self.plasticity_config()
        except ValueError as err:
            raise ConfigError(f"[plasticity] learning_rate: {err}") from err

        need(self.clients >= 1, "federation", "clients", "must be >= 1")
        need(self.rounds >= 0, "federation", "rounds", "must be >= 0")
        need(self.local_epochs >= 0, "federation", "local_epochs", "must be >= 0")
        need(self.transport in ("inproc", "socket"), "federation", "transport",
             "must be 'inproc' or 'socket'")
        need(self.timeout_s > 0, "federation", "timeout_s", "must be > 0")

        need(1 <= self.classes <= NUM_SYNTHETIC_CLASSES, "data", "classes",
             f"must be in [1, {NUM_SYNTHETIC_CLASSES}]")
        need(self.width > 0 and self.height > 0, "data", "width", "must be > 0")
        need(self.duration_us > 0, "data", "duration_us", "must be > 0")
        need(self.step_us > 0, "data", "step_us", "must be > 0")
        need(self.dt_us > 0, "data", "dt_us", "must be > 0")
        need(self.noise_rate >= 0, "data", "noise_rate", "must be >= 0")
        need(self.test_size >= 0, "data", "test_size", "must be >= 0")

        need(self.master_seed >= 0, "seed", "master", "must be >= 0")

        try:
            topos = parse_arch(self.arch, self.classes)
        except ValueError as err:
            raise ConfigError(f"[network] arch: {err}") from err
        need(topos[0].in_shape == (self.height, self.width, 2), "network", "arch",
             f"input shape {topos[0].in_shape} does not match "
             f"{self.height}x{self.width}x2 event frames")

    # -- module-object builders ----------------------------------------

    def hidden_params(self) -> NeuronParams:
        return NeuronParams(current_decay_shift=self.current_decay_shift,
                            voltage_decay_shift=self.voltage_decay_shift,
                            threshold=self.hidden_threshold,
                            refractory_steps=self.refractory_hidden)

    def output_params(self) -> NeuronParams:
        return NeuronParams(current_decay_shift=self.current_decay_shift,
                            voltage_decay_shift=self.voltage_decay_shift,
                            threshold=self.output_threshold,
                            refractory_steps=self.refractory_output)

    def plasticity_config(self) -> PlasticityConfig:
        return PlasticityConfig(learning_rate=self.learning_rate,
                                box_enabled=self.box_enabled)

    def error_unit(self) -> ErrorUnit:
        return ErrorUnit(window=self.window, threshold=self.error_threshold,
                         offset=self.error_offset,
                         error_register=self.error_offset)

    def trace_template(self) -> TraceState:
        return TraceState(x1=0, x2=0,
                          alpha1_shift=self.alpha1_shift,
                          alpha2_shift=self.alpha2_shift,
                          impulse1=self.impulse1, impulse2=self.impulse2)

    def box_gate(self) -> BoxGate:
        return BoxGate(self.box_low, self.box_high)


_SCHEMA: dict[str, dict[str, str]] = {
    "network": {
        "arch": "arch",
        "hidden_threshold": "hidden_threshold",
        "output_threshold": "output_threshold",
        "current_decay_shift": "current_decay_shift",
        "voltage_decay_shift": "voltage_decay_shift",
        "refractory_hidden": "refractory_hidden",
        "refractory_output": "refractory_output",
        "hidden_init_mag": "hidden_init_mag",
    },
    "plasticity": {
        "window": "window",
        "error_threshold": "error_threshold",
        "error_offset": "error_offset",
        "learning_rate": "learning_rate",
        "alpha1_shift": "alpha1_shift",
        "alpha2_shift": "alpha2_shift",
        "impulse1": "impulse1",
        "impulse2": "impulse2",
        "box_enabled": "box_enabled",
        "box_low": "box_low",
        "box_high": "box_high",
        "target_rate": "target_rate",
        "off_target": "off_target",
    },
    "federation": {
        "clients": "clients",
        "rounds": "rounds",
        "local_epochs": "local_epochs",
        "transport": "transport",
        "listen": "listen",
        "timeout_s": "timeout_s",
    },
    "data": {
        "classes": "classes",
        "width": "width",
        "height": "height",
        "duration_us": "duration_us",
        "step_us": "step_us",
        "dt_us": "dt_us",
        "noise_rate": "noise_rate",
        "test_size": "test_size",
    },
    "seed": {
        "master": "master_seed",
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(section: str, key: str, attr: str, raw: str):
    kind = _FIELD_TYPES[attr]
    try:
        if attr == "learning_rate":
            return parse_fraction(raw)
        if attr == "listen":
            return parse_address(raw)
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ConfigError(f"expected a boolean, got {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ConfigError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from err
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from err


def load_config(path: str | None = None, overrides: dict[str, object] | None = None
                ) -> ExperimentConfig:
    """Build a validated config from defaults, an optional file, and overrides.

    overrides maps attribute names (e.g. "master_seed", "rounds") to already
    typed values; it is how command-line flags land on top of the file.
    """
    values: dict[str, object] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"[{section}] {key}: unknown key")
                attr = _SCHEMA[section][key]
                values[attr] = _convert(section, key, attr, raw)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize the resolved config back to its INI form."""
    parser = configparser.ConfigParser()
    for section, keys in _SCHEMA.items():
        parser[section] = {}
        for key, attr in keys.items():
            value = getattr(cfg, attr)
            if attr == "learning_rate":
                text = str(value)
            elif attr == "listen":
                text = f"{value[0]}:{value[1]}"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            parser[section][key] = text
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
