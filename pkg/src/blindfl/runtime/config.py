"""Experiment configuration files.

YAML mappings with a ``schema_version`` key.  Unknown keys, wrong types and
out-of-range values are rejected with the offending field and line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..fhe import FheParams, ParamError

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    clients: int = 10
    selected: int = 10
    coverage: int | None = None  # None means ceil(selected / 2)
    rounds: int = 20
    segmentation: bool = True
    fhe: str = "ckks"  # off | oracle | ckks
    ring_dim: int = 2**12
    scale_bits: int = 40
    chain_bits: tuple[int, ...] = (60, 40, 40, 60)
    epochs: int = 3
    lr: float = 0.5
    batch_size: int = 16
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    dataset: str = "digits"  # digits | blobs | idx
    samples: int = 2000
    noise: float = 0.25
    idx_images: str | None = None
    idx_labels: str | None = None
    test_fraction: float = 0.2
    seed: int = 0
    transport: str = "inprocess"  # inprocess | socket
    timeout: float = 30.0
    frame_cap: int = 64 * 2**20
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "chain_bits", tuple(self.chain_bits))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        self.validate()

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if not 2 <= self.selected <= self.clients:
            bad("selected", f"need 2 <= selected <= clients ({self.selected}, {self.clients})")
        if self.coverage is not None and not 1 <= self.coverage <= self.selected:
            bad("coverage", f"need 1 <= coverage <= selected, got {self.coverage}")
        if self.rounds < 1:
            bad("rounds", "must be positive")
        if self.fhe not in ("off", "oracle", "ckks"):
            bad("fhe", f"expected off, oracle or ckks, got {self.fhe!r}")
        if self.epochs < 0:
            bad("epochs", "must be nonnegative")
        if not self.lr > 0:
            bad("lr", "must be positive")
        if self.batch_size < 1:
            bad("batch_size", "must be positive")
        if any(h < 1 for h in self.hidden):
            bad("hidden", "widths must be positive")
        if self.activation not in ("relu", "tanh"):
            bad("activation", f"expected relu or tanh, got {self.activation!r}")
        if self.dataset not in ("digits", "blobs", "idx"):
            bad("dataset", f"expected digits, blobs or idx, got {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            bad("dataset", "idx needs idx_images and idx_labels")
        if self.samples < self.clients:
            bad("samples", "fewer samples than clients")
        if not 0 < self.test_fraction < 1:
            bad("test_fraction", "must lie strictly between 0 and 1")
        if not 0 <= self.seed < 2**64:
            bad("seed", "must fit in 64 unsigned bits")
        if self.transport not in ("inprocess", "socket"):
            bad("transport", f"expected inprocess or socket, got {self.transport!r}")
        if self.timeout <= 0:
            bad("timeout", "must be positive")
        if self.frame_cap < 64:
            bad("frame_cap", "too small to hold a frame")
        if self.fhe != "off":
            try:
                self.fhe_params()
            except ParamError as exc:
                bad("ring_dim", str(exc))

    @property
    def p(self) -> int:
        """Effective coverage quota."""
        if not self.segmentation:
            return self.selected
        return self.coverage if self.coverage is not None else math.ceil(self.selected / 2)

    def fhe_params(self) -> FheParams | None:
        if self.fhe == "off":
            return None
        security = "production" if self.ring_dim >= 2**14 else "test"
        return FheParams(self.fhe, self.ring_dim, self.scale_bits, self.chain_bits, security)

    def with_(self, **changes) -> "FederationConfig":
        return replace(self, **changes)

    @property
    def run_type(self) -> str:
        return {
            (False, False): "standard",
            (False, True): "fhe",
            (True, False): "cms",
            (True, True): "blindfl",
        }[(self.segmentation, self.fhe != "off")]


@dataclass(frozen=True)
class AttackConfig:
    widths: tuple[int, ...] = (64, 32, 16, 10)
    activation: str = "relu"
    n_values: tuple[int, ...] | None = None  # None sweeps 1..N
    trials: int = 15
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if self.n_values is not None:
            object.__setattr__(self, "n_values", tuple(self.n_values))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError("widths: need at least two positive widths")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"activation: expected relu or tanh, got {self.activation!r}")
        if self.trials < 1:
            raise ConfigError(f"trials: must be positive, got {self.trials}")
        if self.noise_std < 0:
            raise ConfigError("noise_std: must be nonnegative")
        N = len(self.widths) - 1
        if self.n_values is not None and any(not 0 <= n <= N for n in self.n_values):
            raise ConfigError(f"n_values: entries must lie in 0..{N}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must fit in 64 unsigned bits")

    @property
    def sweep(self) -> tuple[int, ...]:
        return self.n_values if self.n_values is not None else tuple(range(1, len(self.widths)))


# -- loading ----------------------------------------------------------------------------



def _field_kinds(cls) -> dict[str, Any]:
    return {f.name: f.type for f in fields(cls)}


def _coerce(name: str, ftype: str, value: Any, line: int):
    where = f"{name} (line {line})"

    def need(ok, what):
        if not ok:
            raise ConfigError(f"{where}: expected {what}, got {value!r}")

    optional = ftype.endswith("| None")
    base = ftype.replace(" | None", "")
    if value is None:
        need(optional, "a value")
        return None
    if base == "bool":
        need(isinstance(value, bool), "a boolean")
        return value
    if base == "int":
        need(isinstance(value, int) and not isinstance(value, bool), "an integer")
        return value
    if base == "float":
        need(isinstance(value, (int, float)) and not isinstance(value, bool), "a number")
        return float(value)
    if base == "str":
        if name in ("fhe",) and value is False:
            return "off"  # YAML reads a bare `off` as false
        need(isinstance(value, str), "a string")
        return value
    if base.startswith("tuple[int"):
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        need(isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value), "a list of integers")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def _parse(text: str, cls, source: str):
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark else ""
        raise ConfigError(f"{source}:{line} invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if node is None or not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}: top level must be a mapping")
    data = yaml.safe_load(text)
    lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    kinds = _field_kinds(cls)
    kwargs = {}
    for key, value in data.items():
        key = str(key)
        if key not in kinds:
            raise ConfigError(f"{source}: unknown key {key!r} (line {lines.get(key, '?')})")
        kwargs[key] = _coerce(key, kinds[key], value, lines.get(key, 0))
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        name = str(exc).split(":", 1)[0]
        raise ConfigError(f"{source}: {exc} (line {lines.get(name, '?')})") from None


def parse_federation_config(text: str, source: str = "<config>") -> FederationConfig:
    return _parse(text, FederationConfig, source)


def parse_attack_config(text: str, source: str = "<config>") -> AttackConfig:
    return _parse(text, AttackConfig, source)


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def load_federation_config(path) -> FederationConfig:
    return parse_federation_config(_read(path), str(path))


def load_attack_config(path) -> AttackConfig:
    return parse_attack_config(_read(path), str(path))


def dump_config(cfg) -> str:
    data = {"schema_version": SCHEMA_VERSION}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        data[f.name] = list(v) if isinstance(v, tuple) else v
    return yaml.safe_dump(data, sort_keys=False)
