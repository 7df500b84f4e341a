"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Lists are comma separated
(``tap_layers = 1,2,3,4``), SKD components are letters
(``enabled_skd = B,P,R`` or ``none``), booleans are ``true``/``false``.
Unknown or duplicated keys and invalid values are rejected with the line
number that caused them.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

METHODS = ("fedskd", "fedcross", "fedcross_dagger", "fedavg", "fedprox", "fedbn", "local", "centralized")
P2P_METHODS = ("fedskd", "fedcross", "fedcross_dagger", "local", "centralized")
PARTITIONERS = ("dirichlet", "stratified", "iid")


@dataclass
class ExperimentConfig:
    method: str = "fedskd"
    n_clients: int = 3
    model_family: str = "tinycnn"
    base_width: int = 16
    width_step: int = 2
    num_classes: int = 2
    in_channels: int = 1
    input_size: tuple = (16, 16)
    rounds: int = 30
    iters_per_round: int = 0  # 0: 5*N for peer-to-peer/local methods, 5 for server-based ones
    gamma: float = 1.0
    enabled_skd: frozenset = frozenset({"B", "P", "R"})
    tap_layers: tuple = (1, 2, 3, 4)
    skd_start_fraction: float = 0.0
    partitioner: str = "dirichlet"
    alpha: float = 0.5
    sites_per_client: int = 1
    dataset: str = "synthetic"  # or a path to a CSV manifest
    samples_per_client: int = 60
    per_client_shift: float = 0.5
    synth_signal: float = 0.35
    synth_nuisance: float = 0.5
    synth_noise: float = 1.0
    region_grid: tuple = (2, 2)
    region_masks: str = ""  # optional mask file; overrides region_grid
    lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    folds: int = 1
    test_fraction: float = 0.2
    output_dir: str = "runs"
    mu: float = 0.01
    row_eps: float = 0.0
    pixel_norm_literal: bool = False
    fedcross_replicas: bool = False
    eval_every: int = 0
    workers: int = 1

    def resolved_iters(self) -> int:
        if self.iters_per_round > 0:
            return self.iters_per_round
        return 5 * self.n_clients if self.method in P2P_METHODS else 5

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self, lines: dict[str, int] | None = None) -> None:
        lines = lines or {}

        def fail(key, msg):
            raise ConfigError(f"{key}: {msg}", lines.get(key))

        if self.method not in METHODS:
            fail("method", f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.partitioner not in PARTITIONERS:
            fail("partitioner", f"unknown partitioner {self.partitioner!r}")
        if self.model_family not in ("resnet10", "tinycnn"):
            fail("model_family", f"unknown family {self.model_family!r}")
        for key in ("n_clients", "num_classes", "in_channels", "batch_size", "folds", "sites_per_client",
                    "samples_per_client", "workers"):
            if getattr(self, key) < 1:
                fail(key, "must be >= 1")
        if self.num_classes < 2:
            fail("num_classes", "must be >= 2")
        for key in ("rounds", "iters_per_round", "eval_every", "seed", "width_step"):
            if getattr(self, key) < 0:
                fail(key, "must be >= 0")
        if self.base_width - self.width_step * (self.n_clients - 1) < 4:
            fail("width_step", "smallest client width would fall below 4")
        if not 0 <= self.skd_start_fraction < 1:
            fail("skd_start_fraction", "must lie in [0, 1)")
        if self.alpha <= 0:
            fail("alpha", "must be positive")
        if self.lr <= 0:
            fail("lr", "must be positive")
        for key in ("gamma", "mu", "row_eps", "per_client_shift", "synth_noise"):
            if getattr(self, key) < 0:
                fail(key, "must be non-negative")
        if not 0 < self.test_fraction < 1:
            fail("test_fraction", "must lie in (0, 1)")
        if not self.enabled_skd <= {"B", "P", "R"}:
            fail("enabled_skd", "components must be drawn from B, P, R")
        if not self.tap_layers or not set(self.tap_layers) <= {1, 2, 3, 4}:
            fail("tap_layers", "must be a non-empty subset of 1,2,3,4")
        if len(self.input_size) not in (2, 3):
            fail("input_size", "needs 2 or 3 spatial dims")
        if len(self.region_grid) != len(self.input_size):
            fail("region_grid", "rank must match input_size")

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            out.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(out) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:10]


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, frozenset):
        return ",".join(sorted(v)) if v else "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(key: str, raw: str, line=None):
    default = _FIELDS[key].default if _FIELDS[key].default is not dataclasses.MISSING else None
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, frozenset):
            if raw.lower() in ("", "none"):
                return frozenset()
            parts = [p.strip().upper() for p in raw.replace(",", " ").split()]
            if len(parts) == 1 and len(parts[0]) > 1:
                parts = list(parts[0])
            return frozenset(parts)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace("x", ",").replace("-", ",").split(",") if p.strip())
        return raw
    except ValueError as err:
        raise ConfigError(f"{key}: {err}", line) from None


def parse_config_text(text: str, overrides=()) -> ExperimentConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno)
        values[key] = _parse_value(key, value, lineno)
        lines[key] = lineno
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = _parse_value(key, value)
        lines.pop(key, None)
    cfg = ExperimentConfig(**values)
    cfg.validate(lines)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), overrides)
