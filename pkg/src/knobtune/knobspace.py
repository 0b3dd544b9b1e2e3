"""Knob schema, configuration points, and unit-cube normalization.

Every learning component in the engine works in normalized [0, 1] space;
physical units appear only at environment boundaries. A schema is an
ordered list of knob specs and is immutable once built, so it can be
shared freely across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

KNOB_KINDS = ("continuous", "integer")

# Tolerance for unit-vector inputs slightly outside [0, 1].
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class KnobSpec:
    """One tunable parameter: a physical range plus a default value."""

    name: str
    kind: str
    min: float
    max: float
    default: float

    def __post_init__(self):
        if self.kind not in KNOB_KINDS:
            raise ConfigError(
                f"knob {self.name!r}: unsupported kind {self.kind!r} "
                f"(only {', '.join(KNOB_KINDS)} are tunable; enumerated knobs are rejected)"
            )
        if not np.isfinite([self.min, self.max, self.default]).all():
            raise ConfigError(f"knob {self.name!r}: range and default must be finite")
        if not self.min < self.max:
            raise ConfigError(
                f"knob {self.name!r}: min must be strictly below max, got [{self.min}, {self.max}]"
            )
        if not self.min <= self.default <= self.max:
            raise ConfigError(
                f"knob {self.name!r}: default {self.default} outside [{self.min}, {self.max}]"
            )
        if self.kind == "integer":
            for label, v in (("min", self.min), ("max", self.max), ("default", self.default)):
                if v != int(v):
                    raise ConfigError(f"knob {self.name!r}: integer knob has non-integral {label} {v}")


@dataclass(frozen=True)
class MetricSpec:
    """One observable state indicator with its expected physical range."""

    name: str
    min: float
    max: float

    def __post_init__(self):
        if not np.isfinite([self.min, self.max]).all() or not self.min < self.max:
            raise ConfigError(f"metric {self.name!r}: bad range [{self.min}, {self.max}]")


class KnobSchema:
    """Ordered, validated collection of knob specs with cached range arrays."""

    def __init__(self, specs: Sequence[KnobSpec]):
        specs = tuple(specs)
        if not specs:
            raise ConfigError("schema must contain at least one knob")
        seen = set()
        for s in specs:
            if s.name in seen:
                raise ConfigError(f"duplicate knob name {s.name!r} in schema")
            seen.add(s.name)
        self.specs = specs
        self.names = tuple(s.name for s in specs)
        self.mins = np.array([s.min for s in specs], dtype=float)
        self.maxs = np.array([s.max for s in specs], dtype=float)
        self.defaults = np.array([s.default for s in specs], dtype=float)
        self.integer_mask = np.array([s.kind == "integer" for s in specs], dtype=bool)
        self._index = {s.name: i for i, s in enumerate(specs)}

    @property
    def size(self) -> int:
        return len(self.specs)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigError(f"unknown knob name {name!r}") from None

    def subset(self, indices: Sequence[int]) -> "KnobSchema":
        """Schema restricted to the given knob indices, in the given order."""
        for i in indices:
            if not 0 <= i < self.size:
                raise ConfigError(f"knob index {i} out of range for schema of size {self.size}")
        return KnobSchema([self.specs[i] for i in indices])

    def to_unit(self, values: np.ndarray) -> np.ndarray:
        """Map physical values (last axis ordered by schema) into [0, 1]."""
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.size:
            raise DataError(f"expected {self.size} knob values, got {values.shape[-1]}")
        if not np.isfinite(values).all():
            raise DataError("knob values must be finite")
        if (values < self.mins).any() or (values > self.maxs).any():
            bad = int(np.argmax((values < self.mins) | (values > self.maxs)).ravel()[0]) % self.size
            raise DataError(f"knob {self.names[bad]!r}: value outside [{self.mins[bad]}, {self.maxs[bad]}]")
        return (values - self.mins) / (self.maxs - self.mins)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        """Map unit-cube values back to physical units.

        Integer knobs are rounded half-up and clamped back into range, so
        the result always satisfies the schema bounds.
        """
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.size:
            raise DataError(f"expected {self.size} unit values, got {u.shape[-1]}")
        if (u < -UNIT_TOL).any() or (u > 1.0 + UNIT_TOL).any():
            raise DataError("unit vector has components outside [0, 1] beyond tolerance")
        u = np.clip(u, 0.0, 1.0)
        phys = self.mins + u * (self.maxs - self.mins)
        if self.integer_mask.any():
            rounded = np.floor(phys + 0.5)  # round half-up, order-independent
            phys = np.where(self.integer_mask, rounded, phys)
            phys = np.clip(phys, self.mins, self.maxs)
        return phys

    def validate_values(self, values: np.ndarray) -> None:
        """Raise unless values are in range and integral where required."""
        values = np.asarray(values, dtype=float)
        self.to_unit(values)  # bounds + finiteness
        if self.integer_mask.any():
            ints = values[..., self.integer_mask]
            if (ints != np.floor(ints)).any():
                raise DataError("integer knob holds a non-integral value")

    def __eq__(self, other):
        return isinstance(other, KnobSchema) and self.specs == other.specs

    def __repr__(self):
        return f"KnobSchema({self.size} knobs: {', '.join(self.names)})"


@dataclass(frozen=True, eq=False)
class KnobVector:
    """A concrete configuration point in physical units, ordered by schema."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


@dataclass(frozen=True, eq=False)
class MetricVector:
    """Observed internal state indicators of the target system."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "names", tuple(self.names))
        if self.values.shape != (len(self.names),):
            raise DataError("metric values and names disagree in length")
        if not np.isfinite(self.values).all():
            raise DataError("metric values must be finite")

    def value_of(self, name: str) -> float:
        try:
            return float(self.values[self.names.index(name)])
        except ValueError:
            raise DataError(f"metric {name!r} missing from state") from None


@dataclass(frozen=True, eq=False)
class PerfSample:
    """One measured data point: a configuration and its observed performance."""

    knobs: KnobVector
    throughput: float
    latency_p95: float
    metrics: MetricVector | None = None
    level: int | None = None

    def __post_init__(self):
        if not (self.throughput > 0 and self.latency_p95 > 0):
            raise DataError("throughput and latency_p95 must be positive")


def normalize(v: KnobVector, schema: KnobSchema) -> np.ndarray:
    """Physical configuration -> unit vector in [0, 1]^k."""
    return schema.to_unit(v.values)


def denormalize(u: np.ndarray, schema: KnobSchema) -> KnobVector:
    """Unit vector -> physical configuration (inverse of normalize).

    Integer knobs are rounded half-up then clamped, so the output always
    satisfies the KnobVector invariants.
    """
    return KnobVector(schema.from_unit(u))


def load_schema(path: str | Path) -> KnobSchema:
    """Read a knob schema from a JSON file.

    The file is a JSON array of objects with fields `name`, `kind`,
    `min`, `max`, `default`.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"schema file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"schema file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, list):
        raise ConfigError(f"schema file {path} must contain a JSON array of knob objects")
    specs = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"schema entry {i} is not an object")
        missing = {"name", "kind", "min", "max", "default"} - set(item)
        if missing:
            raise ConfigError(f"schema entry {i} missing fields: {', '.join(sorted(missing))}")
        specs.append(
            KnobSpec(
                name=str(item["name"]),
                kind=str(item["kind"]),
                min=float(item["min"]),
                max=float(item["max"]),
                default=float(item["default"]),
            )
        )
    return KnobSchema(specs)


def save_schema(schema: KnobSchema, path: str | Path) -> None:
    """Write a schema back out in the format `load_schema` reads."""
    doc = [
        {"name": s.name, "kind": s.kind, "min": s.min, "max": s.max, "default": s.default}
        for s in schema.specs
    ]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
