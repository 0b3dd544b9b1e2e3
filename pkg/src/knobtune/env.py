"""Environments the tuning loop runs against.

`SimEnv` is a deterministic synthetic stand-in for a real DBMS with
planted ground truth: a chosen subset of knobs influences throughput
through a smooth unimodal response, the rest have provably zero effect,
and latency moves inversely to throughput. It serves as the test oracle
for knob selection and tuning.

`AdapterEnv` wraps any real system behind a one-shot-per-step
subprocess protocol: the adapter command receives a JSON request on
stdin and must print a JSON response with metrics, throughput, and
latency.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, DataError, RuntimeFailure
from .knobspace import KnobSchema, KnobVector, MetricSpec, MetricVector, load_schema

N_LOAD_FEATURES = 2
THROUGHPUT_FLOOR_FRACTION = 1e-6


class Environment(Protocol):
    """What the tuning loop needs from a target system."""

    metric_names: tuple[str, ...]

    def metric_bounds(self) -> tuple[np.ndarray, np.ndarray]: ...

    def reset(self) -> tuple[MetricVector, float, float]: ...

    def step(self, knobs: KnobVector) -> tuple[MetricVector, float, float]: ...


@dataclass(frozen=True)
class InfluentialKnob:
    """Planted ground truth for one knob: where its optimum sits and how
    strongly it moves throughput."""

    index: int
    optimum: float
    strength: float

    def __post_init__(self):
        if not 0.0 <= self.optimum <= 1.0:
            raise ConfigError(f"influential knob {self.index}: optimum must lie in [0, 1]")
        if not self.strength > 0:
            raise ConfigError(f"influential knob {self.index}: strength must be positive")


@dataclass(frozen=True, eq=False)
class SimEnvConfig:
    schema: KnobSchema
    influential: tuple[InfluentialKnob, ...]
    t0: float = 100.0
    l0: float = 20.0
    noise_std: float = 0.0
    metric_noise_std: float = 0.01
    n_metrics: int = 8
    seed: int = 0
    mixing: np.ndarray | None = None
    metric_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.influential:
            raise ConfigError("simulated environment needs at least one influential knob")
        idxs = [k.index for k in self.influential]
        if len(set(idxs)) != len(idxs):
            raise ConfigError("influential knob indices must be unique")
        for i in idxs:
            if not 0 <= i < self.schema.size:
                raise ConfigError(f"influential knob index {i} outside schema of size {self.schema.size}")
        if not (self.t0 > 0 and self.l0 > 0):
            raise ConfigError("base throughput and latency must be positive")
        if self.noise_std < 0 or self.metric_noise_std < 0:
            raise ConfigError("noise levels must be non-negative")
        mixing = self.mixing
        if mixing is None:
            rng = np.random.default_rng(self.seed)
            mixing = rng.normal(0.0, 1.0, (self.n_metrics, self.schema.size + N_LOAD_FEATURES))
            mixing[:, -N_LOAD_FEATURES:] *= 2.0  # let performance leak clearly into the state
        else:
            mixing = np.asarray(mixing, dtype=float)
            if mixing.shape != (self.n_metrics, self.schema.size + N_LOAD_FEATURES):
                raise ConfigError(
                    f"mixing matrix must have shape "
                    f"({self.n_metrics}, {self.schema.size + N_LOAD_FEATURES})"
                )
        object.__setattr__(self, "mixing", mixing)
        names = self.metric_names or tuple(f"metric_{i}" for i in range(self.n_metrics))
        if len(names) != self.n_metrics:
            raise ConfigError("metric_names length must match n_metrics")
        object.__setattr__(self, "metric_names", tuple(names))


def _quadratic_gap(cfg: SimEnvConfig, u: np.ndarray) -> float:
    return float(sum(k.strength * (u[k.index] - k.optimum) ** 2 for k in cfg.influential))


def noise_free_throughput(cfg: SimEnvConfig, u: np.ndarray) -> float:
    """Throughput with the noise stream switched off."""
    total = sum(k.strength for k in cfg.influential)
    return cfg.t0 * float(np.exp(total - _quadratic_gap(cfg, u)))


def sim_step(
    cfg: SimEnvConfig, knobs_unit: np.ndarray, step_index: int
) -> tuple[MetricVector, float, float]:
    """One deployment of a normalized configuration.

    Pure function of (config, knobs, step index): the noise stream is a
    seeded generator keyed by the step index. Throughput follows a smooth
    unimodal response in the influential knobs only; latency scales
    inversely with the noise-free throughput; metrics are a linear mix of
    the knobs and two load features plus small noise.
    """
    u = np.asarray(knobs_unit, dtype=float)
    if u.shape != (cfg.schema.size,):
        raise DataError(f"expected {cfg.schema.size} normalized knobs, got shape {u.shape}")
    if (u < 0).any() or (u > 1).any():
        raise DataError("normalized knobs outside [0, 1]")

    rng = np.random.default_rng([cfg.seed, step_index])
    tp_clean = noise_free_throughput(cfg, u)
    tp_default = noise_free_throughput(cfg, cfg.schema.to_unit(cfg.schema.defaults))
    throughput = tp_clean * (1.0 + rng.normal(0.0, cfg.noise_std)) if cfg.noise_std else tp_clean
    throughput = max(throughput, THROUGHPUT_FLOOR_FRACTION * cfg.t0)
    latency_clean = cfg.l0 * tp_default / tp_clean
    latency = latency_clean * (1.0 + rng.normal(0.0, cfg.noise_std)) if cfg.noise_std else latency_clean
    latency = max(latency, THROUGHPUT_FLOOR_FRACTION * cfg.l0)

    gap = _quadratic_gap(cfg, u)
    load = np.array([np.exp(-gap), gap / (1.0 + gap)])
    values = cfg.mixing @ np.concatenate([u, load])
    if cfg.metric_noise_std:
        values = values + rng.normal(0.0, cfg.metric_noise_std, values.shape)
    return MetricVector(values, cfg.metric_names), float(throughput), float(latency)


def planted_optimum(cfg: SimEnvConfig) -> tuple[np.ndarray, float]:
    """The known-best normalized configuration and its noise-free throughput.

    Influential knobs sit at their optima; the rest keep schema defaults.
    """
    u = cfg.schema.to_unit(cfg.schema.defaults)
    for k in cfg.influential:
        u[k.index] = k.optimum
    total = sum(k.strength for k in cfg.influential)
    return u, cfg.t0 * float(np.exp(total))


def metric_bounds(cfg: SimEnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-metric value ranges from interval arithmetic over the mixer."""
    lo = np.minimum(cfg.mixing, 0.0).sum(axis=1) - 4.0 * cfg.metric_noise_std
    hi = np.maximum(cfg.mixing, 0.0).sum(axis=1) + 4.0 * cfg.metric_noise_std
    return lo, hi


class SimEnv:
    """Stateful wrapper: tracks the step counter so episodes replay exactly."""

    def __init__(self, cfg: SimEnvConfig):
        self.cfg = cfg
        self.metric_names = cfg.metric_names
        self._counter = 0

    @property
    def schema(self) -> KnobSchema:
        return self.cfg.schema

    def metric_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return metric_bounds(self.cfg)

    def reset(self) -> tuple[MetricVector, float, float]:
        """Deploy schema defaults; returns the initial state and performance."""
        self._counter = 0
        u = self.cfg.schema.to_unit(self.cfg.schema.defaults)
        out = sim_step(self.cfg, u, self._counter)
        self._counter += 1
        return out

    def step(self, knobs: KnobVector) -> tuple[MetricVector, float, float]:
        self.cfg.schema.validate_values(knobs.values)
        u = self.cfg.schema.to_unit(knobs.values)
        out = sim_step(self.cfg, u, self._counter)
        self._counter += 1
        return out

    def noise_free_throughput(self, knobs_unit: np.ndarray) -> float:
        return noise_free_throughput(self.cfg, knobs_unit)


def load_sim_config(path: str | Path) -> SimEnvConfig:
    """Read a simulated-environment config file.

    JSON object with: `schema` (path to a knob schema, relative paths
    resolved against the config file), `influential` (list of
    {index, optimum, strength}), `t0`, `l0`, `noise_std`, `seed`, and
    optionally `n_metrics`, `metric_noise_std`, `metric_names`, `mixing`.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"environment config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"environment config {path} is not valid JSON: {e}") from None
    try:
        schema_path = Path(doc["schema"])
        if not schema_path.is_absolute():
            schema_path = path.parent / schema_path
        schema = load_schema(schema_path)
        influential = tuple(
            InfluentialKnob(int(e["index"]), float(e["optimum"]), float(e["strength"]))
            for e in doc["influential"]
        )
        return SimEnvConfig(
            schema=schema,
            influential=influential,
            t0=float(doc.get("t0", 100.0)),
            l0=float(doc.get("l0", 20.0)),
            noise_std=float(doc.get("noise_std", 0.0)),
            metric_noise_std=float(doc.get("metric_noise_std", 0.01)),
            n_metrics=int(doc.get("n_metrics", 8)),
            seed=int(doc.get("seed", 0)),
            mixing=np.array(doc["mixing"], dtype=float) if "mixing" in doc else None,
            metric_names=tuple(doc["metric_names"]) if "metric_names" in doc else None,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"environment config {path} is malformed: {e}") from None


# -- subprocess adapter -------------------------------------------------------

_REQUIRED_RESPONSE_FIELDS = ("metrics", "throughput_tps", "latency_p95_ms")


def adapter_step(
    cmd: Sequence[str], knobs: dict[str, float], timeout: float
) -> tuple[MetricVector, float, float]:
    """Deploy one configuration through an adapter command.

    Writes `{"knobs": {name: value, ...}}` to the adapter's stdin and
    expects `{"metrics": {...}, "throughput_tps": x, "latency_p95_ms": y}`
    on stdout. Timeout, non-zero exit, and malformed responses are
    reported as distinct runtime failures.
    """
    request = json.dumps({"knobs": dict(knobs)})
    try:
        proc = subprocess.run(
            list(cmd),
            input=request,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        raise RuntimeFailure(f"adapter timed out after {timeout}s: {' '.join(cmd)}") from None
    except OSError as e:
        raise RuntimeFailure(f"adapter could not be spawned: {e}") from None
    if proc.returncode != 0:
        detail = proc.stderr.strip().splitlines()[-1] if proc.stderr.strip() else "no stderr"
        raise RuntimeFailure(f"adapter exited with code {proc.returncode}: {detail}")
    try:
        doc = json.loads(proc.stdout)
    except json.JSONDecodeError:
        raise RuntimeFailure("adapter response is not valid JSON") from None
    for field_name in _REQUIRED_RESPONSE_FIELDS:
        if field_name not in doc:
            raise RuntimeFailure(f'adapter response missing "{field_name}"')
    metrics = doc["metrics"]
    if not isinstance(metrics, dict) or not metrics:
        raise RuntimeFailure('adapter response "metrics" must be a non-empty object')
    throughput = float(doc["throughput_tps"])
    latency = float(doc["latency_p95_ms"])
    if not (throughput > 0 and latency > 0):
        raise RuntimeFailure(
            f"adapter reported non-positive performance: "
            f"throughput_tps={throughput}, latency_p95_ms={latency}"
        )
    names = tuple(metrics.keys())
    values = np.array([float(metrics[n]) for n in names])
    return MetricVector(values, names), throughput, latency


@dataclass(frozen=True, eq=False)
class AdapterEnvConfig:
    cmd: tuple[str, ...]
    schema: KnobSchema
    metrics: tuple[MetricSpec, ...]
    timeout_s: float = 120.0

    def __post_init__(self):
        if not self.cmd:
            raise ConfigError("adapter command must not be empty")
        if not self.metrics:
            raise ConfigError("adapter environment must declare its metric schema")
        if not self.timeout_s > 0:
            raise ConfigError("adapter timeout must be positive")


class AdapterEnv:
    """Environment over a subprocess adapter, with a declared metric schema."""

    def __init__(self, cfg: AdapterEnvConfig):
        self.cfg = cfg
        self.metric_names = tuple(m.name for m in cfg.metrics)

    @property
    def schema(self) -> KnobSchema:
        return self.cfg.schema

    def metric_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([m.min for m in self.cfg.metrics])
        hi = np.array([m.max for m in self.cfg.metrics])
        return lo, hi

    def _call(self, values: np.ndarray) -> tuple[MetricVector, float, float]:
        knobs = {name: float(v) for name, v in zip(self.cfg.schema.names, values)}
        raw, throughput, latency = adapter_step(self.cfg.cmd, knobs, self.cfg.timeout_s)
        try:
            ordered = np.array([raw.value_of(name) for name in self.metric_names])
        except DataError as e:
            raise RuntimeFailure(f"adapter response missing a declared metric: {e}") from None
        return MetricVector(ordered, self.metric_names), throughput, latency

    def reset(self) -> tuple[MetricVector, float, float]:
        return self._call(self.cfg.schema.defaults)

    def step(self, knobs: KnobVector) -> tuple[MetricVector, float, float]:
        self.cfg.schema.validate_values(knobs.values)
        return self._call(knobs.values)


def load_adapter_config(path: str | Path, cmd_override: Sequence[str] | None = None) -> AdapterEnvConfig:
    """Read an adapter-environment config: `adapter_cmd` (list of strings),
    `schema` (path), `metrics` (list of {name, min, max}), `timeout_s`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"environment config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"environment config {path} is not valid JSON: {e}") from None
    try:
        schema_path = Path(doc["schema"])
        if not schema_path.is_absolute():
            schema_path = path.parent / schema_path
        cmd = tuple(cmd_override) if cmd_override else tuple(str(c) for c in doc["adapter_cmd"])
        metrics = tuple(
            MetricSpec(str(m["name"]), float(m["min"]), float(m["max"])) for m in doc["metrics"]
        )
        return AdapterEnvConfig(
            cmd=cmd,
            schema=load_schema(schema_path),
            metrics=metrics,
            timeout_s=float(doc.get("timeout_s", 120.0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"environment config {path} is malformed: {e}") from None
