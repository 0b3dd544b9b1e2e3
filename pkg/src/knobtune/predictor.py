"""Performance-level prediction from knob configurations.

A sampled corpus of (configuration, throughput) measurements is turned
into a five-level ordinal dataset by throughput quintile, and a
differentiable tree is trained on it with cross-entropy and Adam. The
trained model exposes a level distribution per configuration and a
scalar expected-level score used as the attribution target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, RuntimeFailure
from .knobspace import KnobSchema, KnobVector, PerfSample
from .optim import Adam
from .softtree import SoftTree, backward, forward, softmax

N_LEVELS = 5
LEVEL_NAMES = ("poor", "below_average", "average", "above_average", "excellent")

_PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LevelDataset:
    """Normalized configurations with throughput-quintile level labels."""

    inputs: np.ndarray  # (n, k) in [0, 1]
    labels: np.ndarray  # (n,) ints in 0..4
    cut_points: np.ndarray  # the four throughput percentiles used


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")


def build_dataset(samples: Sequence[PerfSample], schema: KnobSchema) -> LevelDataset:
    """Assign levels by throughput quintile and normalize the knobs.

    Cut points sit at the 20/40/60/80 throughput percentiles; a sample's
    level is the number of cut points its throughput exceeds. If every
    throughput is identical the corpus is uninformative and all samples
    get the middle level.
    """
    if not samples:
        raise DataError("cannot build a dataset from zero samples")
    if len(samples) < 5:
        raise DataError(f"need at least 5 samples to assign quintile levels, got {len(samples)}")
    tps = np.array([s.throughput for s in samples], dtype=float)
    if (tps <= 0).any():
        raise DataError("all samples must have positive throughput")
    inputs = np.stack([schema.to_unit(s.knobs.values) for s in samples])
    if tps.max() == tps.min():
        labels = np.full(len(samples), 2, dtype=int)
        cuts = np.full(4, tps[0])
    else:
        cuts = np.percentile(tps, [20, 40, 60, 80])
        labels = (tps[:, None] > cuts[None, :]).sum(axis=1)
    return LevelDataset(inputs=inputs, labels=labels.astype(int), cut_points=cuts)


def _level_probs(tree: SoftTree, x: np.ndarray) -> np.ndarray:
    leaf_values = softmax(tree.leaves) if tree.leaf_softmax else None
    return forward(tree, x, leaf_values=leaf_values).output


def _dataset_loss(tree: SoftTree, data: LevelDataset) -> float:
    p = _level_probs(tree, data.inputs)
    picked = p[np.arange(len(data.labels)), data.labels]
    return float(-np.log(np.clip(picked, _PROB_FLOOR, None)).mean())


def train_predictor(
    tree: SoftTree, data: LevelDataset, cfg: TrainConfig
) -> tuple[SoftTree, list[float]]:
    """Train the tree as a level classifier; returns (model, loss history).

    The loss history holds the full-dataset cross-entropy before training
    and after each epoch, so history[0] reflects the initialization alone.
    With zero epochs the input tree is returned unchanged. Deterministic
    for a fixed (tree, data, config) triple.
    """
    if tree.output_dim != N_LEVELS:
        raise ConfigError(f"predictor tree must emit {N_LEVELS} levels, got {tree.output_dim}")
    if data.inputs.shape[1] != tree.input_dim:
        raise DataError(
            f"dataset has {data.inputs.shape[1]} knobs but tree expects {tree.input_dim}"
        )
    if cfg.epochs == 0:
        return tree, []

    work = tree.copy()
    # From here on the leaves live in logit space: predictions project them
    # through a softmax, which keeps the expert one-hot rows as the mode
    # while making cross-entropy well-defined as they drift.
    work.leaf_softmax = True

    # Gate steepness stays a fixed hyperparameter for the classifier.
    opt = Adam(
        [work.weights, work.thresholds, work.leaves],
        lr=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )
    rng = np.random.default_rng(cfg.seed)
    n = data.inputs.shape[0]
    history = [_dataset_loss(work, data)]

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = data.inputs[idx], data.labels[idx]
            leaf_probs = softmax(work.leaves)
            trace = forward(work, xb, leaf_values=leaf_probs)
            p = np.clip(trace.output, _PROB_FLOOR, None)
            grad_out = np.zeros_like(p)
            rows = np.arange(len(idx))
            grad_out[rows, yb] = -1.0 / (p[rows, yb] * len(idx))
            grads = backward(work, trace, grad_out)
            # Chain the leaf gradient through the per-row softmax projection.
            gl = grads.leaves
            grads.leaves = leaf_probs * (gl - (gl * leaf_probs).sum(axis=1, keepdims=True))
            opt.step([grads.weights, grads.thresholds, grads.leaves])
            work.mark_mutated()
        loss = _dataset_loss(work, data)
        if not np.isfinite(loss):
            raise RuntimeFailure(
                f"training diverged: loss became non-finite at epoch {epoch + 1} "
                f"(lr={cfg.learning_rate}, batch={cfg.batch_size})"
            )
        history.append(loss)
    return work, history


def predict_level(tree: SoftTree, knobs_normalized: np.ndarray) -> np.ndarray:
    """Distribution over the five performance levels for a configuration.

    Works on a single normalized vector or a batch. Trained trees project
    their leaves through a softmax; expert-initialized trees carry level
    distributions directly and are validated as such.
    """
    if tree.output_dim != N_LEVELS:
        raise DataError(f"tree emits {tree.output_dim} values, expected {N_LEVELS} levels")
    if not tree.leaf_softmax:
        sums = tree.leaves.sum(axis=1)
        if (tree.leaves < -1e-9).any() or not np.allclose(sums, 1.0, atol=1e-9):
            raise DataError(
                "tree leaves are not level distributions; train the tree or "
                "initialize it from expert rules"
            )
    return _level_probs(tree, knobs_normalized)


def predict_score(tree: SoftTree, knobs_normalized: np.ndarray) -> float | np.ndarray:
    """Expected performance level in [0, 4] (the attribution target)."""
    p = predict_level(tree, knobs_normalized)
    score = p @ np.arange(N_LEVELS, dtype=float)
    return float(score) if np.ndim(score) == 0 else score


def accuracy(tree: SoftTree, data: LevelDataset) -> float:
    p = predict_level(tree, data.inputs)
    return float((p.argmax(axis=1) == data.labels).mean())


# -- dataset files ------------------------------------------------------------

_PERF_COLUMNS = ("throughput_tps", "latency_p95_ms")


def save_dataset(path: str | Path, schema: KnobSchema, samples: Sequence[PerfSample]) -> None:
    """Write measurements as CSV: one knob column per schema entry, then
    throughput_tps and latency_p95_ms."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(schema.names) + list(_PERF_COLUMNS))
        for s in samples:
            schema.validate_values(s.knobs.values)
            writer.writerow(
                [repr(float(v)) for v in s.knobs.values]
                + [repr(float(s.throughput)), repr(float(s.latency_p95))]
            )


def load_dataset(path: str | Path, schema: KnobSchema) -> list[PerfSample]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None
    if not rows:
        raise DataError(f"dataset file {path} is empty")
    expected = list(schema.names) + list(_PERF_COLUMNS)
    if rows[0] != expected:
        raise DataError(
            f"dataset header does not match schema: expected {expected}, got {rows[0]}"
        )
    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise DataError(f"dataset line {lineno}: expected {len(expected)} columns")
        try:
            values = [float(v) for v in row]
        except ValueError:
            raise DataError(f"dataset line {lineno}: non-numeric value") from None
        samples.append(
            PerfSample(
                knobs=KnobVector(values[: schema.size]),
                throughput=values[-2],
                latency_p95=values[-1],
            )
        )
    return samples
