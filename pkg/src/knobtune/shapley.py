"""Shapley attributions for knob importance.

Three layers: an exact oracle that enumerates every coalition, a
kernel-weighted least-squares approximation for larger feature counts,
and a global ranking that averages absolute attributions across a
dataset to pick the knobs worth tuning.

Coalitions are plain binary masks (one entry per feature). A model is
any callable mapping a feature vector to a scalar; callables that also
accept an (n, M) batch and return (n,) values are evaluated in batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, RuntimeFailure

MAX_EXACT_FEATURES = 20
DEFAULT_BUDGET_CAP = 2048
_EVAL_CHUNK = 16384


@dataclass(frozen=True, eq=False)
class Attribution:
    """Base value plus one additive contribution per feature.

    Satisfies efficiency: base + contributions.sum() equals the model
    output at the explained point (up to solver tolerance).
    """

    base: float
    contributions: np.ndarray


@dataclass(frozen=True, eq=False)
class ImportanceReport:
    """Mean absolute attribution per feature, with a descending ranking.

    Ties in the importance values are broken by ascending feature index.
    """

    importance: np.ndarray
    ranking: np.ndarray


def _eval_model(model: Callable, points: np.ndarray) -> np.ndarray:
    """Evaluate a scalar model on (n, M) points, batched when possible."""
    try:
        out = np.asarray(model(points), dtype=float)
        if out.shape == (points.shape[0],):
            values = out
        else:
            raise TypeError
    except Exception:
        values = np.array([float(model(p)) for p in points], dtype=float)
    if not np.isfinite(values).all():
        raise RuntimeFailure("model produced a non-finite output during attribution")
    return values


def exact_shapley(
    model: Callable, x: np.ndarray, background: np.ndarray, m: int
) -> Attribution:
    """Exact attributions by enumerating all 2^m coalitions.

    Features outside a coalition are replaced by the background values.
    The base value is the model output on the full background point.
    """
    x = np.asarray(x, dtype=float)
    background = np.asarray(background, dtype=float)
    if x.shape != (m,) or background.shape != (m,):
        raise DataError(f"x and background must both have {m} features")
    if m > MAX_EXACT_FEATURES:
        raise ConfigError(
            f"exact enumeration over {m} features would need 2^{m} model calls; "
            f"limit is {MAX_EXACT_FEATURES}"
        )
    n_masks = 2**m
    bits = (np.arange(n_masks)[:, None] >> np.arange(m)[None, :]) & 1
    points = np.where(bits.astype(bool), x[None, :], background[None, :])
    values = _eval_model(model, points)

    sizes = bits.sum(axis=1)
    # weight of a coalition S (not containing j): |S|! (m - |S| - 1)! / m!
    size_weight = np.array(
        [math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)]
    )
    phi = np.zeros(m)
    mask_ids = np.arange(n_masks)
    for j in range(m):
        without_j = (bits[:, j] == 0)
        ids = mask_ids[without_j]
        gain = values[ids + (1 << j)] - values[ids]
        phi[j] = float((size_weight[sizes[ids]] * gain).sum())
    return Attribution(base=float(values[0]), contributions=phi)


def kernel_weight(m: int, s: int) -> float:
    """Weight of a coalition of size s among m features.

    Defined for proper coalitions only; the empty and full coalitions
    carry infinite weight and are handled as exact constraints instead.
    """
    if not 0 < s < m:
        raise ConfigError(
            f"kernel weight undefined for coalition size {s} of {m} "
            "(the endpoints are enforced as constraints)"
        )
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _size_distribution(m: int) -> np.ndarray:
    """Probability of drawing each coalition size, proportional to the
    total kernel weight carried by that size."""
    mass = np.array([(m - 1) / (s * (m - s)) for s in range(1, m)])
    return mass / mass.sum()


def _sample_coalitions(m: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    probs = _size_distribution(m)
    seen: set[bytes] = set()
    rows: list[np.ndarray] = []
    attempts = 0
    max_attempts = 200 * budget
    while len(rows) < budget and attempts < max_attempts:
        attempts += 1
        s = 1 + rng.choice(m - 1, p=probs)
        mask = np.zeros(m, dtype=np.int8)
        mask[rng.permutation(m)[:s]] = 1
        key = mask.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(mask)
    return np.array(rows, dtype=np.int8)


def _enumerate_proper(m: int) -> np.ndarray:
    bits = (np.arange(2**m)[:, None] >> np.arange(m)[None, :]) & 1
    return bits[1:-1].astype(np.int8)


def _masked_means(
    model: Callable, x: np.ndarray, masks: np.ndarray, background_set: np.ndarray
) -> np.ndarray:
    """For each mask, model output averaged over background imputations."""
    n_bg = background_set.shape[0]
    out = np.empty(masks.shape[0])
    stride = max(1, _EVAL_CHUNK // n_bg)
    for start in range(0, masks.shape[0], stride):
        chunk = masks[start : start + stride].astype(bool)
        points = np.where(
            chunk[:, None, :], x[None, None, :], background_set[None, :, :]
        ).reshape(-1, x.size)
        vals = _eval_model(model, points).reshape(chunk.shape[0], n_bg)
        out[start : start + chunk.shape[0]] = vals.mean(axis=1)
    return out


def kernel_shap(
    model: Callable,
    x: np.ndarray,
    background_set: np.ndarray,
    budget: int | str | None = None,
    seed: int = 0,
) -> Attribution:
    """Kernel-weighted least-squares attributions.

    Fits an additive surrogate over coalition masks: masked-out features
    are imputed by averaging the model over the background rows, each
    coalition is weighted by `kernel_weight`, and the surrogate is
    constrained to hit the all-background mean at the empty coalition and
    the true model output at the full one (so efficiency holds exactly).

    ``budget`` counts distinct proper coalitions; "full" (or any budget
    covering them all) enumerates every proper coalition, which makes the
    result match `exact_shapley`. Default: min(2^M - 2, 2048).
    """
    x = np.asarray(x, dtype=float)
    background_set = np.atleast_2d(np.asarray(background_set, dtype=float))
    m = x.shape[0]
    if background_set.shape[1] != m:
        raise DataError("background rows must have the same feature count as x")
    base = float(_eval_model(model, background_set).mean())
    fx = float(_eval_model(model, x[None, :])[0])

    if m == 1:
        return Attribution(base=base, contributions=np.array([fx - base]))

    n_proper = 2**m - 2
    if budget is None:
        budget = min(n_proper, DEFAULT_BUDGET_CAP)
    full = budget == "full" or (isinstance(budget, int) and budget >= n_proper)
    if full:
        if m > MAX_EXACT_FEATURES:
            raise ConfigError(f"full enumeration not feasible for {m} features")
        masks = _enumerate_proper(m)
    else:
        if not isinstance(budget, int):
            raise ConfigError(f"budget must be an integer or 'full', got {budget!r}")
        if budget < m + 2:
            raise ConfigError(f"budget {budget} too small; need at least {m + 2} coalitions")
        masks = _sample_coalitions(m, budget, np.random.default_rng(seed))

    f_masked = _masked_means(model, x, masks, background_set)
    sizes = masks.sum(axis=1)
    weights = np.array([kernel_weight(m, int(s)) for s in sizes])

    # Eliminate the last contribution using the efficiency constraint, then
    # solve the weighted least squares for the remaining m - 1.
    z = masks.astype(float)
    a = z[:, :-1] - z[:, -1:]
    y = f_masked - base - z[:, -1] * (fx - base)
    sw = np.sqrt(weights)
    head, _, rank, _ = np.linalg.lstsq(a * sw[:, None], y * sw, rcond=None)
    if rank < m - 1:
        raise DataError(
            f"coalition design is singular ({masks.shape[0]} coalitions, rank {rank}); "
            "retry with a larger budget"
        )
    phi = np.empty(m)
    phi[:-1] = head
    phi[-1] = fx - base - head.sum()
    return Attribution(base=base, contributions=phi)


def global_importance(attributions: Sequence[Attribution]) -> ImportanceReport:
    """Average absolute contribution per feature, ranked descending."""
    if not attributions:
        raise DataError("cannot rank importance from zero attributions")
    rows = np.stack([a.contributions for a in attributions])
    if rows.ndim != 2:
        raise DataError("attributions disagree on feature count")
    importance = np.abs(rows).mean(axis=0)
    ranking = np.argsort(-importance, kind="stable")  # ties break by index
    return ImportanceReport(importance=importance, ranking=ranking)


def select_knobs(report: ImportanceReport, k: int) -> list[int]:
    """Indices of the k most important knobs, most important first."""
    m = report.ranking.size
    if not 1 <= k <= m:
        raise ConfigError(f"cannot select {k} of {m} knobs")
    return [int(i) for i in report.ranking[:k]]
