"""Shared test oracles: finite differences over tree and network parameters."""

from __future__ import annotations

import numpy as np

from knobtune.softtree import SoftTree


def finite_difference(fn, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(arr, dtype=float)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def tree_objective_grads_fd(tree: SoftTree, objective, step: float = 1e-5) -> list[np.ndarray]:
    """Finite-difference gradients of `objective()` for every tree array.

    `objective` must re-evaluate the tree from its current parameters so
    that in-place perturbations are visible.
    """
    return [finite_difference(objective, arr, step) for arr in tree.parameter_arrays()]


def assert_close_rel(analytic: np.ndarray, fd: np.ndarray, rtol: float, floor: float = 1e-6):
    """Relative comparison with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel = np.abs(analytic - fd) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst <= rtol, f"max relative gradient error {worst:.3e} exceeds {rtol:.1e}"
