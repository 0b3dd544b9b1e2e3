"""Differentiable binary decision trees.

The same structure serves two roles: a performance-level classifier
initialized from expert rules, and the policy network of the tuning
agent. A tree of height h is complete: 2^h - 1 inner nodes stored
level-ordered with 1-based positions (node j has children 2j and 2j+1)
and 2^h leaf value vectors.

Each inner node holds a weight vector w, a threshold c, and a gate
steepness alpha (stored as log alpha so it stays positive). Its gate

    D = sigmoid(alpha * (w . x - c))

is the probability of routing to the LEFT child; "left" is the
condition-true branch for expert rules written as `feature >= threshold`.
The tree output is the path-probability-weighted sum of leaf vectors,
which equals the bottom-up mixing recursion (`forward_bottom_up`) up to
floating-point association.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, RuntimeFailure

LOGIT_EPS = 1e-6


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logit(p: np.ndarray) -> np.ndarray:
    """Inverse of sigmoid, with inputs clipped away from {0, 1}."""
    p = np.clip(np.asarray(p, dtype=float), LOGIT_EPS, 1.0 - LOGIT_EPS)
    return np.log(p / (1.0 - p))


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class SoftTree:
    """Parameters of one differentiable tree.

    ``leaf_softmax`` records that the leaves live in logit space and
    must be softmax-projected when interpreted as level distributions;
    it is set by classifier training and persisted in checkpoints.
    """

    height: int
    input_dim: int
    output_dim: int
    weights: np.ndarray  # (n_inner, input_dim)
    thresholds: np.ndarray  # (n_inner,)
    log_alpha: np.ndarray  # (n_inner,)
    leaves: np.ndarray  # (n_leaves, output_dim)
    leaf_softmax: bool = False
    version: int = 0

    def __post_init__(self):
        if self.height < 1:
            raise ConfigError("tree height must be at least 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("tree input and output dimensions must be positive")
        self.weights = np.asarray(self.weights, dtype=float)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.log_alpha = np.asarray(self.log_alpha, dtype=float)
        self.leaves = np.asarray(self.leaves, dtype=float)
        n_inner, n_leaves = self.n_inner, self.n_leaves
        if self.weights.shape != (n_inner, self.input_dim):
            raise ConfigError(f"weights must have shape ({n_inner}, {self.input_dim})")
        if self.thresholds.shape != (n_inner,) or self.log_alpha.shape != (n_inner,):
            raise ConfigError(f"thresholds and log_alpha must have shape ({n_inner},)")
        if self.leaves.shape != (n_leaves, self.output_dim):
            raise ConfigError(f"leaves must have shape ({n_leaves}, {self.output_dim})")
        for name, arr in (
            ("weights", self.weights),
            ("thresholds", self.thresholds),
            ("log_alpha", self.log_alpha),
            ("leaves", self.leaves),
        ):
            if not np.isfinite(arr).all():
                raise ConfigError(f"tree {name} contain non-finite values")

    @property
    def n_inner(self) -> int:
        return 2**self.height - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.height

    @property
    def alphas(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    def copy(self) -> "SoftTree":
        return SoftTree(
            height=self.height,
            input_dim=self.input_dim,
            output_dim=self.output_dim,
            weights=self.weights.copy(),
            thresholds=self.thresholds.copy(),
            log_alpha=self.log_alpha.copy(),
            leaves=self.leaves.copy(),
            leaf_softmax=self.leaf_softmax,
        )

    def parameter_arrays(self) -> list[np.ndarray]:
        """Live references to all trainable arrays, in a fixed order."""
        return [self.weights, self.thresholds, self.log_alpha, self.leaves]

    def mark_mutated(self) -> None:
        """Record an in-place parameter update (invalidates old traces)."""
        self.version += 1


@dataclass(eq=False)
class ForwardTrace:
    """Everything the backward pass needs about one forward evaluation."""

    x: np.ndarray  # (B, input_dim)
    node_weights: np.ndarray  # weights actually used (may be a Gumbel sample)
    leaf_values: np.ndarray  # leaf matrix actually used
    margins: np.ndarray  # (B, n_inner): w . x - c
    activations: np.ndarray  # (B, n_inner): left-branch probability per node
    path_probs: np.ndarray  # (B, n_leaves)
    output: np.ndarray  # (B, output_dim)
    tree_version: int
    squeeze: bool


@dataclass
class TreeGrads:
    """Gradients for every tree parameter.

    ``weights`` and ``leaves`` are taken with respect to the arrays the
    forward pass actually used; when overrides were supplied the caller
    chains them back to the raw parameters.
    """

    weights: np.ndarray
    thresholds: np.ndarray
    log_alpha: np.ndarray
    leaves: np.ndarray

    def scaled(self, factor: float) -> "TreeGrads":
        return TreeGrads(
            self.weights * factor,
            self.thresholds * factor,
            self.log_alpha * factor,
            self.leaves * factor,
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.weights, self.thresholds, self.log_alpha, self.leaves]


def _as_batch(tree: SoftTree, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != tree.input_dim:
        raise DataError(f"input must have {tree.input_dim} components, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("tree input contains non-finite values")
    return x, squeeze


def forward(
    tree: SoftTree,
    x: np.ndarray,
    node_weights: np.ndarray | None = None,
    leaf_values: np.ndarray | None = None,
) -> ForwardTrace:
    """Evaluate the tree on one input vector or a (B, input_dim) batch.

    Computes every gate activation, the per-leaf path probabilities
    (which sum to 1), and the output as the probability-weighted sum of
    leaf vectors. ``node_weights`` / ``leaf_values`` substitute the
    stored parameters without mutating the tree; training uses them for
    Gumbel-perturbed weights and softmax-projected leaves.
    """
    xb, squeeze = _as_batch(tree, x)
    W = tree.weights if node_weights is None else np.asarray(node_weights, dtype=float)
    V = tree.leaves if leaf_values is None else np.asarray(leaf_values, dtype=float)
    if W.shape != tree.weights.shape or V.shape != tree.leaves.shape:
        raise DataError("parameter override has wrong shape")

    margins = xb @ W.T - tree.thresholds  # (B, n_inner)
    acts = sigmoid(tree.alphas * margins)

    b = xb.shape[0]
    h = tree.height
    # prob[:, j] is the probability of reaching position j (1-based heap layout).
    prob = np.empty((b, 2 ** (h + 1)), dtype=float)
    prob[:, 1] = 1.0
    for level in range(h):
        lo, hi = 2**level, 2 ** (level + 1)
        d = acts[:, lo - 1 : hi - 1]
        parents = prob[:, lo:hi]
        children = prob[:, hi : 2 * hi]
        children[:, 0::2] = parents * d
        children[:, 1::2] = parents * (1.0 - d)
    path_probs = prob[:, 2**h :]
    output = path_probs @ V

    if squeeze:
        return ForwardTrace(
            x=xb[0],
            node_weights=W,
            leaf_values=V,
            margins=margins[0],
            activations=acts[0],
            path_probs=path_probs[0],
            output=output[0],
            tree_version=tree.version,
            squeeze=True,
        )
    return ForwardTrace(
        x=xb,
        node_weights=W,
        leaf_values=V,
        margins=margins,
        activations=acts,
        path_probs=path_probs,
        output=output,
        tree_version=tree.version,
        squeeze=False,
    )


def forward_bottom_up(
    tree: SoftTree,
    x: np.ndarray,
    node_weights: np.ndarray | None = None,
    leaf_values: np.ndarray | None = None,
) -> np.ndarray:
    """Evaluate by mixing leaf vectors upward, level by level.

    Starting from the leaf value matrix, each inner node combines its
    children as D * left + (1 - D) * right until the root remains. The
    result is algebraically identical to `forward`; keeping both paths
    lets tests assert the equivalence.
    """
    xb, squeeze = _as_batch(tree, x)
    W = tree.weights if node_weights is None else np.asarray(node_weights, dtype=float)
    V = tree.leaves if leaf_values is None else np.asarray(leaf_values, dtype=float)
    margins = xb @ W.T - tree.thresholds
    acts = sigmoid(tree.alphas * margins)

    b = xb.shape[0]
    vals = np.broadcast_to(V, (b, tree.n_leaves, tree.output_dim)).copy()
    for level in range(tree.height - 1, -1, -1):
        lo, hi = 2**level, 2 ** (level + 1)
        d = acts[:, lo - 1 : hi - 1][:, :, None]
        vals = d * vals[:, 0::2, :] + (1.0 - d) * vals[:, 1::2, :]
    out = vals[:, 0, :]
    return out[0] if squeeze else out


def backward(tree: SoftTree, trace: ForwardTrace, grad_out: np.ndarray) -> TreeGrads:
    """Analytic gradients of (grad_out . output) for all parameters.

    For batched traces, grad_out is (B, output_dim) and the result is
    the gradient of sum_b grad_out[b] . output[b]. Raises if the tree
    was mutated after the trace was recorded.
    """
    if trace.tree_version != tree.version:
        raise RuntimeFailure("stale trace: tree parameters changed since forward()")
    g = np.asarray(grad_out, dtype=float)
    x, margins, acts = trace.x, trace.margins, trace.activations
    if trace.squeeze:
        g, x, margins, acts = g[None, :], x[None, :], margins[None, :], acts[None, :]
    b = x.shape[0]
    if g.shape != (b, tree.output_dim):
        raise DataError(f"grad_out must have shape {(b, tree.output_dim)}, got {g.shape}")

    h = tree.height
    # Recompute per-level mixed values bottom-up; vals[i] has 2^i entries.
    vals = [None] * (h + 1)
    vals[h] = np.broadcast_to(trace.leaf_values, (b, tree.n_leaves, tree.output_dim))
    for level in range(h - 1, -1, -1):
        lo, hi = 2**level, 2 ** (level + 1)
        d = acts[:, lo - 1 : hi - 1][:, :, None]
        nxt = vals[level + 1]
        vals[level] = d * nxt[:, 0::2, :] + (1.0 - d) * nxt[:, 1::2, :]

    # Adjoint sweep top-down: d(objective)/d(gate) per node, then leaf adjoints.
    adj = g[:, None, :]  # (B, 1, output_dim) at the root level
    d_act = np.empty_like(acts)
    for level in range(h):
        lo, hi = 2**level, 2 ** (level + 1)
        nxt = vals[level + 1]
        diff = nxt[:, 0::2, :] - nxt[:, 1::2, :]
        d_act[:, lo - 1 : hi - 1] = (adj * diff).sum(axis=2)
        d = acts[:, lo - 1 : hi - 1][:, :, None]
        child_adj = np.empty((b, 2 * (hi - lo), tree.output_dim), dtype=float)
        child_adj[:, 0::2, :] = adj * d
        child_adj[:, 1::2, :] = adj * (1.0 - d)
        adj = child_adj
    d_leaves = adj.sum(axis=0)  # (n_leaves, output_dim)

    alphas = tree.alphas
    gate_slope = acts * (1.0 - acts)
    d_pre = d_act * gate_slope  # gradient w.r.t. alpha * margin, per sample
    d_weights = (d_pre * alphas).T @ x
    d_thresholds = -(d_pre * alphas).sum(axis=0)
    d_alpha = (d_pre * margins).sum(axis=0)
    d_log_alpha = d_alpha * alphas

    return TreeGrads(
        weights=d_weights,
        thresholds=d_thresholds,
        log_alpha=d_log_alpha,
        leaves=d_leaves,
    )


def gumbel_weights(w: np.ndarray, temperature: float, seed) -> np.ndarray:
    """Sample a simplex vector from the weight logits via Gumbel-Softmax.

    Returns softmax((log_softmax(w) + gumbel_noise) / temperature): a
    positive vector summing to 1, deterministic for a fixed seed. Low
    temperatures sharpen toward a one-hot at the perturbed argmax; high
    temperatures flatten toward uniform. Works row-wise on 2-D input.
    """
    if not temperature > 0:
        raise ConfigError(f"gumbel temperature must be positive, got {temperature}")
    w = np.asarray(w, dtype=float)
    if not np.isfinite(w).all():
        raise DataError("gumbel_weights: non-finite logits")
    rng = np.random.default_rng(seed)
    u = np.clip(rng.random(w.shape), 1e-12, 1.0 - 1e-12)
    noise = -np.log(-np.log(u))
    return softmax((log_softmax(w) + noise) / temperature)


def gumbel_weights_vjp(
    w: np.ndarray, y: np.ndarray, grad_y: np.ndarray, temperature: float
) -> np.ndarray:
    """Backpropagate through gumbel_weights for the fixed noise draw.

    Given the sampled output y and the gradient with respect to it,
    returns the gradient with respect to the raw logits w. Row-wise on
    2-D input.
    """
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    grad_y = np.asarray(grad_y, dtype=float)
    s_grad = y * (grad_y - (grad_y * y).sum(axis=-1, keepdims=True))
    u_grad = s_grad / temperature
    p = softmax(w)
    return u_grad - p * u_grad.sum(axis=-1, keepdims=True)


# -- expert rule trees -------------------------------------------------------


@dataclass(frozen=True)
class RuleLeaf:
    """Terminal payload: a performance level or a target knob setting."""

    level: int | None = None
    knobs: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.level is None) == (self.knobs is None):
            raise ConfigError("rule leaf must carry exactly one of `level` or `knobs`")
        if self.level is not None and not 0 <= self.level <= 4:
            raise ConfigError(f"rule leaf level {self.level} outside 0..4")


@dataclass(frozen=True)
class RuleNode:
    """One expert rule: compare a named feature against a normalized threshold."""

    feature: str
    threshold: float
    low: "RuleNode | RuleLeaf"
    high: "RuleNode | RuleLeaf"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(
                f"rule on {self.feature!r}: threshold {self.threshold} outside [0, 1] "
                "(expert thresholds are written in normalized units)"
            )


def rule_depth(node: RuleNode | RuleLeaf) -> int:
    if isinstance(node, RuleLeaf):
        return 0
    return 1 + max(rule_depth(node.low), rule_depth(node.high))


def parse_rule_tree(doc) -> RuleNode | RuleLeaf:
    """Build a rule tree from its JSON document form."""
    if not isinstance(doc, dict):
        raise ConfigError("rule tree nodes must be JSON objects")
    if "level" in doc:
        return RuleLeaf(level=int(doc["level"]))
    if "knobs" in doc:
        return RuleLeaf(knobs=tuple(float(v) for v in doc["knobs"]))
    missing = {"feature", "threshold", "low", "high"} - set(doc)
    if missing:
        raise ConfigError(f"rule node missing fields: {', '.join(sorted(missing))}")
    return RuleNode(
        feature=str(doc["feature"]),
        threshold=float(doc["threshold"]),
        low=parse_rule_tree(doc["low"]),
        high=parse_rule_tree(doc["high"]),
    )


def load_rule_tree(path: str | Path) -> RuleNode | RuleLeaf:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"rule file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"rule file {path} is not valid JSON: {e}") from None
    return parse_rule_tree(doc)


def _leaf_vector(leaf: RuleLeaf, output_dim: int, for_levels: bool) -> np.ndarray:
    if for_levels:
        if leaf.level is None:
            raise ConfigError("level-valued tree got a knob-vector leaf")
        vec = np.zeros(output_dim)
        vec[leaf.level] = 1.0
        return vec
    if leaf.knobs is None:
        raise ConfigError("knob-valued tree got a level leaf")
    if len(leaf.knobs) != output_dim:
        raise ConfigError(f"rule leaf has {len(leaf.knobs)} knob values, tree emits {output_dim}")
    # Stored as logits so the squashed policy output reproduces the payload.
    return logit(np.array(leaf.knobs))


def init_from_expert_tree(
    rules: RuleNode | RuleLeaf,
    alpha0: float,
    feature_names: Sequence[str],
    output_dim: int,
    height: int | None = None,
) -> SoftTree:
    """Convert a hand-authored rule tree into a differentiable tree.

    Each rule becomes an inner node with a one-hot weight at the rule's
    feature, the rule threshold, and gate steepness alpha0. Level leaves
    become one-hot vectors over the five performance levels; knob leaves
    are stored as logits of the target normalized setting. Subtrees that
    end early are padded with pass-through nodes (w = 0, c = 0, so the
    gate sits at 0.5) whose descendant leaves all repeat the payload.
    """
    if not alpha0 > 0:
        raise ConfigError(f"alpha0 must be positive, got {alpha0}")
    feature_names = list(feature_names)
    index = {name: i for i, name in enumerate(feature_names)}
    depth = rule_depth(rules)
    h = height if height is not None else max(1, depth)
    if depth > h:
        raise ConfigError(f"rule tree depth {depth} exceeds target height {h}")

    for_levels = _has_level_leaves(rules)
    n_inner, n_leaves = 2**h - 1, 2**h
    weights = np.zeros((n_inner, len(feature_names)))
    thresholds = np.zeros(n_inner)
    log_alpha = np.full(n_inner, np.log(alpha0))
    leaves = np.zeros((n_leaves, output_dim))

    def place(node, pos: int, depth_here: int) -> None:
        if isinstance(node, RuleLeaf):
            vec = _leaf_vector(node, output_dim, for_levels)
            span = 2 ** (h - depth_here)
            first = pos * span  # leftmost descendant at the leaf level
            leaves[first - n_leaves : first - n_leaves + span] = vec
            return
        try:
            fidx = index[node.feature]
        except KeyError:
            raise ConfigError(f"rule references unknown feature {node.feature!r}") from None
        weights[pos - 1, fidx] = 1.0
        thresholds[pos - 1] = node.threshold
        place(node.high, 2 * pos, depth_here + 1)  # condition-true branch goes left
        place(node.low, 2 * pos + 1, depth_here + 1)

    place(rules, 1, 0)
    return SoftTree(
        height=h,
        input_dim=len(feature_names),
        output_dim=output_dim,
        weights=weights,
        thresholds=thresholds,
        log_alpha=log_alpha,
        leaves=leaves,
    )


def _has_level_leaves(node: RuleNode | RuleLeaf) -> bool:
    if isinstance(node, RuleLeaf):
        return node.level is not None
    return _has_level_leaves(node.low)


def random_tree(
    height: int, input_dim: int, output_dim: int, alpha0: float, seed
) -> SoftTree:
    """Small symmetric random initialization (gates start near 0.5)."""
    if not alpha0 > 0:
        raise ConfigError(f"alpha0 must be positive, got {alpha0}")
    rng = np.random.default_rng(seed)
    n_inner, n_leaves = 2**height - 1, 2**height
    return SoftTree(
        height=height,
        input_dim=input_dim,
        output_dim=output_dim,
        weights=rng.uniform(-0.1, 0.1, size=(n_inner, input_dim)),
        thresholds=rng.uniform(0.4, 0.6, size=n_inner),
        log_alpha=np.full(n_inner, np.log(alpha0)),
        leaves=rng.uniform(-0.05, 0.05, size=(n_leaves, output_dim)),
    )


# -- persistence -------------------------------------------------------------


def tree_to_doc(tree: SoftTree) -> dict:
    return {
        "height": tree.height,
        "input_dim": tree.input_dim,
        "output_dim": tree.output_dim,
        "leaf_softmax": tree.leaf_softmax,
        "nodes": [
            {"w": tree.weights[i].tolist(), "c": float(tree.thresholds[i]), "log_alpha": float(tree.log_alpha[i])}
            for i in range(tree.n_inner)
        ],
        "leaves": [row.tolist() for row in tree.leaves],
    }


def tree_from_doc(doc: dict) -> SoftTree:
    try:
        nodes = doc["nodes"]
        tree = SoftTree(
            height=int(doc["height"]),
            input_dim=int(doc["input_dim"]),
            output_dim=int(doc["output_dim"]),
            weights=np.array([n["w"] for n in nodes], dtype=float),
            thresholds=np.array([n["c"] for n in nodes], dtype=float),
            log_alpha=np.array([n["log_alpha"] for n in nodes], dtype=float),
            leaves=np.array(doc["leaves"], dtype=float),
            leaf_softmax=bool(doc.get("leaf_softmax", False)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad tree checkpoint: {e}") from None
    return tree


def save_tree(tree: SoftTree, path: str | Path, extra: dict | None = None) -> None:
    """Write a checkpoint: the flat parameter dump plus optional metadata."""
    doc = tree_to_doc(tree)
    if extra:
        overlap = set(doc) & set(extra)
        if overlap:
            raise ConfigError(f"checkpoint extra keys collide with tree fields: {overlap}")
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_tree(path: str | Path) -> tuple[SoftTree, dict]:
    """Read a checkpoint; returns the tree and any extra metadata."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"checkpoint {path} is not valid JSON: {e}") from None
    tree = tree_from_doc(doc)
    core = {"height", "input_dim", "output_dim", "leaf_softmax", "nodes", "leaves"}
    extra = {k: v for k, v in doc.items() if k not in core}
    return tree, extra
