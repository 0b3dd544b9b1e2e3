"""Turn a trained tree policy into something a DBA can read.

Discretization replaces each oblique inner node by a single-feature
threshold test: the dominant weight picks the feature and the threshold
is rescaled by that weight (a negative weight flips the branch
semantics). Leaves are squashed into actions and denormalized to
physical knob settings. The resulting hard tree can be traversed for a
given system state, producing a step-by-step decision path, and rendered
as indented text, a DOT graph, or JSON.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .knobspace import KnobSchema, KnobSpec, MetricSpec, MetricVector
from .softtree import SoftTree, sigmoid

logger = logging.getLogger(__name__)

RENDER_FORMATS = ("text", "dot", "json")


@dataclass(frozen=True)
class HardNode:
    """A single-feature threshold test.

    `flip` marks nodes whose selected weight was negative: the
    condition-true branch is then `value <= threshold` instead of
    `value >= threshold`. Uninformative nodes (all-zero weights) carry no
    threshold and always route to the condition-true branch.
    """

    feature_index: int
    feature_name: str
    threshold_norm: float | None
    threshold_phys: float | None
    flip: bool = False
    uninformative: bool = False

    @property
    def comparator(self) -> str:
        if self.uninformative:
            return "n/a"
        return "<=" if self.flip else ">="


@dataclass(frozen=True)
class HardLeaf:
    """Recommended configuration at the end of a path."""

    knob_values_phys: tuple[float, ...]
    knob_values_norm: tuple[float, ...]


@dataclass(frozen=True)
class HardTree:
    """Complete binary interpretation tree mirroring the policy's shape."""

    height: int
    nodes: tuple[HardNode, ...]  # level-ordered, 1-based heap positions
    leaves: tuple[HardLeaf, ...]
    metric_names: tuple[str, ...]
    metric_lo: tuple[float, ...]
    metric_hi: tuple[float, ...]
    knob_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.nodes) != 2**self.height - 1 or len(self.leaves) != 2**self.height:
            raise ConfigError("hard tree node/leaf counts do not match its height")


@dataclass(frozen=True)
class PathStep:
    metric: str
    comparator: str
    threshold_norm: float | None
    threshold_phys: float | None
    observed: float
    condition_met: bool


@dataclass(frozen=True)
class DecisionPath:
    steps: tuple[PathStep, ...]
    leaf_index: int
    leaf: HardLeaf


def discretize(
    actor: SoftTree, metrics: Sequence[MetricSpec], knobs: KnobSchema
) -> HardTree:
    """Collapse each oblique node to its dominant feature.

    Per node: pick the feature with the largest absolute weight, divide
    the threshold by that weight, and record a flipped branch orientation
    when the weight is negative. All-zero nodes are reported and marked
    uninformative. Leaf vectors are squashed through the action sigmoid
    and denormalized into deployable physical settings.
    """
    metrics = list(metrics)
    if actor.input_dim != len(metrics):
        raise ConfigError(
            f"actor reads {actor.input_dim} metrics but {len(metrics)} were declared"
        )
    if actor.output_dim != knobs.size:
        raise ConfigError(
            f"actor emits {actor.output_dim} knob values but the schema has {knobs.size}"
        )
    nodes = []
    for i in range(actor.n_inner):
        w = actor.weights[i]
        if np.all(w == 0.0):
            logger.warning("inner node %d has all-zero weights; marked uninformative", i + 1)
            nodes.append(
                HardNode(
                    feature_index=-1,
                    feature_name="(uninformative)",
                    threshold_norm=None,
                    threshold_phys=None,
                    uninformative=True,
                )
            )
            continue
        k_star = int(np.argmax(np.abs(w)))
        w_sel = float(w[k_star])
        thr = float(actor.thresholds[i] / w_sel)
        spec = metrics[k_star]
        nodes.append(
            HardNode(
                feature_index=k_star,
                feature_name=spec.name,
                threshold_norm=thr,
                threshold_phys=spec.min + thr * (spec.max - spec.min),
                flip=w_sel < 0,
            )
        )
    leaves = []
    for row in actor.leaves:
        unit = sigmoid(row)
        phys = knobs.from_unit(unit)
        leaves.append(
            HardLeaf(
                knob_values_phys=tuple(float(v) for v in phys),
                knob_values_norm=tuple(float(v) for v in unit),
            )
        )
    return HardTree(
        height=actor.height,
        nodes=tuple(nodes),
        leaves=tuple(leaves),
        metric_names=tuple(m.name for m in metrics),
        metric_lo=tuple(m.min for m in metrics),
        metric_hi=tuple(m.max for m in metrics),
        knob_names=knobs.names,
    )


def _condition_met(node: HardNode, value_norm: float) -> bool:
    if node.uninformative:
        return True  # traversal defaults to the condition-true branch
    if node.flip:
        return value_norm <= node.threshold_norm
    return value_norm >= node.threshold_norm  # ties route to the ">=" branch


def trace_decision(tree: HardTree, state: MetricVector) -> DecisionPath:
    """Deterministic traversal of the hard tree for one observed state.

    Comparisons run in normalized metric space (matching what the policy
    saw); the recorded steps carry the physical values for display. The
    state may order its metrics freely but must cover every referenced
    name.
    """
    values = {}
    for name in tree.metric_names:
        values[name] = state.value_of(name)  # raises DataError when missing
    lo = dict(zip(tree.metric_names, tree.metric_lo))
    hi = dict(zip(tree.metric_names, tree.metric_hi))

    steps = []
    pos = 1
    for _ in range(tree.height):
        node = tree.nodes[pos - 1]
        if node.uninformative:
            observed = float("nan")
            met = True
        else:
            raw = values[node.feature_name]
            span = hi[node.feature_name] - lo[node.feature_name]
            norm = np.clip((raw - lo[node.feature_name]) / span, 0.0, 1.0)
            met = _condition_met(node, float(norm))
            observed = raw
        steps.append(
            PathStep(
                metric=node.feature_name,
                comparator=node.comparator,
                threshold_norm=node.threshold_norm,
                threshold_phys=node.threshold_phys,
                observed=observed,
                condition_met=met,
            )
        )
        pos = 2 * pos if met else 2 * pos + 1
    leaf_index = pos - 2**tree.height
    return DecisionPath(steps=tuple(steps), leaf_index=leaf_index, leaf=tree.leaves[leaf_index])


# -- rendering ----------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:g}"


def _leaf_text(tree: HardTree, leaf: HardLeaf) -> str:
    return ", ".join(f"{n}={_fmt(v)}" for n, v in zip(tree.knob_names, leaf.knob_values_phys))


def _node_question(node: HardNode) -> str:
    if node.uninformative:
        return "(uninformative node: defaults to yes)"
    return f"{node.feature_name} {node.comparator} {_fmt(node.threshold_phys)}?"


def _render_text(tree: HardTree, path: DecisionPath | None) -> str:
    taken = set()
    if path is not None:
        pos = 1
        for step in path.steps:
            taken.add(pos)
            pos = 2 * pos if step.condition_met else 2 * pos + 1
        taken.add(pos)

    lines: list[str] = []

    def walk(pos: int, depth: int, prefix: str) -> None:
        indent = "  " * depth
        mark = "  <== taken" if path is not None and pos in taken else ""
        if pos >= 2**tree.height:
            leaf = tree.leaves[pos - 2**tree.height]
            lines.append(f"{indent}{prefix}set {_leaf_text(tree, leaf)}{mark}")
            return
        node = tree.nodes[pos - 1]
        lines.append(f"{indent}{prefix}{_node_question(node)}{mark}")
        walk(2 * pos, depth + 1, "yes: ")
        walk(2 * pos + 1, depth + 1, "no:  ")

    walk(1, 0, "")
    return "\n".join(lines) + "\n"


def _render_dot(tree: HardTree, path: DecisionPath | None) -> str:
    taken_edges = set()
    taken_nodes = {1}
    if path is not None:
        pos = 1
        for step in path.steps:
            child = 2 * pos if step.condition_met else 2 * pos + 1
            taken_edges.add((pos, child))
            taken_nodes.add(child)
            pos = child

    lines = ["digraph interpretation_tree {", "  node [shape=box];"]
    for pos in range(1, 2 ** (tree.height + 1)):
        if pos < 2**tree.height:
            label = _node_question(tree.nodes[pos - 1]).replace('"', "'")
            style = ""
        else:
            leaf = tree.leaves[pos - 2**tree.height]
            label = _leaf_text(tree, leaf).replace('"', "'")
            style = " style=rounded"
        highlight = " color=red penwidth=2" if path is not None and pos in taken_nodes else ""
        lines.append(f'  n{pos} [label="{label}"{style}{highlight}];')
    for pos in range(1, 2**tree.height):
        for child, branch in ((2 * pos, "yes"), (2 * pos + 1, "no")):
            highlight = (
                " color=red penwidth=2" if path is not None and (pos, child) in taken_edges else ""
            )
            lines.append(f'  n{pos} -> n{child} [label="{branch}"{highlight}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def hard_tree_to_doc(tree: HardTree) -> dict:
    return {
        "height": tree.height,
        "metric_schema": [
            {"name": n, "min": lo, "max": hi}
            for n, lo, hi in zip(tree.metric_names, tree.metric_lo, tree.metric_hi)
        ],
        "knob_names": list(tree.knob_names),
        "nodes": [
            {
                "feature_index": n.feature_index,
                "feature_name": n.feature_name,
                "threshold_norm": n.threshold_norm,
                "threshold_phys": n.threshold_phys,
                "flip": n.flip,
                "uninformative": n.uninformative,
            }
            for n in tree.nodes
        ],
        "leaves": [
            {"phys": list(l.knob_values_phys), "norm": list(l.knob_values_norm)}
            for l in tree.leaves
        ],
    }


def hard_tree_from_doc(doc: dict) -> HardTree:
    try:
        return HardTree(
            height=int(doc["height"]),
            nodes=tuple(
                HardNode(
                    feature_index=int(n["feature_index"]),
                    feature_name=str(n["feature_name"]),
                    threshold_norm=n["threshold_norm"],
                    threshold_phys=n["threshold_phys"],
                    flip=bool(n["flip"]),
                    uninformative=bool(n["uninformative"]),
                )
                for n in doc["nodes"]
            ),
            leaves=tuple(
                HardLeaf(knob_values_phys=tuple(l["phys"]), knob_values_norm=tuple(l["norm"]))
                for l in doc["leaves"]
            ),
            metric_names=tuple(m["name"] for m in doc["metric_schema"]),
            metric_lo=tuple(m["min"] for m in doc["metric_schema"]),
            metric_hi=tuple(m["max"] for m in doc["metric_schema"]),
            knob_names=tuple(doc["knob_names"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"bad interpretation-tree document: {e}") from None


def render(tree: HardTree, fmt: str, path: DecisionPath | None = None) -> str:
    """Render the tree (optionally with a traced path highlighted)."""
    if fmt == "text":
        return _render_text(tree, path)
    if fmt == "dot":
        return _render_dot(tree, path)
    if fmt == "json":
        doc = hard_tree_to_doc(tree)
        if path is not None:
            doc["traced_path"] = {
                "leaf_index": path.leaf_index,
                "steps": [
                    {
                        "metric": s.metric,
                        "comparator": s.comparator,
                        "threshold_phys": s.threshold_phys,
                        "observed": None if np.isnan(s.observed) else s.observed,
                        "condition_met": s.condition_met,
                    }
                    for s in path.steps
                ],
            }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    raise ConfigError(f"unknown render format {fmt!r} (expected one of {RENDER_FORMATS})")


def soft_path_probability(actor: SoftTree, state_norm: np.ndarray, leaf_index: int) -> float:
    """Fidelity hint: the soft tree's probability mass on the traced leaf."""
    from .softtree import forward

    trace = forward(actor, state_norm)
    return float(trace.path_probs[leaf_index])
