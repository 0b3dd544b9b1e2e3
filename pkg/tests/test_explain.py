import json

import numpy as np
import pytest

from knobtune.errors import ConfigError, DataError
from knobtune.explain import (
    DecisionPath,
    discretize,
    hard_tree_from_doc,
    hard_tree_to_doc,
    render,
    soft_path_probability,
    trace_decision,
)
from knobtune.knobspace import KnobSchema, KnobSpec, MetricSpec, MetricVector
from knobtune.softtree import SoftTree, forward, random_tree, sigmoid


def metric_specs(n, lo=0.0, hi=1.0):
    return [MetricSpec(f"m{i}", lo, hi) for i in range(n)]


def knob_schema(k):
    return KnobSchema([KnobSpec(f"knob{i}", "continuous", 0.0, 100.0, 50.0) for i in range(k)])


def build_actor(weights, thresholds, leaves, alpha=100.0):
    weights = np.asarray(weights, dtype=float)
    n_inner = weights.shape[0]
    height = int(np.log2(n_inner + 1))
    return SoftTree(
        height=height,
        input_dim=weights.shape[1],
        output_dim=np.asarray(leaves).shape[1],
        weights=weights,
        thresholds=np.asarray(thresholds, dtype=float),
        log_alpha=np.full(n_inner, np.log(alpha)),
        leaves=np.asarray(leaves, dtype=float),
    )


def test_discretize_picks_dominant_feature_and_rescales_threshold():
    actor = build_actor([[0.1, 0.9]], [0.45], [[0.0], [0.0]])
    tree = discretize(actor, metric_specs(2), knob_schema(1))
    node = tree.nodes[0]
    assert node.feature_index == 1
    assert node.threshold_norm == pytest.approx(0.5)
    assert not node.flip


def test_discretize_negative_weight_flips_branch():
    actor = build_actor([[-1.0, 0.0]], [0.3], [[0.0], [0.0]])
    tree = discretize(actor, metric_specs(2), knob_schema(1))
    node = tree.nodes[0]
    assert node.feature_index == 0
    assert node.threshold_norm == pytest.approx(-0.3)
    assert node.flip
    assert node.comparator == "<="


def test_discretize_invariant_under_positive_rescaling():
    rng = np.random.default_rng(0)
    w = rng.normal(0, 1, (1, 3))
    c = rng.normal(0, 0.4, 1)
    a1 = build_actor(w, c, [[0.0], [0.0]])
    a2 = build_actor(7.3 * w, 7.3 * c, [[0.0], [0.0]])
    t1 = discretize(a1, metric_specs(3), knob_schema(1))
    t2 = discretize(a2, metric_specs(3), knob_schema(1))
    assert t1.nodes[0].feature_index == t2.nodes[0].feature_index
    assert t1.nodes[0].threshold_norm == pytest.approx(t2.nodes[0].threshold_norm)
    assert t1.nodes[0].flip == t2.nodes[0].flip


def test_discretize_all_zero_node_marked_uninformative():
    actor = build_actor([[0.0, 0.0]], [0.4], [[0.0], [0.0]])
    tree = discretize(actor, metric_specs(2), knob_schema(1))
    assert tree.nodes[0].uninformative
    path = trace_decision(tree, MetricVector([0.5, 0.5], ("m0", "m1")))
    assert path.leaf_index == 0  # defaults to the condition-true branch


def test_discretize_leaves_squashed_and_denormalized():
    actor = build_actor([[1.0]], [0.5], [[2.0], [-2.0]])
    schema = knob_schema(1)
    tree = discretize(actor, metric_specs(1), schema)
    assert tree.leaves[0].knob_values_norm[0] == pytest.approx(float(sigmoid(np.array(2.0))))
    assert tree.leaves[0].knob_values_phys[0] == pytest.approx(100.0 * float(sigmoid(np.array(2.0))))


def test_discretize_validates_dimensions():
    actor = build_actor([[1.0, 0.0]], [0.5], [[0.0], [0.0]])
    with pytest.raises(ConfigError):
        discretize(actor, metric_specs(3), knob_schema(1))
    with pytest.raises(ConfigError):
        discretize(actor, metric_specs(2), knob_schema(4))


# -- traversal -----------------------------------------------------------------


def depth2_tree():
    # root: m0 >= 0.5; children: m1 >= 0.25 / m1 >= 0.75 (normalized space)
    actor = build_actor(
        [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
        [0.5, 0.25, 0.75],
        [[3.0], [-3.0], [1.0], [-1.0]],
    )
    return discretize(actor, [MetricSpec("m0", 0, 200), MetricSpec("m1", 0, 10)], knob_schema(1))


def test_trace_path_length_equals_height():
    tree = depth2_tree()
    path = trace_decision(tree, MetricVector([150.0, 9.0], ("m0", "m1")))
    assert len(path.steps) == 2
    assert path.leaf_index == 0  # both conditions true
    assert path.steps[0].threshold_phys == pytest.approx(100.0)


def test_trace_tie_routes_to_condition_true_branch():
    tree = depth2_tree()
    path = trace_decision(tree, MetricVector([100.0, 2.5], ("m0", "m1")))
    assert path.steps[0].condition_met  # exactly at the threshold
    assert path.steps[1].condition_met
    assert path.leaf_index == 0


def test_trace_handles_reordered_state_and_missing_metric():
    tree = depth2_tree()
    path = trace_decision(tree, MetricVector([9.0, 150.0], ("m1", "m0")))
    assert path.leaf_index == 0
    with pytest.raises(DataError, match="m1"):
        trace_decision(tree, MetricVector([150.0], ("m0",)))


def test_trace_is_pure():
    tree = depth2_tree()
    state = MetricVector([42.0, 3.0], ("m0", "m1"))
    assert trace_decision(tree, state) == trace_decision(tree, state)


# -- hard/soft fidelity ----------------------------------------------------------


def test_one_hot_steep_actor_matches_soft_argmax():
    rng = np.random.default_rng(5)
    actor = random_tree(height=4, input_dim=5, output_dim=2, alpha0=1e4, seed=6)
    actor.weights[:] = 0.0
    for i in range(actor.n_inner):
        actor.weights[i, rng.integers(0, 5)] = 1.0
    actor.thresholds[:] = rng.uniform(0.05, 0.95, actor.n_inner)
    tree = discretize(actor, metric_specs(5), knob_schema(2))
    states = rng.random((3000, 5))
    soft_leaf = forward(actor, states).path_probs.argmax(axis=1)
    agree = 0
    for x, sl in zip(states, soft_leaf):
        path = trace_decision(tree, MetricVector(x, tuple(f"m{i}" for i in range(5))))
        agree += int(path.leaf_index == sl)
    assert agree / len(states) >= 0.99


def test_soft_path_probability_fidelity_hint():
    actor = build_actor([[1.0, 0.0]], [0.5], [[2.0], [-2.0]], alpha=1000.0)
    tree = discretize(actor, metric_specs(2), knob_schema(1))
    state = MetricVector([0.9, 0.1], ("m0", "m1"))
    path = trace_decision(tree, state)
    p = soft_path_probability(actor, np.array([0.9, 0.1]), path.leaf_index)
    assert p >= 0.99


# -- rendering -------------------------------------------------------------------


def single_node_tree():
    actor = build_actor([[1.0]], [0.4], [[2.0], [-2.0]])
    return discretize(actor, [MetricSpec("pages", 0, 1000)], knob_schema(1))


def test_text_render_single_node_is_three_lines():
    text = render(single_node_tree(), "text")
    lines = text.strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("pages >= 400")
    assert lines[1].strip().startswith("yes: set knob0=")
    assert lines[2].strip().startswith("no:  set knob0=")


def test_text_render_marks_taken_path():
    tree = depth2_tree()
    path = trace_decision(tree, MetricVector([150.0, 9.0], ("m0", "m1")))
    text = render(tree, "text", path)
    assert text.count("<== taken") == 3  # two decisions plus the leaf


def test_dot_render_counts_match_tree():
    tree = depth2_tree()
    dot = render(tree, "dot")
    assert dot.startswith("digraph")
    node_lines = [l for l in dot.splitlines() if l.strip().startswith("n") and "[label=" in l and "->" not in l]
    edge_lines = [l for l in dot.splitlines() if "->" in l]
    assert len(node_lines) == 3 + 4  # inner nodes plus leaves
    assert len(edge_lines) == 2 * 3


def test_json_render_round_trips():
    tree = depth2_tree()
    doc = json.loads(render(tree, "json"))
    rebuilt = hard_tree_from_doc(doc)
    assert rebuilt == tree
    assert hard_tree_to_doc(rebuilt) == hard_tree_to_doc(tree)


def test_render_rejects_unknown_format():
    with pytest.raises(ConfigError):
        render(single_node_tree(), "yaml")
