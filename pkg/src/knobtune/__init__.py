"""Explainable database knob tuning.

Pipeline: Latin hypercube sampling of the knob space, a differentiable
tree trained to predict performance levels, Shapley-based knob
importance ranking, DDPG tuning with a tree-structured policy, and
discretization of the trained policy into a human-readable
interpretation tree.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, RuntimeFailure, TuningError
from .knobspace import (
    KnobSchema,
    KnobSpec,
    KnobVector,
    MetricSpec,
    MetricVector,
    PerfSample,
    denormalize,
    load_schema,
    normalize,
)
from .sampler import SampleBatch, lhs_sample
from .softtree import (
    ForwardTrace,
    RuleLeaf,
    RuleNode,
    SoftTree,
    backward,
    forward,
    forward_bottom_up,
    gumbel_weights,
    init_from_expert_tree,
    load_tree,
    random_tree,
    save_tree,
)

__all__ = [
    "ConfigError",
    "DataError",
    "RuntimeFailure",
    "TuningError",
    "KnobSchema",
    "KnobSpec",
    "KnobVector",
    "MetricSpec",
    "MetricVector",
    "PerfSample",
    "denormalize",
    "load_schema",
    "normalize",
    "SampleBatch",
    "lhs_sample",
    "ForwardTrace",
    "RuleLeaf",
    "RuleNode",
    "SoftTree",
    "backward",
    "forward",
    "forward_bottom_up",
    "gumbel_weights",
    "init_from_expert_tree",
    "load_tree",
    "random_tree",
    "save_tree",
]
