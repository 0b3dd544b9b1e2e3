"""Regenerate assets/example_actor.json from assets/actor_rules.json.

The shipped checkpoint is a hand-authored policy over write/read load
indicators, used by the README walkthrough and the explanation tests.
"""

from pathlib import Path

from knobtune.knobspace import load_schema
from knobtune.softtree import init_from_expert_tree, load_rule_tree, save_tree

ASSETS = Path(__file__).resolve().parent.parent / "assets"

METRICS = [
    {"name": "buffer_pool_pages", "min": 0.0, "max": 1048576.0},
    {"name": "buffer_pages_read", "min": 0.0, "max": 500000.0},
    {"name": "buffer_pages_written", "min": 0.0, "max": 500000.0},
    {"name": "threads_connected", "min": 0.0, "max": 5000.0},
    {"name": "threads_running", "min": 0.0, "max": 512.0},
    {"name": "lock_waits", "min": 0.0, "max": 10000.0},
]

TUNED_KNOBS = [
    "innodb_buffer_pool_size",
    "innodb_read_io_threads",
    "innodb_write_io_threads",
    "max_connections",
]


def main() -> None:
    schema = load_schema(ASSETS / "knob_schema.json")
    indices = [schema.index_of(n) for n in TUNED_KNOBS]
    tuned = schema.subset(indices)
    rules = load_rule_tree(ASSETS / "actor_rules.json")
    actor = init_from_expert_tree(
        rules,
        alpha0=10000.0,
        feature_names=[m["name"] for m in METRICS],
        output_dim=len(TUNED_KNOBS),
    )
    save_tree(
        actor,
        ASSETS / "example_actor.json",
        extra={
            "knob_indices": indices,
            "knob_schema": [
                {"name": s.name, "kind": s.kind, "min": s.min, "max": s.max, "default": s.default}
                for s in tuned.specs
            ],
            "metric_schema": METRICS,
        },
    )
    print(f"wrote {ASSETS / 'example_actor.json'}")


if __name__ == "__main__":
    main()
