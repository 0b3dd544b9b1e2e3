"""Command-line entry point.

Five subcommands cover the pipeline, communicating only through files so
every stage can be inspected, resumed, or replaced:

    sample           draw a Latin hypercube design and measure it
    train-predictor  fit the performance-level classifier
    rank             attribute performance to knobs and pick the top-k
    tune             run the tuning agent against an environment
    explain          discretize a policy checkpoint and render it

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 runtime failures. A `--config` JSON file may supply any flag
(section per subcommand, top-level keys apply everywhere); explicit
flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import explain as explain_mod
from . import predictor as predictor_mod
from .env import AdapterEnv, SimEnv, load_adapter_config, load_sim_config
from .errors import ConfigError, DataError, TuningError
from .knobspace import (
    KnobSchema,
    KnobSpec,
    KnobVector,
    MetricSpec,
    MetricVector,
    PerfSample,
    load_schema,
)
from .rlcore import AgentHyper, DdpgAgent, run_episode
from .sampler import lhs_sample
from .shapley import global_importance, kernel_shap, select_knobs
from .softtree import init_from_expert_tree, load_rule_tree, load_tree, random_tree, save_tree

logger = logging.getLogger("knobtune")

DEFAULT_TOP_K = 9  # the canonical selection size for the shipped examples


def _build_env(args, schema_flag: str | None):
    """Construct the environment named by --env/--env-config."""
    if args.env == "sim":
        if not args.env_config:
            raise ConfigError("--env sim requires --env-config pointing at a sim config file")
        cfg = load_sim_config(args.env_config)
        env = SimEnv(cfg)
    elif args.env == "adapter":
        if not args.env_config:
            raise ConfigError("--env adapter requires --env-config")
        override = shlex.split(args.adapter_cmd) if args.adapter_cmd else None
        env = AdapterEnv(load_adapter_config(args.env_config, cmd_override=override))
    else:
        raise ConfigError(f"unknown environment kind {args.env!r}")
    if schema_flag:
        declared = load_schema(schema_flag)
        if declared != env.schema:
            raise ConfigError(
                f"schema {schema_flag} does not match the schema referenced by {args.env_config}"
            )
    return env


def _effective_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if getattr(args, "global_seed", None) is not None:
        return args.global_seed
    return 0


def _require(args, *names: str) -> None:
    """Flags that may come from --config are validated here, not by argparse."""
    missing = [n for n in names if getattr(args, n.replace("-", "_"), None) is None]
    if missing:
        raise ConfigError("missing required flags: " + ", ".join(f"--{n}" for n in missing))


# -- sample -------------------------------------------------------------------


def cmd_sample(args) -> int:
    _require(args, "out")
    env = _build_env(args, args.schema)
    schema = env.schema
    seed = _effective_seed(args)
    batch = lhs_sample(schema.size, args.n, seed, midpoint=args.midpoint)
    samples = []
    for unit in batch.points:
        knobs = KnobVector(schema.from_unit(unit))
        _, throughput, latency = env.step(knobs)
        samples.append(PerfSample(knobs=knobs, throughput=throughput, latency_p95=latency))
    predictor_mod.save_dataset(args.out, schema, samples)
    print(f"wrote {len(samples)} measured configurations to {args.out}")
    return 0


# -- train-predictor ----------------------------------------------------------


def cmd_train_predictor(args) -> int:
    _require(args, "schema", "data", "out")
    schema = load_schema(args.schema)
    samples = predictor_mod.load_dataset(args.data, schema)
    data = predictor_mod.build_dataset(samples, schema)
    seed = _effective_seed(args)
    if args.expert:
        rules = load_rule_tree(args.expert)
        tree = init_from_expert_tree(
            rules,
            alpha0=args.alpha,
            feature_names=schema.names,
            output_dim=predictor_mod.N_LEVELS,
            height=args.height,
        )
    else:
        tree = random_tree(args.height, schema.size, predictor_mod.N_LEVELS, args.alpha, seed)
    cfg = predictor_mod.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=seed
    )
    model, history = predictor_mod.train_predictor(tree, data, cfg)
    save_tree(model, args.out, extra={"knob_names": list(schema.names)})
    acc = predictor_mod.accuracy(model, data)
    first = f"{history[0]:.4f}" if history else "n/a"
    last = f"{history[-1]:.4f}" if history else "n/a"
    print(f"trained {args.epochs} epochs: loss {first} -> {last}, training accuracy {acc:.3f}")
    print(f"wrote model checkpoint to {args.out}")
    return 0


# -- rank ---------------------------------------------------------------------


def cmd_rank(args) -> int:
    _require(args, "model", "data", "schema", "out")
    schema = load_schema(args.schema)
    tree, _ = load_tree(args.model)
    if tree.input_dim != schema.size:
        raise DataError(f"model reads {tree.input_dim} knobs but the schema has {schema.size}")
    samples = predictor_mod.load_dataset(args.data, schema)
    data = predictor_mod.build_dataset(samples, schema)
    seed = _effective_seed(args)

    def model(x):
        return predictor_mod.predict_score(tree, x)

    rng = np.random.default_rng(seed)
    n = data.inputs.shape[0]
    bg_count = min(args.background, n)
    background = data.inputs[rng.choice(n, size=bg_count, replace=False)]
    budget = args.budget
    if isinstance(budget, str) and budget != "full":
        try:
            budget = int(budget)
        except ValueError:
            raise ConfigError(f"--budget must be an integer or 'full', got {budget!r}") from None
    attributions = [
        kernel_shap(model, row, background, budget=budget, seed=seed + i)
        for i, row in enumerate(data.inputs)
    ]
    report = global_importance(attributions)
    selected = select_knobs(report, args.top_k)

    doc = {
        "top_k": args.top_k,
        "selected": [{"index": i, "name": schema.names[i]} for i in selected],
        "knobs": [
            {
                "name": schema.names[int(idx)],
                "index": int(idx),
                "importance": float(report.importance[int(idx)]),
                "rank": rank,
            }
            for rank, idx in enumerate(report.ranking)
        ],
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.chart_out:
        with open(args.chart_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "importance"])
            for idx in report.ranking:
                writer.writerow([schema.names[int(idx)], repr(float(report.importance[int(idx)]))])
    names = ", ".join(schema.names[i] for i in selected)
    print(f"selected top {args.top_k} knobs: {names}")
    print(f"wrote importance report to {args.out}")
    return 0


# -- tune -----------------------------------------------------------------------


def _parse_knob_selection(spec: str | None, schema: KnobSchema) -> list[int]:
    if spec is None or spec == "all":
        return list(range(schema.size))
    path = Path(spec)
    if path.exists():
        try:
            doc = json.loads(path.read_text())
            return [int(e["index"]) for e in doc["selected"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"could not read knob selection from {path}: {e}") from None
    indices = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if token.isdigit():
            idx = int(token)
            if not 0 <= idx < schema.size:
                raise ConfigError(f"knob index {idx} outside schema of size {schema.size}")
            indices.append(idx)
        else:
            indices.append(schema.index_of(token))
    if not indices:
        raise ConfigError(f"--knobs {spec!r} selected nothing")
    return indices


def cmd_tune(args) -> int:
    env = _build_env(args, args.schema)
    schema = env.schema
    seed = _effective_seed(args)
    knob_indices = _parse_knob_selection(args.knobs, schema)
    hyper = AgentHyper(
        discount=args.gamma,
        tau=args.tau,
        actor_lr=args.actor_lr,
        critic_lr=args.critic_lr,
        batch_size=args.batch,
        buffer_capacity=args.buffer,
        noise_start=args.noise_start,
        noise_end=args.noise_end,
        c_t=args.ct,
        c_l=args.cl if args.cl is not None else 1.0 - args.ct,
        warmup_steps=args.warmup,
        use_gumbel=not args.no_gumbel,
        gumbel_temperature=args.gumbel_tau,
    )
    actor = None
    if args.expert_actor:
        rules = load_rule_tree(args.expert_actor)
        actor = init_from_expert_tree(
            rules,
            alpha0=args.alpha0,
            feature_names=env.metric_names,
            output_dim=len(knob_indices),
            height=args.height,
        )
    agent = DdpgAgent(
        schema=schema,
        knob_indices=knob_indices,
        metric_dim=len(env.metric_names),
        hyper=hyper,
        seed=seed,
        actor=actor,
        actor_height=args.height,
        actor_alpha0=args.alpha0,
    )
    _, trace = run_episode(agent, env, max_steps=args.steps)

    if args.trace_out:
        with open(args.trace_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "throughput_tps", "latency_p95_ms", "reward"])
            for row in trace.rows:
                writer.writerow(
                    [row.step, repr(row.throughput), repr(row.latency), repr(row.reward)]
                )
    if args.checkpoint_out:
        lo, hi = env.metric_bounds()
        tuned = schema.subset(knob_indices)
        save_tree(
            agent.actor,
            args.checkpoint_out,
            extra={
                "knob_indices": knob_indices,
                "knob_schema": [
                    {"name": s.name, "kind": s.kind, "min": s.min, "max": s.max, "default": s.default}
                    for s in tuned.specs
                ],
                "metric_schema": [
                    {"name": n, "min": float(l), "max": float(h)}
                    for n, l, h in zip(env.metric_names, lo, hi)
                ],
            },
        )
    best = max((r.throughput for r in trace.rows), default=trace.initial_throughput)
    status = "truncated early" if trace.truncated else f"ran {len(trace.rows)} steps"
    print(
        f"tuning {status}: initial throughput {trace.initial_throughput:.2f}, "
        f"best observed {best:.2f}"
    )
    if args.trace_out:
        print(f"wrote trace to {args.trace_out}")
    if args.checkpoint_out:
        print(f"wrote policy checkpoint to {args.checkpoint_out}")
    return 0


# -- explain ----------------------------------------------------------------------


def _load_state_file(path: str) -> MetricVector:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"state file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"state file {path} is not valid JSON: {e}") from None
    metrics = doc.get("metrics", doc) if isinstance(doc, dict) else None
    if not isinstance(metrics, dict) or not metrics:
        raise DataError(f"state file {path} must hold an object of metric name -> value")
    names = tuple(metrics.keys())
    return MetricVector(np.array([float(metrics[n]) for n in names]), names)


def cmd_explain(args) -> int:
    _require(args, "checkpoint")
    tree, extra = load_tree(args.checkpoint)
    try:
        metric_specs = [
            MetricSpec(m["name"], float(m["min"]), float(m["max"]))
            for m in extra["metric_schema"]
        ]
        knob_schema = KnobSchema(
            [
                KnobSpec(s["name"], s["kind"], float(s["min"]), float(s["max"]), float(s["default"]))
                for s in extra["knob_schema"]
            ]
        )
    except KeyError as e:
        raise DataError(
            f"checkpoint {args.checkpoint} lacks the session metadata ({e}); "
            "use a checkpoint written by `tune`"
        ) from None
    hard = explain_mod.discretize(tree, metric_specs, knob_schema)

    path = None
    state = None
    if args.state:
        state = _load_state_file(args.state)
    elif args.from_env:
        env = _build_env(args, None)
        if tuple(env.metric_names) != hard.metric_names:
            raise ConfigError("environment metrics do not match the checkpoint's metric schema")
        state, _, _ = env.reset()
    if state is not None:
        path = explain_mod.trace_decision(hard, state)

    rendered = explain_mod.render(hard, args.format, path)
    if args.format == "text" and path is not None:
        lo = np.array(hard.metric_lo)
        hi = np.array(hard.metric_hi)
        ordered = np.array([state.value_of(n) for n in hard.metric_names])
        norm = np.clip((ordered - lo) / (hi - lo), 0.0, 1.0)
        fidelity = explain_mod.soft_path_probability(tree, norm, path.leaf_index)
        rendered += f"soft path probability of the chosen leaf: {fidelity:.4f}\n"

    if args.out and args.out != "-":
        Path(args.out).write_text(rendered)
        print(f"wrote {args.format} explanation to {args.out}")
    else:
        sys.stdout.write(rendered)
    return 0


# -- parser ---------------------------------------------------------------------


def _add_env_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", choices=["sim", "adapter"], default="sim", help="environment kind")
    p.add_argument("--env-config", help="environment config file (JSON)")
    p.add_argument("--adapter-cmd", help="override the adapter command line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knobtune",
        description="Explainable database knob tuning: sample, predict, rank, tune, explain.",
    )
    parser.add_argument("--config", help="JSON file supplying default flag values")
    parser.add_argument("--verbose", action="store_true", help="log progress details")
    parser.add_argument(
        "--seed", type=int, default=None, dest="global_seed", help="default seed for all stages"
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("sample", help="measure a Latin hypercube design of configurations")
    p.add_argument("--schema", help="knob schema file (validated against the env config)")
    p.add_argument("--n", type=int, default=200, help="number of configurations")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--midpoint", action="store_true", help="center points in their strata")
    p.add_argument("--out", help="dataset CSV to write")
    _add_env_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-predictor", help="fit the performance-level classifier")
    p.add_argument("--schema")
    p.add_argument("--data", help="dataset CSV from `sample`")
    p.add_argument("--out", help="model checkpoint to write")
    p.add_argument("--expert", help="expert rule tree (JSON) to initialize from")
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--alpha", type=float, default=10.0, help="gate steepness")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("rank", help="rank knobs by attribution and select the top-k")
    p.add_argument("--model", help="predictor checkpoint")
    p.add_argument("--data", help="dataset CSV")
    p.add_argument("--schema")
    p.add_argument("--budget", default=None, help="coalitions per explanation, or 'full'")
    p.add_argument("--background", type=int, default=50, help="background rows for imputation")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="importance report (JSON)")
    p.add_argument("--chart-out", help="optional CSV of name,importance for plotting")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("tune", help="run the tuning agent against an environment")
    p.add_argument("--schema", help="knob schema file (validated against the env config)")
    p.add_argument("--knobs", help="rank report path, comma list of names/indices, or 'all'")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ct", type=float, default=0.5, help="throughput reward weight")
    p.add_argument("--cl", type=float, default=None, help="latency reward weight (default 1-ct)")
    p.add_argument("--height", type=int, default=5, help="policy tree height")
    p.add_argument("--alpha0", type=float, default=1.0, help="initial gate steepness")
    p.add_argument("--expert-actor", help="expert rule tree for the policy (JSON)")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--buffer", type=int, default=100_000)
    p.add_argument("--actor-lr", type=float, default=1e-4)
    p.add_argument("--critic-lr", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tau", type=float, default=0.005)
    p.add_argument("--noise-start", type=float, default=0.2)
    p.add_argument("--noise-end", type=float, default=0.02)
    p.add_argument("--warmup", type=int, default=None, help="pure-exploration steps")
    p.add_argument("--no-gumbel", action="store_true", help="disable gumbel weight sampling")
    p.add_argument("--gumbel-tau", type=float, default=1.0)
    p.add_argument("--trace-out", help="per-step CSV of throughput, latency, reward")
    p.add_argument("--checkpoint-out", help="policy checkpoint (JSON)")
    _add_env_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("explain", help="discretize a policy checkpoint and render it")
    p.add_argument("--checkpoint", help="checkpoint written by `tune`")
    p.add_argument("--state", help="metric state file (JSON) to trace through the tree")
    p.add_argument("--from-env", action="store_true", help="sample the state from --env-config")
    p.add_argument("--format", choices=list(explain_mod.RENDER_FORMATS), default="text")
    p.add_argument("--out", default="-", help="output file, or '-' for stdout")
    _add_env_flags(p)
    p.set_defaults(func=cmd_explain)

    parser.subparser_map = {name: sp for name, sp in sub.choices.items()}
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Seed parser defaults from --config before parsing."""
    if "--config" not in argv:
        return
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return  # argparse will report the missing value
    path = Path(argv[idx + 1])
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    command = next((a for a in argv if not a.startswith("-") and a != str(path)), None)
    merged = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    if command and isinstance(doc.get(command), dict):
        merged.update(doc[command])
    defaults = {k.replace("-", "_"): v for k, v in merged.items()}
    parser.set_defaults(**defaults)
    if command in parser.subparser_map:
        parser.subparser_map[command].set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except TuningError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.func(args)
    except TuningError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
