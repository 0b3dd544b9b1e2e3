import json
from pathlib import Path

import numpy as np
import pytest

from knobtune.cli import main

ASSETS = Path(__file__).resolve().parent.parent / "assets"


@pytest.fixture()
def small_setup(tmp_path):
    """A 4-knob schema and simulated environment for fast pipeline runs."""
    schema = [
        {"name": "alpha", "kind": "continuous", "min": 0.0, "max": 10.0, "default": 2.0},
        {"name": "beta", "kind": "continuous", "min": 0.0, "max": 1.0, "default": 0.1},
        {"name": "gamma", "kind": "integer", "min": 0, "max": 1000, "default": 100},
        {"name": "delta", "kind": "continuous", "min": -5.0, "max": 5.0, "default": 0.0},
    ]
    (tmp_path / "schema.json").write_text(json.dumps(schema))
    env = {
        "schema": "schema.json",
        "influential": [
            {"index": 0, "optimum": 0.8, "strength": 1.0},
            {"index": 2, "optimum": 0.3, "strength": 0.8},
        ],
        "t0": 100.0,
        "l0": 25.0,
        "noise_std": 0.02,
        "seed": 5,
    }
    (tmp_path / "env.json").write_text(json.dumps(env))
    return tmp_path


def run(argv):
    return main([str(a) for a in argv])


def test_sample_writes_header_plus_n_rows(small_setup):
    out = small_setup / "data.csv"
    code = run(
        ["sample", "--n", 50, "--seed", 7, "--env-config", small_setup / "env.json", "--out", out]
    )
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 51
    assert lines[0] == "alpha,beta,gamma,delta,throughput_tps,latency_p95_ms"


def test_unknown_flag_exits_2(capsys):
    code = run(["sample", "--definitely-not-a-flag"])
    assert code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_schema_file_exits_2(small_setup):
    code = run(
        [
            "sample",
            "--n", 5,
            "--schema", small_setup / "nope.json",
            "--env-config", small_setup / "env.json",
            "--out", small_setup / "x.csv",
        ]
    )
    assert code == 2


def test_bad_dataset_exits_3(small_setup):
    (small_setup / "garbage.csv").write_text("a,b\n1,2\n")
    code = run(
        [
            "train-predictor",
            "--schema", small_setup / "schema.json",
            "--data", small_setup / "garbage.csv",
            "--out", small_setup / "model.json",
        ]
    )
    assert code == 3


def test_no_command_prints_help(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


@pytest.fixture()
def pipeline(small_setup):
    """Run sample -> train-predictor once; several tests reuse the artifacts."""
    data = small_setup / "data.csv"
    model = small_setup / "model.json"
    assert (
        run(
            [
                "sample",
                "--n", 80,
                "--seed", 3,
                "--env-config", small_setup / "env.json",
                "--out", data,
            ]
        )
        == 0
    )
    assert (
        run(
            [
                "train-predictor",
                "--schema", small_setup / "schema.json",
                "--data", data,
                "--epochs", 60,
                "--batch", 16,
                "--lr", 0.02,
                "--height", 3,
                "--seed", 1,
                "--out", model,
            ]
        )
        == 0
    )
    return small_setup


def test_rank_selects_exactly_top_k(pipeline):
    report = pipeline / "report.json"
    chart = pipeline / "chart.csv"
    code = run(
        [
            "rank",
            "--model", pipeline / "model.json",
            "--data", pipeline / "data.csv",
            "--schema", pipeline / "schema.json",
            "--budget", "full",
            "--background", 20,
            "--top-k", 2,
            "--seed", 4,
            "--out", report,
            "--chart-out", chart,
        ]
    )
    assert code == 0
    doc = json.loads(report.read_text())
    assert len(doc["selected"]) == 2
    assert len(doc["knobs"]) == 4
    ranks = [k["rank"] for k in doc["knobs"]]
    assert ranks == [0, 1, 2, 3]
    assert chart.read_text().splitlines()[0] == "name,importance"


def test_tune_and_explain_round_trip(pipeline):
    trace = pipeline / "trace.csv"
    ckpt = pipeline / "policy.json"
    code = run(
        [
            "tune",
            "--env-config", pipeline / "env.json",
            "--knobs", "alpha,gamma",
            "--steps", 40,
            "--seed", 9,
            "--batch", 8,
            "--warmup", 10,
            "--actor-lr", 0.01,
            "--height", 3,
            "--trace-out", trace,
            "--checkpoint-out", ckpt,
        ]
    )
    assert code == 0
    lines = trace.read_text().strip().splitlines()
    assert lines[0] == "step,throughput_tps,latency_p95_ms,reward"
    assert len(lines) == 41

    out = pipeline / "tree.txt"
    code = run(["explain", "--checkpoint", ckpt, "--format", "text", "--out", out])
    assert code == 0
    assert "?" in out.read_text()

    dot = pipeline / "tree.dot"
    assert run(["explain", "--checkpoint", ckpt, "--format", "dot", "--out", dot]) == 0
    assert dot.read_text().startswith("digraph")


def test_explain_with_state_traces_path(pipeline):
    ckpt = pipeline / "policy.json"
    run(
        [
            "tune",
            "--env-config", pipeline / "env.json",
            "--knobs", "all",
            "--steps", 20,
            "--seed", 2,
            "--batch", 8,
            "--warmup", 8,
            "--height", 3,
            "--checkpoint-out", ckpt,
        ]
    )
    doc = json.loads(ckpt.read_text())
    state = {m["name"]: (m["min"] + m["max"]) / 2 for m in doc["metric_schema"]}
    state_file = pipeline / "state.json"
    state_file.write_text(json.dumps({"metrics": state}))
    out = pipeline / "explained.txt"
    code = run(
        ["explain", "--checkpoint", ckpt, "--state", state_file, "--format", "text", "--out", out]
    )
    assert code == 0
    text = out.read_text()
    assert "<== taken" in text
    assert "soft path probability" in text


def test_tune_knobs_from_rank_report(pipeline):
    report = pipeline / "report.json"
    run(
        [
            "rank",
            "--model", pipeline / "model.json",
            "--data", pipeline / "data.csv",
            "--schema", pipeline / "schema.json",
            "--budget", "full",
            "--top-k", 2,
            "--seed", 4,
            "--out", report,
        ]
    )
    code = run(
        [
            "tune",
            "--env-config", pipeline / "env.json",
            "--knobs", report,
            "--steps", 15,
            "--seed", 0,
            "--batch", 4,
            "--warmup", 5,
            "--height", 2,
            "--trace-out", pipeline / "t.csv",
        ]
    )
    assert code == 0


def test_subcommands_are_deterministic_byte_for_byte(pipeline):
    args = [
        "tune",
        "--env-config", pipeline / "env.json",
        "--knobs", "alpha,gamma",
        "--steps", 30,
        "--seed", 12,
        "--batch", 8,
        "--warmup", 10,
        "--height", 3,
    ]
    t1, c1 = pipeline / "t1.csv", pipeline / "c1.json"
    t2, c2 = pipeline / "t2.csv", pipeline / "c2.json"
    assert run(args + ["--trace-out", t1, "--checkpoint-out", c1]) == 0
    assert run(args + ["--trace-out", t2, "--checkpoint-out", c2]) == 0
    assert t1.read_bytes() == t2.read_bytes()
    assert c1.read_bytes() == c2.read_bytes()


def test_config_file_supplies_defaults(small_setup):
    cfg = small_setup / "run.json"
    cfg.write_text(
        json.dumps(
            {
                "seed": 6,
                "sample": {
                    "n": 12,
                    "env-config": str(small_setup / "env.json"),
                    "out": str(small_setup / "cfg_data.csv"),
                },
            }
        )
    )
    assert run(["--config", cfg, "sample"]) == 0
    lines = (small_setup / "cfg_data.csv").read_text().strip().splitlines()
    assert len(lines) == 13


def test_explicit_flags_override_config(small_setup):
    cfg = small_setup / "run.json"
    cfg.write_text(
        json.dumps(
            {"sample": {"n": 12, "env-config": str(small_setup / "env.json")}}
        )
    )
    out = small_setup / "override.csv"
    assert run(["--config", cfg, "sample", "--n", 5, "--out", out]) == 0
    assert len(out.read_text().strip().splitlines()) == 6


def test_shipped_example_checkpoint_write_heavy_story():
    # The shipped hand-authored policy: a write-heavy state must reach a
    # leaf that raises the write-thread knob above its default.
    out_code = run(
        [
            "explain",
            "--checkpoint", ASSETS / "example_actor.json",
            "--state", ASSETS / "metric_state_write_heavy.json",
            "--format", "json",
            "--out", "-",
        ]
    )
    assert out_code == 0


def test_shipped_checkpoint_traced_leaf_raises_write_threads(capsys):
    run(
        [
            "explain",
            "--checkpoint", ASSETS / "example_actor.json",
            "--state", ASSETS / "metric_state_write_heavy.json",
            "--format", "json",
        ]
    )
    doc = json.loads(capsys.readouterr().out)
    steps = doc["traced_path"]["steps"]
    assert [s["metric"] for s in steps[:3]] == [
        "buffer_pool_pages",
        "buffer_pages_read",
        "buffer_pages_written",
    ]
    leaf = doc["leaves"][doc["traced_path"]["leaf_index"]]
    names = doc["knob_names"]
    write_threads = leaf["phys"][names.index("innodb_write_io_threads")]
    assert write_threads > 4  # schema default
    pool = leaf["phys"][names.index("innodb_buffer_pool_size")]
    assert pool == pytest.approx(1073741824, rel=0.05)  # pool left near default
