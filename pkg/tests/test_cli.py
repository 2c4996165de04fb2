"""Config parsing, command flows, and exit codes of the console interface."""

import json
import logging
import warnings

import numpy as np
import pytest

from teamopt.cli import (DEFAULT_COSTS, DEFAULT_LAMBDA_GRID, RunConfig,
                         apply_overrides, build_parser, config_from_dict,
                         load_config, main)
from teamopt.data import load_csv
from teamopt.errors import ConfigError


def tiny_config(out, **overrides):
    cfg = {
        "dataset": {"synthetic": {"num_classes": 3, "feature_dim": 4,
                                  "n": 400, "class_priors": [0.5, 0.3, 0.2],
                                  "seed": 1}},
        "train": {"iterations": 25, "hidden_dims": [4],
                  "calibration_interval": 10},
        "approaches": ["human-only", "fixed-voi"],
        "costs": [0.0, 0.1],
        "lambda_grid": [1.0],
        "seeds": [0],
        "out": str(out),
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


# --- config parsing -----------------------------------------------------------

def test_empty_config_uses_defaults():
    cfg = config_from_dict({})
    assert cfg.synth is not None and cfg.csv_path is None
    assert cfg.costs == DEFAULT_COSTS
    assert cfg.lambda_grid == DEFAULT_LAMBDA_GRID
    assert cfg.seeds == (0,) and cfg.out == "out"
    assert cfg.train.iterations == 2000


def test_config_coerces_lists_and_casts():
    cfg = config_from_dict({
        "train": {"hidden_dims": [8, 4], "iterations": 10},
        "costs": [0, 1], "seeds": ["3"], "approaches": ["human-only"],
        "team": {"utility": [[1, 0], [0, 1]], "query_cost": 0.2}})
    assert cfg.train.hidden_dims == (8, 4)
    assert cfg.costs == (0.0, 1.0) and cfg.seeds == (3,)
    assert isinstance(cfg.utility, np.ndarray)
    assert cfg.query_cost == 0.2


@pytest.mark.parametrize("raw", [
    {"surprise": 1},
    {"dataset": {"synthetic": {}, "csv": "x.csv", "num_classes": 2}},
    {"dataset": {"csv": "x.csv"}},  # csv needs num_classes
    {"dataset": {"synthetic": {"bogus_knob": 3}}},
    {"train": {"bogus_knob": 3}},
    {"approaches": ["quantum"]},
    {"approaches": []},
    {"costs": []},
    {"formats": ["pdf"]},
    {"team": {"bribe": 1}},
])
def test_config_rejections(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_load_config_errors(tmp_path):
    assert load_config(None).synth is not None
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(arr))


def test_apply_overrides():
    parser = build_parser()
    args = parser.parse_args(["sweep", "--seed", "7", "--out", "elsewhere",
                              "--costs", "0.1,0.3"])
    cfg = apply_overrides(RunConfig(), args)
    assert cfg.seeds == (7,)
    assert cfg.out == "elsewhere"
    assert cfg.costs == (0.1, 0.3)
    args = parser.parse_args(["sweep", "--costs", "0.1,spam"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), args)


# --- command flows ---------------------------------------------------------------

def test_generate_writes_loadable_csv(tmp_path):
    path = write_config(tmp_path, tiny_config(tmp_path / "gen"))
    assert main(["generate", "--config", path]) == 0
    ds = load_csv(tmp_path / "gen" / "dataset.csv", 3)
    assert len(ds) == 400 and ds.feature_dim == 4


def test_generate_rejects_csv_source(tmp_path):
    data_cfg = tiny_config(tmp_path / "gen")
    assert main(["generate", "--config", write_config(tmp_path, data_cfg)]) == 0
    csv_cfg = tiny_config(tmp_path / "gen2")
    csv_cfg["dataset"] = {"csv": str(tmp_path / "gen" / "dataset.csv"),
                          "num_classes": 3}
    path = write_config(tmp_path, csv_cfg, "csv.json")
    assert main(["generate", "--config", path]) == 2


def test_sweep_writes_reports_and_repeats_bytewise(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, tiny_config(out))
    assert main(["sweep", "--config", path]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["loss_vs_cost.svg", "sweep.csv", "sweep.json"]
    first = (out / "sweep.json").read_bytes()
    first_csv = (out / "sweep.csv").read_bytes()
    assert main(["sweep", "--config", path]) == 0
    assert (out / "sweep.json").read_bytes() == first
    assert (out / "sweep.csv").read_bytes() == first_csv
    payload = json.loads(first.decode())
    assert [r["approach"] for r in payload] == ["fixed-voi", "human-only"]
    for rec in payload[0]["records"]:
        assert set(rec) == {"c", "total_loss", "classification_error",
                            "query_rate", "selected_lambda"}


def test_sweep_runs_from_csv_dataset(tmp_path):
    gen = write_config(tmp_path, tiny_config(tmp_path / "gen"))
    assert main(["generate", "--config", gen]) == 0
    cfg = tiny_config(tmp_path / "out2", approaches=["human-only"])
    cfg["dataset"] = {"csv": str(tmp_path / "gen" / "dataset.csv"),
                      "num_classes": 3}
    path = write_config(tmp_path, cfg, "csv_run.json")
    assert main(["sweep", "--config", path]) == 0
    assert (tmp_path / "out2" / "sweep.json").exists()


def test_sweep_partial_failure_exits_three(tmp_path):
    cfg = tiny_config(tmp_path / "bad", approaches=["fixed-disc",
                                                    "human-only"])
    cfg["train"] = {"iterations": 5, "hidden_dims": [4],
                    "learning_rate": 1e200}
    path = write_config(tmp_path, cfg)
    logging.disable(logging.CRITICAL)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with np.errstate(all="ignore"):
                rc = main(["sweep", "--config", path])
    finally:
        logging.disable(logging.NOTSET)
    assert rc == 3
    # the surviving approach is still fully reported
    payload = json.loads((tmp_path / "bad" / "sweep.json").read_text())
    by_name = {r["approach"]: r for r in payload}
    assert by_name["fixed-disc"]["records"] == []
    assert len(by_name["human-only"]["records"]) == 2


def test_sweep_missing_config_exits_two(tmp_path):
    assert main(["sweep", "--config", str(tmp_path / "absent.json")]) == 2


def test_cli_seed_override_changes_output(tmp_path):
    out = tmp_path / "out"
    path = write_config(tmp_path, tiny_config(out))
    assert main(["sweep", "--config", path, "--seed", "0"]) == 0
    base = (out / "sweep.json").read_bytes()
    assert main(["sweep", "--config", path, "--seed", "1"]) == 0
    assert (out / "sweep.json").read_bytes() != base


def test_analyze_writes_tables_and_tree(tmp_path):
    out = tmp_path / "an"
    cfg = tiny_config(out, approaches=["fixed-voi", "joint-disc",
                                       "human-only"])
    path = write_config(tmp_path, cfg)
    assert main(["analyze", "--config", path]) == 0
    per_class = json.loads((out / "per_class.json").read_text())
    assert [row["class"] for row in per_class] == [0, 1, 2]
    assert set(per_class[0]["systems"]) == {"fixed-voi", "joint-disc"}
    tree = json.loads((out / "error_tree.json").read_text())
    assert set(tree) == {"feature_index", "threshold", "left", "right",
                         "leaf_stats"}
    node = tree
    while node["leaf_stats"] is None:
        node = node["left"]
    assert set(node["leaf_stats"]["machine_error"]) == {"fixed-voi",
                                                        "joint-disc"}


def test_analyze_needs_trainable_approach(tmp_path):
    cfg = tiny_config(tmp_path / "an2", approaches=["human-only"])
    assert main(["analyze", "--config", write_config(tmp_path, cfg)]) == 2


def test_verify_passes_and_detects_injected_fault():
    assert main(["verify"]) == 0
    assert main(["verify", "--inject-gradient-fault"]) == 1
