"""
Tests for experiment configuration loading, echoing and the command-line entry point
"""

import json
import logging
import os

import pandas as pd
import pytest
import yaml

from src.config import ALL_VARIANTS, ExperimentConfig, config_from_dict, config_hash, dump_config, load_config
from src.errors import ConfigurationError
from src.main import apply_overrides, main

CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_defaults():
    cfg = config_from_dict(None)
    assert cfg.scenario == "intersection"
    assert cfg.variants == ALL_VARIANTS
    assert cfg.horizon == 40
    assert cfg.dt == 0.1
    assert cfg.selection.s_max == 2
    assert cfg.postponing.branching_threshold == 1.0
    assert cfg.limits.wheelbase == 2.7


def test_dump_and_reload_is_identity(tmp_path):
    cfg = config_from_dict({"scenario": "merging", "seed": 11, "weights": {"q_ob": 80.0}, "monte_carlo": {"n_runs": 5}})
    echoed = write_yaml(tmp_path / "echo.yaml", yaml.safe_load(dump_config(cfg)))
    again = load_config(echoed)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_hash_changes_with_settings():
    assert config_hash(ExperimentConfig(seed=1)) != config_hash(ExperimentConfig(seed=2))


def test_shipped_configs_validate():
    for name in ("intersection.yaml", "merging.yaml", "custom.yaml"):
        cwd = os.getcwd()
        os.chdir(os.path.dirname(CONFIGS))
        try:
            cfg = load_config(os.path.join(CONFIGS, name))
        finally:
            os.chdir(cwd)
        assert cfg.output_dir.startswith("results")


def test_unknown_keys_warn(caplog):
    with caplog.at_level(logging.WARNING, logger="src.config"):
        cfg = config_from_dict({"horizon": 20, "horizn": 30, "solver": {"max_iters": 3}})
    assert cfg.horizon == 20
    messages = " ".join(r.getMessage() for r in caplog.records)
    assert "horizn" in messages
    assert "max_iters" in messages


@pytest.mark.parametrize(
    "data,field",
    [
        ({"dt": 0.0}, "dt"),
        ({"horizon": 1}, "horizon"),
        ({"scenario": "roundabout"}, "scenario"),
        ({"variants": ["full", "bogus"]}, "variants"),
        ({"scenario": "custom"}, "scenario_file"),
        ({"solver": {"max_iter": 0}}, "solver.max_iter"),
        ({"monte_carlo": {"workers": 0}}, "monte_carlo.workers"),
        ({"weights": {"Q": [[1.0, 0.0], [0.0, -2.0]]}}, "weights.Q"),
    ],
)
def test_invalid_values_name_their_field(data, field):
    with pytest.raises(ConfigurationError) as err:
        config_from_dict(data)
    assert err.value.field == field


def test_wrong_type_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        config_from_dict({"selection": {"s_max": 2, "lam": None}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"limits": "fast"})


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / "nope.yaml"))
    broken = tmp_path / "broken.yaml"
    broken.write_text("horizon: [1, 2\n")
    with pytest.raises(ConfigurationError):
        load_config(str(broken))


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), output_dir="out", workers=4, seed=9, variants=["cmpcc"])
    assert cfg.output_dir == "out"
    assert cfg.monte_carlo.workers == 4
    assert cfg.seed == 9
    assert cfg.variants == ("cmpcc",)
    assert apply_overrides(cfg) is cfg


def test_main_rejects_invalid_config(tmp_path):
    path = write_yaml(tmp_path / "bad.yaml", {"dt": -0.1})
    assert main(["run", "--config", path]) == 2
    assert main(["validate", "--config", path]) == 2


def test_main_validate_echoes_defaults(tmp_path, capsys):
    path = write_yaml(tmp_path / "min.yaml", {"scenario": "merging", "seed": 3})
    assert main(["validate", "--config", path]) == 0
    echoed = yaml.safe_load(capsys.readouterr().out)
    assert echoed["seed"] == 3
    assert echoed["horizon"] == 40
    assert config_from_dict(echoed) == load_config(path)


def test_main_runs_custom_scenario(tmp_path):
    scenario = os.path.join(os.path.dirname(CONFIGS), "data", "fixtures", "crosswalk.yaml")
    path = write_yaml(
        tmp_path / "run.yaml",
        {"scenario": "custom", "scenario_file": scenario, "variants": ["cmpcc"], "horizon": 10, "solver": {"max_iter": 10}},
    )
    out = tmp_path / "out"
    assert main(["run", "--config", path, "--output-dir", str(out)]) == 0
    for name in ("config.yaml", "results.csv", "summary.csv", "velocity_profiles.csv", "branches.csv", "manifest.json", "run.log"):
        assert (out / name).exists(), name
    results = pd.read_csv(out / "results.csv")
    assert list(results["variant"]) == ["cmpcc"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == config_hash(load_config(str(out / "config.yaml")))
    assert manifest["artifacts"]["results"] == "results.csv"
    assert (out / "traces" / "crosswalk_cmpcc.jsonl").exists()


def test_main_runs_merging_with_profiles(tmp_path):
    path = write_yaml(
        tmp_path / "merge.yaml",
        {
            "scenario": "merging",
            "variants": ["cmpcc"],
            "horizon": 10,
            "merging": {"timeout": 1.0},
            "monte_carlo": {"n_runs": 2, "trace_runs": 1},
        },
    )
    out = tmp_path / "out"
    assert main(["run", "--config", path, "--output-dir", str(out)]) == 0
    results = pd.read_csv(out / "results.csv")
    velocities = pd.read_csv(out / "velocity_profiles.csv")
    branches = pd.read_csv(out / "branches.csv")
    assert len(results) == 2
    assert set(velocities["run"]) == {0}
    assert len(velocities) == int(results.loc[results["run"] == 0, "n_steps"].iloc[0])
    assert set(branches["variant"]) == {"cmpcc"}
    assert (out / "traces" / "merging_run0000_cmpcc.jsonl").exists()
    assert not (out / "traces" / "merging_run0001_cmpcc.jsonl").exists()
