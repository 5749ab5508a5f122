import json

import numpy as np
import pandas as pd
import pytest

from components.experiment_runner import (
    CSV_COLUMNS,
    ExperimentConfig,
    apply_cli_overrides,
    load_config,
    parse_config,
    replicate_seed,
    run_experiment,
    run_replicate,
    serialize_config,
)
from services.errors import ConfigError
from services.ising_model import IsingLattice
from services.model_factory import ModelConfig
from services.oracles import brute_force_expectation


def small_ising(**changes):
    options = dict(model=ModelConfig(kind="ising", M=2, beta=0.3), n_particles=64, replicates=3)
    options.update(changes)
    return ExperimentConfig(**options)


def test_config_text_round_trip():
    config = small_ising(method="dc-mix-ann", sweeps=2, cess_threshold=0.99, summary_nodes=["a", "b"],
                         workers=["tcp://h1:5570", "tcp://h2:5570"], adaptive_child_resampling=True)
    assert parse_config(serialize_config(config)) == config


def test_missing_sections_take_defaults():
    config = parse_config("[model]\nkind = gsm\nM = 4\n")
    assert config.model.kind == "gsm"
    assert config.model.M == 4
    assert config.method == "dc-sir"
    assert config.n_particles == ExperimentConfig().n_particles


def test_section_keys():
    config = parse_config("[method]\nname = dc-ann\n[thresholds]\ncess = 0.9\n[output]\ndir = out/x\n")
    assert config.method == "dc-ann"
    assert config.cess_threshold == 0.9
    assert config.out_dir == "out/x"


@pytest.mark.parametrize("text", [
    "[run]\nparticles = 5\n",
    "[model]\ncolour = red\n",
    "[plots]\nstyle = box\n",
    "[run]\nn_particles = many\n",
    "[method]\nname = dc-magic\n",
    "[thresholds]\ncess = 1.5\n",
    "[distributed]\ncut_rule = middle\n",
    "[model]\nkind = hier\n[method]\nname = mh\n",
    "not an ini file",
])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(serialize_config(small_ising()))
    assert load_config(path) == small_ising()


def test_replicate_seeds_are_distinct_and_stable():
    seeds = [replicate_seed(7, r) for r in range(5)]
    assert len(set(seeds)) == 5
    assert seeds == [replicate_seed(7, r) for r in range(5)]
    assert replicate_seed(8, 0) != seeds[0]


def test_run_experiment_is_deterministic(tmp_path):
    config = small_ising()
    first = run_experiment(config, tmp_path / "a")
    second = run_experiment(config, tmp_path / "b")
    assert first["error"] is None
    frame_a = first["frame"].drop(columns=["wall_clock_s"])
    frame_b = second["frame"].drop(columns=["wall_clock_s"])
    pd.testing.assert_frame_equal(frame_a, frame_b)
    assert list(first["frame"].columns) == CSV_COLUMNS
    assert first["frame"]["replicate"].tolist() == [0, 1, 2]


def test_result_files(tmp_path):
    result = run_experiment(small_ising(), tmp_path)
    written = pd.read_csv(result["csv"])
    assert len(written) == 3
    summary = json.loads(result["json"].read_text())
    assert summary["dc-sir"]["replicates"] == 3
    assert summary["dc-sir"]["log_z"]["count"] == 3
    assert summary["dc-sir"]["log_z"]["q1"] <= summary["dc-sir"]["log_z"]["median"]
    assert "expected_energy" in summary["dc-sir"]


def test_failed_replicates_fill_the_error_column(tmp_path):
    config = small_ising(method="dc-mix", mixture_budget=1, replicates=2)
    result = run_experiment(config, tmp_path)
    assert (result["frame"]["error"] != "").all()
    assert result["frame"]["log_z"].isna().all()
    assert result["error"] == "all 2 replicate(s) failed"
    assert result["summary"]["dc-mix"]["failed"] == 2


def test_in_process_workers_reproduce_the_serial_row():
    serial = run_replicate(small_ising(model=ModelConfig(kind="ising", M=4, beta=0.3)), 0)
    distributed = run_replicate(
        small_ising(model=ModelConfig(kind="ising", M=4, beta=0.3), transport="inprocess", workers_count=2), 0)
    assert distributed["error"] == ""
    assert distributed["log_z"] == serial["log_z"]
    assert distributed["transmitted_states"] > 0
    assert serial["transmitted_states"] == 0


def test_hierarchical_row_has_posterior_summaries():
    config = ExperimentConfig(model=ModelConfig(kind="hier", data_seed=2), n_particles=32,
                              summary_nodes=["root"])
    row = run_replicate(config, 0)
    assert row["error"] == ""
    posterior = json.loads(row["posterior"])
    assert set(posterior) == {"theta:root", "sigma2:root"}
    assert posterior["sigma2:root"]["mean"] > 0
    assert np.isnan(row["expected_energy"])


def test_gibbs_row():
    config = ExperimentConfig(model=ModelConfig(kind="hier", data_seed=2), method="gibbs", iterations=40,
                              summary_nodes=["root"])
    row = run_replicate(config, 0)
    assert row["error"] == ""
    assert row["n"] == 40
    assert "sigma2:root" in json.loads(row["posterior"])


def test_cli_overrides():
    config = small_ising(method="mh")
    updated = apply_cli_overrides(config, "hier", seed=11, out="elsewhere", workers="h1:1,tcp://h2:2")
    assert updated.model.kind == "hier"
    assert updated.method == "dc-sir"
    assert updated.seed == 11
    assert updated.out_dir == "elsewhere"
    assert updated.workers == ["tcp://h1:1", "tcp://h2:2"]
    assert updated.distributed


def test_cli_overrides_keep_unset_values():
    config = small_ising(seed=5)
    assert apply_cli_overrides(config, "ising") == config


def test_bad_model_fails_every_replicate_without_aborting(tmp_path):
    config = ExperimentConfig(model=ModelConfig(kind="ising", M=2, beta=-1.0), n_particles=16, replicates=2)
    result = run_experiment(config, tmp_path)
    frame = result["frame"]
    assert frame["replicate"].tolist() == [0, 1]
    assert frame["error"].str.contains("beta must be non-negative").all()
    assert result["error"] == "all 2 replicate(s) failed"


def test_unexpected_exception_lands_in_error_column(monkeypatch):
    def broken_row(config, model, tree, rng):
        raise RuntimeError("boom")

    monkeypatch.setattr("components.experiment_runner._smc_row", broken_row)
    row = run_replicate(small_ising(), 0)
    assert row["error"] == "RuntimeError: boom"
    assert row["wall_clock_s"] >= 0


def test_expected_energy_uses_site_order():
    model = IsingLattice(4, 0.3)
    row = run_replicate(small_ising(model=ModelConfig(kind="ising", M=4, beta=0.3), n_particles=2000), 0)
    assert row["error"] == ""
    assert row["expected_energy"] == pytest.approx(brute_force_expectation(model, model.energy), abs=1.0)
