import json

import pytest

from config_reader import ConfigReader
from errors import ConfigError
from experiment_config import ChainParameters, ExperimentConfig, GeometryParameters, ModelParameters
from main import main
from serialization import read_table


def write_config(tmp_path, config: dict):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))

    return str(path)


def test_required_keys_are_checked():
    with pytest.raises(ConfigError, match="'rdm' needs key 'geometry.L'"):
        ConfigReader(None, command="rdm", overrides={"m": 1}).read()

    with pytest.raises(ConfigError, match="geometry.m_list"):
        ConfigReader(None, command="decay-scan").read()


def test_file_values_and_overrides(tmp_path):
    path = write_config(tmp_path, {
        "model": {"lambda": 0.5, "delta": 2.0},
        "geometry": {"m": 2, "L": 3, "beta": 12.0},
        "chain": {"sweeps": 50},
        "seed": 4,
    })
    config = ConfigReader(path, command="rdm", overrides={"L": 1, "sweeps": None}).read()

    assert config.model.lam == 0.5 and config.model.delta == 2.0
    assert config.geometry.m == 2 and config.geometry.L == 1
    assert config.chain.sweeps == 50
    assert config.seed == 4


def test_theta_override_replaces_rates(tmp_path):
    path = write_config(tmp_path, {"model": {"lambda": 0.5, "delta": 2.0}})
    config = ConfigReader(path, command="branching", overrides={"theta": 0.25}).read()

    assert config.model == ModelParameters(lam=0.25, delta=1.0, theta=0.25)


def test_theta_and_rates_conflict(tmp_path):
    path = write_config(tmp_path, {"model": {"theta": 0.5, "lambda": 1.0}})

    with pytest.raises(ConfigError):
        ConfigReader(path, command="branching").read()


def test_invalid_files(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{")

    with pytest.raises(ConfigError):
        ConfigReader(str(broken), command="branching").read()

    with pytest.raises(ConfigError):
        ConfigReader(str(tmp_path / "missing.json"), command="branching").read()

    with pytest.raises(ConfigError):
        ConfigReader(write_config(tmp_path, {"chain": {"sweeps": "many"}}), command="branching").read()

    with pytest.raises(ConfigError):
        ConfigReader(write_config(tmp_path, {"chain": {"steps": 10}}), command="branching").read()


def test_distribution_config(tmp_path):
    path = write_config(tmp_path, {"disorder": {"lambda_dist": {"name": "gamma", "params": {"shape": 2, "scale": 0.1}}}})
    config = ConfigReader(path, command="disorder-scan", overrides={"m": 2, "L": 8}).read()

    assert config.disorder.lambda_dist.params == {"shape": 2.0, "scale": 0.1}

    with pytest.raises(ConfigError):
        ConfigReader(write_config(tmp_path, {"disorder": {"lambda_dist": {"name": "cauchy"}}}),
                     command="branching").read()


def test_output_dir_defaults_to_environment(monkeypatch):
    monkeypatch.setenv("RC_RUNNER_OUTPUT_DIR", "/tmp/rc-out")

    assert ConfigReader(None, command="branching").read().output_dir == "/tmp/rc-out"


@pytest.mark.parametrize("make", [
    lambda: ExperimentConfig(command="sample"),
    lambda: ExperimentConfig(command="oracle", seed=-1),
    lambda: ExperimentConfig(command="oracle", workers=0),
    lambda: ModelParameters(lam=1.0, delta=0.0),
    lambda: ModelParameters(lam=0.0, delta=1.0),
    lambda: GeometryParameters(m=-1),
    lambda: GeometryParameters(beta_rule="fastest"),
    lambda: ChainParameters(sweeps=0),
])
def test_invalid_parameters(make):
    with pytest.raises(ConfigError):
        make()


def test_oracle_command(tmp_path, capsys):
    assert main(["oracle", "--m", "1", "--L", "0", "--beta", "2.0", "--output-dir", str(tmp_path)]) == 0

    header, spectrum_rows = read_table(tmp_path / "oracle_spectrum.csv")
    _, summary = read_table(tmp_path / "oracle_summary.csv")
    energies = [float(row["value"]) for row in spectrum_rows if row["kind"] == "energy"]
    marginal = [float(row["value"]) for row in spectrum_rows if row["kind"] == "rdm"]

    assert header["command"] == "oracle"
    assert len(energies) == 8 and energies == sorted(energies)
    assert float(summary[0]["E0"]) == pytest.approx(energies[0])
    assert sum(marginal) == pytest.approx(1.0)
    assert summary[0]["entropy_thermal"] != ""
    assert "oracle_summary.csv" in capsys.readouterr().out


def test_oracle_rejects_mismatched_length(tmp_path, capsys):
    assert main(["oracle", "--m", "1", "--L", "0", "--n", "4", "--output-dir", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config_error"


def test_missing_key_exit_code(tmp_path, capsys):
    assert main(["rdm", "--m", "1", "--output-dir", str(tmp_path)]) == 2

    error = json.loads(capsys.readouterr().err)
    assert "geometry.L" in error["message"]


def test_decay_scan_command(tmp_path):
    assert main(["decay-scan", "--lambda", "0.1", "--m-list", "1", "2", "--trials", "50",
                 "--output-dir", str(tmp_path)]) == 0

    _, rows = read_table(tmp_path / "decay_scan.csv")
    _, fit = read_table(tmp_path / "decay_fit.csv")

    assert [row["m"] for row in rows] == ["1", "2"]
    assert len(fit) == 1


def test_decay_fit_never_writes_nan(tmp_path):
    assert main(["decay-scan", "--lambda", "1.0", "--delta", "8.0", "--m-list", "0", "1", "2", "3", "--trials", "400",
                 "--seed", "7", "--output-dir", str(tmp_path)]) == 0

    _, fit = read_table(tmp_path / "decay_fit.csv")

    assert fit[0]["gamma_hat"].lower() != "nan"
    assert fit[0]["gamma_se"].lower() != "nan"


def test_branching_command(tmp_path):
    path = write_config(tmp_path, {"model": {"lambda": 0.5}, "branching": {"delta_list": [4.0, 8.0]}})

    assert main(["branching", "--config", path, "--trials", "500", "--output-dir", str(tmp_path)]) == 0

    _, rows = read_table(tmp_path / "branching.csv")

    assert [float(row["mbar"]) for row in rows] == [0.5, 0.25]
    assert all(row["gamma_lower"] != "" for row in rows)


def test_rdm_command(tmp_path):
    assert main(["rdm", "--m", "0", "--L", "0", "--beta", "0.5", "--sweeps", "200", "--burn-in", "20",
                 "--batches", "5", "--output-dir", str(tmp_path)]) == 0

    _, rows = read_table(tmp_path / "rdm.csv")
    _, summary = read_table(tmp_path / "rdm_summary.csv")

    assert len(rows) == 4
    assert len(summary) == 1


def test_disorder_scan_needs_long_slit(tmp_path):
    assert main(["disorder-scan", "--m", "2", "--L", "4", "--output-dir", str(tmp_path)]) == 2


@pytest.mark.slow
def test_disorder_scan_command(tmp_path):
    path = write_config(tmp_path, {"disorder": {"r_list": [1, 2]}})

    assert main(["disorder-scan", "--config", path, "--m", "2", "--L", "8", "--trials", "20",
                 "--output-dir", str(tmp_path)]) == 0

    _, events = read_table(tmp_path / "disorder_events.csv")
    _, scan = read_table(tmp_path / "disorder_scan.csv")

    assert len(events) == 1
    assert events[0]["B"] in ("true", "false")
    assert {int(row["x"]) for row in scan} == set(range(-1, 10))
