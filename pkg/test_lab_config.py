import pytest
import yaml

from lab_config import (
    DEFAULT_SWEEP_GRIDS,
    ExperimentConfig,
    apply_overrides,
    config_hash,
    lab_settings,
    load_config,
    quick_preset,
    resolve_config,
)
from lab_errors import ConfigError, InvalidParameterError, UsageError, exit_code_for


def write_config(tmp_path, payload):
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(payload))
    return str(path)


def test_defaults():
    config = load_config()
    assert config.n_runs == 10
    assert config.test_fraction == 0.2
    assert config.train.learning_rate == 0.01
    assert config.train.epochs == 500
    assert config.train.grad_penalty is None
    assert config.task.generator.generator == "teaser"
    assert config.sweep.resolved_grid() == DEFAULT_SWEEP_GRIDS["width"]


def test_load_yaml_sections(tmp_path):
    path = write_config(tmp_path, {"seed": 7, "protocol": {"n_runs": 3},
                                   "train": {"epochs": 20, "grad_penalty": {"lambda": 5.0, "c": 0.5}},
                                   "model": {"preset": "fc3", "activation": "tanh"}})
    config = load_config(path)
    assert config.seed == 7 and config.n_runs == 3
    assert config.train.grad_penalty.lam == 5.0
    assert config.train.grad_penalty.c == 0.5
    assert config.model.build(2).hidden_widths == [256, 256, 256]


def test_missing_file_names_the_path(tmp_path):
    missing = str(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError, match="missing.cfg") as raised:
        load_config(missing)
    assert exit_code_for(raised.value) == 2


def test_malformed_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("protocol: [unclosed\n")
    with pytest.raises(ConfigError, match="broken.yaml"):
        load_config(str(path))


def test_invalid_values_become_config_errors(tmp_path):
    path = write_config(tmp_path, {"protocol": {"n_runs": 0}})
    with pytest.raises(ConfigError, match="protocol.n_runs"):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, {"model": {"preset": "fc9"}}))


def test_task_files_must_exist():
    with pytest.raises(ConfigError, match="nowhere.csv"):
        ExperimentConfig.model_validate({"task": {"kind": "csv", "path": "nowhere.csv"}})


def test_overrides_parse_yaml_values():
    config = apply_overrides(load_config(), ["protocol.n_runs=4", "train.learning_rate=0.05",
                                             "sweep.grid=[8, 16]", "protocol.balance=false"])
    assert config.n_runs == 4
    assert config.train.learning_rate == 0.05
    assert config.sweep.resolved_grid() == [8.0, 16.0]
    assert config.protocol.balance is False


def test_grad_penalty_overrides():
    config = apply_overrides(load_config(), ["train.grad_penalty.lambda=3", "train.grad_penalty.c=0.25"])
    assert config.train.grad_penalty.lam == 3.0
    assert config.train.grad_penalty.c == 0.25
    config = apply_overrides(config, ["train.grad_penalty.lambda=1"])
    assert config.train.grad_penalty.lam == 1.0


@pytest.mark.parametrize("override", ["protocol.nruns=3", "nosection.key=1", "protocol.n_runs.deeper=1"])
def test_unknown_override_keys(override):
    with pytest.raises(ConfigError):
        apply_overrides(load_config(), [override])


@pytest.mark.parametrize("override", ["protocol.n_runs", "protocol..n_runs=3", "protocol.n_runs=[1"])
def test_malformed_overrides(override):
    with pytest.raises(UsageError) as raised:
        apply_overrides(load_config(), [override])
    assert exit_code_for(raised.value) == 1


def test_invalid_task_size_is_a_config_category_error():
    with pytest.raises(InvalidParameterError) as raised:
        apply_overrides(load_config(), ["task.generator.n=402"])
    assert exit_code_for(raised.value) == 2


def test_quick_preset():
    config = quick_preset(load_config())
    assert config.n_runs == 2
    assert config.train.epochs == 30
    assert config.train.eval_every == 10
    assert config.sweep.m_tasks == 8
    assert config.task.generator.n == 400


def test_resolve_order(tmp_path):
    path = write_config(tmp_path, {"protocol": {"n_runs": 6}, "train": {"epochs": 99}})
    config = resolve_config(path, ["protocol.n_runs=5"], quick=True)
    # overrides beat the preset, the preset beats the file
    assert config.n_runs == 5
    assert config.train.epochs == 30


def test_config_hash_is_stable_and_sensitive():
    base = load_config()
    assert config_hash(base) == config_hash(load_config())
    assert len(config_hash(base)) == 64
    assert config_hash(apply_overrides(base, ["seed=1"])) != config_hash(base)


def test_lab_settings_from_environment(monkeypatch):
    monkeypatch.setenv("AMPLAB_JOBS", "3")
    monkeypatch.setenv("AMPLAB_LOG_LEVEL", "info")
    monkeypatch.setenv("AMPLAB_OUTPUT_ROOT", "elsewhere")
    settings = lab_settings()
    assert settings.jobs == 3 and settings.log_level == "INFO" and settings.output_root == "elsewhere"
    assert load_config().jobs() == 3
    assert apply_overrides(load_config(), ["protocol.jobs=2"]).jobs() == 2

    monkeypatch.setenv("AMPLAB_JOBS", "many")
    with pytest.raises(ConfigError):
        lab_settings()
