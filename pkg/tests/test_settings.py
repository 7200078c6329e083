import logging

import pytest

from core.exceptions import ConfigurationError
from core.settings import (
    TrainConfig,
    configure_logging,
    dump_config,
    load_config,
    make_config,
    read_config_file,
    tuned_hyperparameters,
)


def test_defaults():
    config = make_config()
    assert config.algorithm == "slgrad"
    assert config.steps == 5000
    assert config.patience == 500
    assert config.eval_every == 50
    assert config.olaux_horizon == 5
    assert config.cagrad_c == 0.4
    assert config.effective_val_batch_size() == config.batch_size


def test_full_validation_split_when_zero():
    assert make_config(val_batch_size=0).effective_val_batch_size() is None


@pytest.mark.parametrize(
    "values",
    [{"lr": 0.0}, {"steps": 0}, {"algorithm": "mgda"}, {"noise": 1.2}, {"aux_noise": -0.1}, {"dataset": "cifar"}],
)
def test_invalid_values(values):
    with pytest.raises(ConfigurationError):
        make_config(**values)


def test_dump_and_load_round_trip(tmp_path):
    config = make_config(algorithm="cagrad", noise=0.7, aux_noise=0.0, lr=0.05, out="runs/x", taylor_check=True)
    path = tmp_path / "config.conf"
    dump_config(config, path)
    assert load_config(path) == config
    keys = [line.split("=")[0].strip() for line in path.read_text().splitlines()]
    assert keys == list(TrainConfig.model_fields)


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "# comment\n"
        "\n"
        "algorithm = pcgrad\n"
        'dataset = "classify"\n'
        "lr = 0.01\n"
        "log_weights = true\n"
    )
    config = load_config(path)
    assert config.algorithm == "pcgrad"
    assert config.dataset == "classify"
    assert config.lr == 0.01
    assert config.log_weights is True


def test_unknown_keys_are_listed(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("learning_rate = 0.1\nepochs = 3\nlr = 0.1\n")
    with pytest.raises(ConfigurationError, match="learning_rate, epochs"):
        read_config_file(path)


def test_malformed_line(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("lr 0.1\n")
    with pytest.raises(ConfigurationError):
        read_config_file(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.conf")


def test_overrides_beat_file_and_file_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SLGRAD_LR", "0.2")
    monkeypatch.setenv("SLGRAD_STEPS", "77")
    path = tmp_path / "run.conf"
    path.write_text("lr = 0.05\nbatch_size = 16\n")
    config = load_config(path, {"batch_size": 64, "seed": None})
    assert config.lr == 0.05
    assert config.batch_size == 64
    assert config.steps == 77
    assert config.seed == 0


def test_tuned_hyperparameters():
    assert tuned_hyperparameters("slgrad") == {"lr": 0.1, "batch_size": 32, "shared_layers": 3, "task_layers": 4}
    assert tuned_hyperparameters("static") == {"lr": 0.01, "batch_size": 32, "shared_layers": 4, "task_layers": 4}
    with pytest.raises(ConfigurationError):
        tuned_hyperparameters("unknown")


def test_derived_specs():
    config = make_config(noise=0.7, aux_noise=0.0, n_train=300, seed=4)
    spec = config.toy_spec()
    assert spec.fractions() == [0.7, 0.0]
    assert spec.n_train == 300
    assert spec.n_val == 200
    assert spec.seed == 4

    arch = config.architecture(10, [1, 1])
    assert len(arch.shared) == config.shared_layers
    assert len(arch.heads[0]) == config.task_layers - 1

    classify = make_config(dataset="classify", flip="uniform", flip_frac=0.4, main_loss="ce").classify_spec()
    assert classify.flip_mode == "uniform"
    assert classify.n_tasks == 4

    options = make_config(gradnorm_alpha=0.5).weighter_options()
    assert options.gradnorm_alpha == 0.5


def test_setting_labels():
    assert make_config(noise=0.4).setting_label() == "toy-noise0.4"
    assert make_config(noise=0.7, aux_noise=0.0).setting_label() == "toy-noise0.7-aux0"
    assert make_config(dataset="classify", flip="background", flip_frac=0.2).setting_label() == "classify-bce-background0.2"


def test_replace_validates():
    config = make_config()
    assert config.replace(seed=3).seed == 3
    with pytest.raises(ConfigurationError):
        config.replace(lr=-1.0)


def test_configure_logging():
    configure_logging(logging.DEBUG)
    assert logging.getLogger().level == logging.DEBUG
    configure_logging()
    assert logging.getLogger().level == logging.INFO
