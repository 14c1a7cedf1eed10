import logging

import pytest

from src import configure_logging
from src.config import Config, ConfigError, _env_int, config


def test_env_int(monkeypatch):
    monkeypatch.setenv("MDPO_TEST_INT", "12")
    assert _env_int("MDPO_TEST_INT", 3) == 12
    monkeypatch.setenv("MDPO_TEST_INT", "")
    assert _env_int("MDPO_TEST_INT", 3) == 3
    monkeypatch.delenv("MDPO_TEST_INT")
    assert _env_int("MDPO_TEST_INT", 3) == 3


def test_env_int_rejects_text(monkeypatch):
    monkeypatch.setenv("MDPO_TEST_INT", "many")
    with pytest.raises(ConfigError, match="MDPO_TEST_INT"):
        _env_int("MDPO_TEST_INT", 3)


def test_default_catalog_exists():
    assert config.EXPERIMENTS_CONFIG_PATH.exists()
    assert config.VOCAB_SIZE >= 2


@pytest.mark.parametrize("kwargs", [{"VOCAB_SIZE": 1}, {"MC_TRIALS": 0}, {"SEED": -1}])
def test_invalid_values(kwargs):
    with pytest.raises(ConfigError):
        Config(**kwargs)


def test_missing_catalog(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        Config(EXPERIMENTS_CONFIG_PATH=tmp_path / "absent.yaml")


def test_configure_logging_creates_directory(tmp_path):
    log_file = configure_logging(log_dir=tmp_path / "nested" / "logs")
    assert log_file == tmp_path / "nested" / "logs" / "mdpo.log"
    assert log_file.parent.is_dir()
    assert logging.getLogger("hypothesis").level == logging.WARNING
