# bandit: skip=B101
import json

import pytest

from vsex.config import COMMAND_DEFAULTS, Config
from vsex.errors import ConfigError


def test_default_config():
    config = Config()
    assert config.seed == 0  # nosec B101
    assert config.threads >= 1  # nosec B101
    assert (config.n_seq, config.T) == (1000, 200)  # nosec B101
    assert config.smnr_db == 10.0  # nosec B101
    assert (config.hidden_dim, config.num_layers) == (80, 2)  # nosec B101
    assert config.head_dim == 128  # nosec B101
    assert config.samples == 10  # nosec B101
    assert config.particles == 500  # nosec B101
    assert config.smnr_list == [0.0, 10.0, 20.0]  # nosec B101
    assert isinstance(config.verbose, bool)  # nosec B101


def test_custom_config(tmp_path):
    out = str(tmp_path / "model.vseparam")
    config = Config(
        command="train",
        out=out,
        seed=5,
        epochs=3,
        batch_size=16,
        lr=5e-4,
        n_limit=32,
        verbose=True,
    )
    assert config.command == "train"  # nosec B101
    assert config.out == out  # nosec B101
    assert config.seed == 5  # nosec B101
    assert config.epochs == 3  # nosec B101
    assert config.batch_size == 16  # nosec B101
    assert config.lr == 5e-4  # nosec B101
    assert config.n_limit == 32  # nosec B101
    assert config.verbose is True  # nosec B101


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        Config(particle_count=10)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        Config(threads=0)
    with pytest.raises(ConfigError):
        Config(n_limit=0)


def test_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 4, "T": 50, "particles": 100}))
    config = Config.from_sources(
        COMMAND_DEFAULTS["sweep"], str(path), {"seed": 9}
    )
    assert config.seed == 9  # nosec B101
    assert config.T == 50  # nosec B101
    assert config.n_seq == 20  # nosec B101
    assert config.particles == 100  # nosec B101


def test_unreadable_config_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        Config.from_sources(None, str(path), None)
    with pytest.raises(ConfigError):
        Config.from_sources(None, str(tmp_path / "missing.json"), None)


def test_resolved_dict_rebuilds_config():
    config = Config(command="pf", seed=3, particles=7, smnr_list=[5])
    again = Config(**json.loads(json.dumps(config.to_dict())))
    assert again.to_dict() == config.to_dict()  # nosec B101


def test_component_configs():
    config = Config(
        delta=0.01,
        res_x=4,
        res_y=6,
        hidden_dim=16,
        particles=50,
        seed=2,
        threads=3,
        n_seq=5,
        T=30,
    )
    assert config.lorenz().delta == 0.01  # nosec B101
    camera = config.camera()
    assert (camera.res_x, camera.res_y, camera.n) == (4, 6, 24)  # nosec B101
    training = config.training()
    assert training.hidden_dim == 16 and training.seed == 2  # nosec B101
    pf = config.pf()
    assert (pf.particles, pf.seed) == (50, 2)  # nosec B101
    sweep = config.sweep()
    assert (sweep.n_seq, sweep.T, sweep.max_workers) == (5, 30, 3)  # nosec B101
    assert sweep.pf.particles == 50  # nosec B101
