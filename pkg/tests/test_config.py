import json

import pytest

from config.settings import PROFILES, RunConfig, config_digest, create_run_config, run_root
from errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("PHYSFACE_SEED", "PHYSFACE_PROFILE", "PHYSFACE_RUN_ROOT"):
        monkeypatch.delenv(name, raising=False)


def test_default_is_desk_profile():
    config = create_run_config()
    assert config.profile == "desk"
    assert config.field.kind == "grid"
    assert config.schedule.epochs == PROFILES["desk"]["schedule"]["epochs"]
    assert config.weights.skin == 20.0


def test_full_profile():
    config = create_run_config(profile="full")
    assert config.field.kind == "sinusoidal"
    assert config.field.width == 128
    assert config.sampling.n_volume == 45000
    assert config.lattice.h_ladder[-1] == 1.3


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"profile": "full", "seed": 3, "lattice": {"h": 5.0}}))
    config = create_run_config(path, overrides=["lattice.h=2.5", "effects.gravity=[0, -9.81, 0]",
                                                "corpus.path=elsewhere"])
    assert config.profile == "full"
    assert config.seed == 3
    assert config.lattice.h == 2.5
    assert config.effects.gravity == [0.0, -9.81, 0.0]
    assert config.corpus.path == "elsewhere"


def test_unknown_key_names_the_path():
    with pytest.raises(ConfigError) as err:
        create_run_config(overrides=["lattice.spacing=2"])
    assert err.value.key == "lattice.spacing"


def test_invalid_value_names_the_path():
    with pytest.raises(ConfigError) as err:
        create_run_config(overrides=["sampling.n_bone=2"])
    assert err.value.key == "sampling.n_bone"


def test_ablation_factor_must_exceed_one():
    assert create_run_config().eval.ablation_factor == 5.0
    with pytest.raises(ConfigError) as err:
        create_run_config(overrides=["eval.ablation_factor=1"])
    assert err.value.key == "eval.ablation_factor"


def test_malformed_override():
    with pytest.raises(ConfigError):
        create_run_config(overrides=["lattice.h"])
    with pytest.raises(ConfigError) as err:
        create_run_config(overrides=["seed.value=1"])
    assert err.value.key == "seed.value"


def test_unknown_profile():
    with pytest.raises(ConfigError) as err:
        create_run_config(profile="cluster")
    assert err.value.key == "profile"


def test_bad_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        create_run_config(path)
    with pytest.raises(ConfigError):
        create_run_config(tmp_path / "missing.json")


def test_environment(monkeypatch):
    monkeypatch.setenv("PHYSFACE_SEED", "42")
    monkeypatch.setenv("PHYSFACE_PROFILE", "full")
    config = create_run_config()
    assert config.seed == 42 and config.profile == "full"
    assert create_run_config(seed=7).seed == 7
    monkeypatch.setenv("PHYSFACE_SEED", "many")
    with pytest.raises(ConfigError) as err:
        create_run_config()
    assert err.value.key == "seed"


def test_run_root(monkeypatch, tmp_path):
    assert str(run_root()) == "runs"
    monkeypatch.setenv("PHYSFACE_RUN_ROOT", str(tmp_path))
    assert run_root() == tmp_path


def test_digest_tracks_content():
    a = create_run_config()
    b = create_run_config(overrides=["seed=1"])
    assert config_digest(a) == config_digest(RunConfig.model_validate(a.model_dump()))
    assert config_digest(a) != config_digest(b)
