import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensorstash.config import (
    ENV_CONFIG,
    ENV_STORE,
    ConfigError,
    EngineConfig,
    load_config,
    parse_config,
    resolve_store_path,
)


def test_defaults():
    cfg = EngineConfig()
    assert cfg.codec == "FMPP"
    assert (cfg.sketch_depth, cfg.sketch_width) == (2, 1024)
    assert (cfg.theta_min, cfg.split_delta, cfg.split_min_size, cfg.split_trigger) == (0.05, 0.1, 8, 0.6)
    assert cfg.chunk_elements == 4 * 1024 * 1024
    assert cfg.workers >= 1


def test_parse_key_value_file():
    text = """
# engine settings
codec = tensorx
theta_min = 0.2   # floor
split-min-size = 4
base_compress = no
store = "/tmp/x y"
"""
    cfg = EngineConfig.from_dict(parse_config(text))
    assert cfg.codec == "TENSORX" and cfg.theta_min == 0.2 and cfg.split_min_size == 4
    assert cfg.base_compress is False and cfg.store == "/tmp/x y"


@pytest.mark.parametrize(
    "text",
    ["codec = zip\n", "nonsense = 1\n", "theta_min = 2\n", "sketch_width = 1000\n", "workers = many\n",
     "refine_every = -1\n", "base_compress = maybe\n", "just a line\n"],
)
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        EngineConfig.from_dict(parse_config(text))


def test_dumps_round_trip():
    cfg = EngineConfig(codec="TENSORX", theta_min=0.125, standalone=True, workers=3)
    assert EngineConfig.from_dict(parse_config(cfg.dumps())) == cfg


@given(st.floats(0, 1), st.integers(1, 1000), st.booleans())
def test_dict_round_trip(theta, size, flag):
    cfg = EngineConfig(theta_min=theta, split_min_size=size, base_compress=flag, workers=1)
    assert EngineConfig.from_dict(cfg.to_dict()) == cfg


def test_load_from_env(tmp_path, monkeypatch):
    path = tmp_path / "th.conf"
    path.write_text("codec = TENSORX\n")
    monkeypatch.setenv(ENV_CONFIG, str(path))
    assert load_config().codec == "TENSORX"
    monkeypatch.delenv(ENV_CONFIG)
    assert load_config().codec == "FMPP"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.conf")


def test_overlay_on_base(tmp_path):
    path = tmp_path / "th.conf"
    path.write_text("theta_min = 0.3\n")
    cfg = load_config(path, EngineConfig(codec="TENSORX", workers=2))
    assert (cfg.codec, cfg.theta_min, cfg.workers) == ("TENSORX", 0.3, 2)


def test_store_path_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_STORE, raising=False)
    cfg = EngineConfig(store=str(tmp_path / "cfg"))
    assert resolve_store_path(None, cfg) == tmp_path / "cfg"
    monkeypatch.setenv(ENV_STORE, str(tmp_path / "env"))
    assert resolve_store_path(None, cfg) == tmp_path / "env"
    assert resolve_store_path(tmp_path / "flag", cfg) == tmp_path / "flag"
    monkeypatch.delenv(ENV_STORE)
    assert resolve_store_path().name == ".tensorstash"
