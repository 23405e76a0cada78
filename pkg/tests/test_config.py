import pytest

from regsynth.config import RunConfig
from regsynth.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.get("run", "rng") == "philox4x64-10"
    assert cfg.get_float("metrics-loss", "gamma") == 0.05
    assert cfg.get_float("intensity-model", "sigma_n") == 5.0
    assert cfg.get_float("intensity-model", "chain_sigma_n") == 3.0
    assert cfg.get_list("pipeline", "stages", int) == [4, 2, 1]


def test_text_roundtrip():
    cfg = RunConfig()
    cfg.set("run", "seed", 17)
    cfg.set("dvf-synth", "dims", "32,30,28")
    again = RunConfig.from_text(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    assert again.get_int("run", "seed") == 17


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_text("[run]\nsed = 3\n")
    with pytest.raises(ConfigError, match="section"):
        RunConfig.from_text("[runn]\nseed = 3\n")


def test_rng_pinned():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[run]\nrng = mt19937\n")


def test_typed_getters():
    cfg = RunConfig.from_text("[dvf-synth]\nstage = four\n[intensity-model]\nsponge = maybe\n")
    with pytest.raises(ConfigError):
        cfg.get_int("dvf-synth", "stage")
    with pytest.raises(ConfigError):
        cfg.get_bool("intensity-model", "sponge")
    assert cfg.get_int("pair-factory", "patch_size") is None


def test_malformed():
    with pytest.raises(ConfigError):
        RunConfig.from_text("seed = 3\n")


def test_write(tmp_path):
    path = RunConfig().write(tmp_path / "sub" / "r.ini")
    assert RunConfig.from_file(path).get("run", "seed") == "0"
