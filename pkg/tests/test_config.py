import json

import pytest

from causal_se.config import PRESETS, config_from_dict, load_config
from causal_se.errors import ConfigError


def test_desk_defaults():
    cfg = load_config()
    assert (cfg.stft.win, cfg.stft.hop, cfg.stft.fft) == (640, 320, 1024)
    assert (cfg.train.lambda_se, cfg.train.lambda_vq, cfg.train.lambda_ce) == (1.0, 1.0, 0.01)
    assert cfg.vq.xi == 0.1 and cfg.model.N == 5 and cfg.model.variant == "codebook"
    assert cfg.train.epochs == 30 and cfg.ssl.freeze_frontend


def test_paper_preset():
    cfg = load_config(preset="paper")
    assert cfg.vq.K == 1024 and cfg.model.N == 5
    assert (cfg.model.D_g, cfg.model.D_f, cfg.model.heads, cfg.model.layers) == (512, 256, 4, 3)
    assert cfg.train.lr == 1e-4 and cfg.train.epochs == 200 and cfg.train.lambda_ce == 0.01


def test_file_overrides_preset(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"vq": {"K": 32}, "train": {"epochs": 2}}))
    cfg = load_config(path, preset="paper")
    assert cfg.vq.K == 32 and cfg.train.epochs == 2 and cfg.model.D_g == 512


@pytest.mark.parametrize("data", [
    {"bogus": {}},
    {"vq": {"K": 8, "size": 3}},
    {"vq": {"K": "8"}},
    {"ssl": {"causal": 1}},
    {"train": {"lr": True}},
    {"model": {"variant": "other"}},
    {"model": {"N": 0}},
    {"train": {"lambda_ce": -1.0}},
    {"vq": {"xi": -0.5}},
    {"stft": {"hop": 700}},
    {"model": {"heads": 3}},
    {"train": {"dtype": "float16"}},
    [],
])
def test_rejections(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(preset="huge")


def test_round_trip_and_architecture():
    cfg = config_from_dict({"vq": {"K": 64}})
    assert config_from_dict(cfg.to_dict()) == cfg
    other = config_from_dict({"vq": {"K": 64}, "train": {"lr": 0.5}, "ssl": {"prefix_mode": True}})
    assert other.architecture() == cfg.architecture()
    assert set(PRESETS) == {"desk", "paper"}
