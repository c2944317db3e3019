"""설정 파일 테스트: 파싱, 검증, 프리셋, 해시"""
from pathlib import Path

import pytest

from csrecon.config import (
    PRESETS,
    apply_preset,
    build_config,
    config_hash,
    emit_config,
    load_config,
    parse_config,
    parse_config_text,
    save_config,
)
from csrecon.errors import ConfigError
from csrecon.utils import text_hash

TOY_CONFIG = Path(__file__).parent / "configs" / "toy.cfg"

SAMPLE = """
# desk run
steps = 4
ratio = 0.1
block_size = 16
channels = 16, 32
patch_size = 32
lr = 2e-4
attention = true
"""


def test_parse_emit_parse_is_a_fixpoint():
    cfg = parse_config(SAMPLE)
    assert cfg.steps == 4 and cfg.channels == [16, 32] and cfg.attention is True
    text = emit_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert emit_config(again) == text


def test_toy_config_loads():
    cfg = load_config(TOY_CONFIG)
    assert (cfg.steps, cfg.block_size, cfg.ratio, cfg.patch_size) == (2, 8, 0.25, 64)
    assert cfg.e2e and cfg.invertible and cfg.injectors


def test_syntax_errors():
    with pytest.raises(ConfigError):
        parse_config_text("steps 3")
    with pytest.raises(ConfigError) as info:
        parse_config_text("steps = 3\nratio = 0.1\nsteps = 4")
    assert info.value.extra["line"] == 3
    with pytest.raises(ConfigError):
        parse_config("colour = red")
    with pytest.raises(ConfigError):
        load_config("no/such/file.cfg")


@pytest.mark.parametrize("values", [
    {"steps": 13},
    {"image_channels": 2},
    {"invertible": True, "e2e": False},
    {"reuse": True},
    {"pruning": True},
    {"block_size": 8, "patch_size": 12},
    {"channels": "8,16,32", "block_size": 2, "patch_size": 6},
    {"block_size": 4, "ratio": 0.01},
    {"wiring_levels": 3},
])
def test_incoherent_configs_are_rejected(values):
    with pytest.raises(ConfigError):
        build_config(values)


def test_presets():
    cfg = load_config(TOY_CONFIG, preset="no-inj")
    assert cfg.injectors is False and cfg.invertible is True
    regression = apply_preset(cfg, "noise-regression")
    assert regression.e2e is False and regression.invertible is False
    assert set(PRESETS) >= {"idm", "no-inj", "noise-init", "no-inv", "noise-regression"}
    with pytest.raises(ConfigError):
        apply_preset(cfg, "bigger")


def test_config_hash(tmp_path):
    cfg = parse_config(SAMPLE)
    assert config_hash(cfg) == text_hash(emit_config(cfg))
    assert config_hash(cfg) != config_hash(build_config({**cfg.model_dump(), "seed": 1}))
    save_config(tmp_path / "a.cfg", cfg)
    assert config_hash(load_config(tmp_path / "a.cfg")) == config_hash(cfg)
