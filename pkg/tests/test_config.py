import pytest

from usbpo.config import ConfigError, dump_config, load_config, parse_config
from usbpo.exceptions import UsageError
from usbpo.orchestrator import ModelConfig, RunConfig


def test_empty_config_gives_defaults():
    assert parse_config("") == RunConfig()


def test_sections_map_onto_dataclasses():
    cfg = parse_config("""
[run]
seed = 3
real_ratio = 0.25

[model]
hidden = 32, 32
variant = shift_only
phase2_lr = 2e-4

[policy]
target_entropy = auto
updates_per_step = 4
""")
    assert cfg.seed == 3 and cfg.real_ratio == 0.25
    assert cfg.model.hidden == (32, 32) and cfg.model.variant == "shift_only" and cfg.model.phase2_lr == 2e-4
    assert cfg.policy.target_entropy is None and cfg.policy.updates_per_step == 4
    assert cfg.rollout == RunConfig().rollout


def test_round_trip():
    cfg = RunConfig(seed=9, epochs=4, model=ModelConfig(hidden=(16,), variant="none", phase2_lr=5e-5))
    assert parse_config(dump_config(cfg)) == cfg


def test_unknown_key_names_file_line_and_field():
    with pytest.raises(ConfigError) as err:
        parse_config("[run]\nseed = 1\n\n[model]\nwidth = 3\n", "run.ini")
    assert "run.ini:5: [model] width" in str(err.value)


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"cfg:1: \[optimizer\]"):
        parse_config("[optimizer]\nlr = 1\n", "cfg")


def test_bad_value_names_the_field():
    with pytest.raises(ConfigError, match=r"\[run\] epochs: cannot parse 'many'"):
        parse_config("[run]\nepochs = many\n")


def test_invalid_combination_is_a_usage_error():
    with pytest.raises(UsageError, match="variant"):
        parse_config("[model]\nvariant = both\n")


def test_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("seed = 1\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "absent.ini")


def test_shipped_desk_config_loads():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "pendulum_desk.ini"
    cfg = load_config(path)
    assert cfg.task == "pendulum" and cfg.epochs == 30
