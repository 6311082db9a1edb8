import pytest

from config.run_config import RunConfig
from models.errors import ConfigurationError
from models.exits import NEVER_EXIT
from models.mamba import MambaConfig
from utils.validators import (
    build_run_config, get_field_help_text, parse_config_text, validate_run_config,
)


def test_parse_config_text_handles_comments_and_dashes():
    text = "backbone = mamba\n\n# a comment\nexit-variant = calm  # trailing\nthetas = 0.5, 0.9\n"
    assert parse_config_text(text) == {"backbone": "mamba", "exit_variant": "calm", "thetas": "0.5, 0.9"}


def test_line_without_equals_is_rejected():
    with pytest.raises(ConfigurationError):
        parse_config_text("backbone mamba")


def test_list_fields_and_threshold_clamp():
    config = validate_run_config({"thetas": "0.5,0.9,1.5", "placements": "4,6"})
    assert config.thetas == [0.5, 0.9, NEVER_EXIT]
    assert config.exit_placement().blocks == [4, 6]


@pytest.mark.parametrize("data", [
    {"thetas": "0.9,0.5"},
    {"thetas": "-0.1"},
    {"policies": "skip"},
    {"backbone": "mamba", "policies": "copy"},
    {"d_model": "30", "n_heads": "4"},
    {"prompt_len": "96", "eval_length": "96"},
    {"placements": "1,2"},
    {"n_blocks": "1"},
    {"colour": "blue"},
    {"backbone": "rnn"},
    {"exit_variant": "linear"},
    {"penalty_scope": "sometimes"},
])
def test_invalid_settings_are_configuration_errors(data):
    with pytest.raises(ConfigurationError):
        validate_run_config(data)


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("backbone = mamba\nd_model = 32\nexit_variant = ffn\n")
    config = build_run_config(str(path), {"d_model": "16", "seed": None})
    assert config.backbone == "mamba"
    assert config.d_model == 16
    assert config.exit_variant == "ffn"
    assert isinstance(config.backbone_config(), MambaConfig)


def test_policies_and_penalty_follow_backbone():
    transformer = RunConfig()
    assert transformer.active_policies() == ["copy", "recompute"]
    assert transformer.penalty_for("copy") == 1.0
    mamba = RunConfig(backbone="mamba")
    assert mamba.active_policies() == ["recompute", "skip"]
    assert mamba.penalty_for("skip") == pytest.approx(1.2)
    assert mamba.penalty_for("recompute") == 1.0
    assert RunConfig(penalty_scope="all").penalty_for(None) == pytest.approx(1.2)


def test_default_placement_and_training_configs():
    config = RunConfig(n_blocks=8, backbone_steps=10, exit_steps=5, k=3)
    assert config.exit_placement().blocks == [4, 5, 6]
    assert config.backbone_train_config().steps == 10
    assert config.exit_train_config().k == 3


def test_field_help_text():
    assert "thresholds" in get_field_help_text("thetas").lower()
    assert get_field_help_text("nonexistent") == ""
