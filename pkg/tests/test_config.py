import pytest

from pam.config import ConfigError, RunConfig, dump_config, load_config


def test_default_round_trip():
    cfg = RunConfig()
    assert load_config(dump_config(cfg)) == cfg


def test_empty_text_is_default():
    assert load_config("") == RunConfig()


def test_overrides_are_typed():
    cfg = load_config("[train]\nlr = 0.05\nlr_decay_epochs = 2, 4\nflip = no\n"
                      "[model]\nplan = PAM34\ndtype = float64\n[corruption]\ndrop_px = 3\n")
    assert cfg.train.lr == 0.05 and cfg.train.lr_decay_epochs == (2, 4) and cfg.train.flip is False
    assert cfg.model.placement.stages_with_pam == {3, 4}
    assert cfg.corruption.drop_px == 3.0


def test_all_problems_reported_together():
    text = ("[extra]\nx = 1\n[train]\nlr = fast\nlearning_rate = 0.1\n"
            "[model]\nplan = PAM31\n[pam]\ngate = half\n")
    with pytest.raises(ConfigError) as info:
        load_config(text)
    problems = info.value.problems
    assert len(problems) == 5
    joined = "\n".join(problems)
    for needle in ("[extra]", "lr", "learning_rate", "PAM31", "gate"):
        assert needle in joined


def test_semantic_validation():
    with pytest.raises(ConfigError, match="margin"):
        load_config("[train]\nmargin = 2.0\n")
    with pytest.raises(ConfigError, match="divisible"):
        load_config("[backbone]\nstage_channels = 8, 16, 32, 64\n[model]\nplan = PAM1\n")


def test_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        load_config("no section header\n")
