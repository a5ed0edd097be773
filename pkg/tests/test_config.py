from pathlib import Path

import pytest

from dtpdt.config import ConfigError, RunConfig, dump_config, load_config, parse_config

DEFAULTS = Path(__file__).resolve().parents[1] / "configs" / "paper-defaults.cfg"


def test_published_defaults_file():
    cfg = load_config(DEFAULTS)
    t = cfg.train
    assert (t.tau, t.gamma, t.lambda_fg, t.m) == (0.1, -0.3, 10.0, 10)
    assert (t.epochs, t.warmup_epochs, t.lr, t.lr_drop_epoch, t.kernel_size) == (60, 10, 0.002, 50, 31)
    assert cfg.eval.threshold == 0.5 and t.loss == "dtpdt"


def test_builtin_defaults_match_file_where_stated():
    assert load_config(DEFAULTS).train == RunConfig().train


def test_unknown_section_and_key():
    with pytest.raises(ConfigError, match="section"):
        parse_config("[nope]\na = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[train]\nepochz = 3\n")


@pytest.mark.parametrize("text", ["[train]\nepochs = many\n", "[train]\nwarmup_epochs = 80\n",
                                  "[eval]\nthreshold = 1.5\n", "[train]\naugment = maybe\n", "no header\n"])
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_coercion_and_overrides():
    cfg = parse_config("[synth]\ndims = 48\n[model]\ncrop = 16, 16, 32  # mixed\n[train]\naugment = no\n")
    assert cfg.synth.dims == (48, 48, 48) and cfg.model.crop == (16, 16, 32) and cfg.train.augment is False
    cfg = load_config(None, {"cdt.kernel_size": "11", "loss.m": 4})
    assert cfg.train.kernel_size == 11 and cfg.train.m == 4


def test_dump_roundtrip_and_hash():
    cfg = load_config(None, {"train.epochs": "17", "synth.seed": "3"})
    again = parse_config(dump_config(cfg))
    assert again == cfg and again.hash() == cfg.hash()
    assert load_config(None, {"train.epochs": "18"}).hash() != cfg.hash()


def test_related_keys_validate_together():
    # each key alone would break warmup < epochs against the defaults
    cfg = load_config(None, {"train.epochs": "3", "train.warmup_epochs": "1"})
    assert (cfg.train.epochs, cfg.train.warmup_epochs) == (3, 1)
    with pytest.raises(ConfigError, match="warmup"):
        load_config(None, {"train.epochs": "3"})


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/x.cfg")
