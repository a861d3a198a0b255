import math

import pytest

from taigan.config import ConfigError, dump_config, parse_config
from taigan.experiments import PipelineConfig


def test_empty_config_is_default():
    assert parse_config("") == PipelineConfig()


def test_sections_and_types():
    cfg = parse_config(
        """
        # comment
        seed = 7
        phantom.noise_level = 25   # trailing comment
        phantom.grid = 16, 16, 8
        train.use_film = false
        train.epochs = 3
        model.upsample = nearest
        motion.magnitude = 2.5
        motion.spacing = 4
        motion.iterations = 10
        kinetics.a = 0
        """
    )
    assert cfg.seed == 7 and cfg.phantom.noise_level == 25.0 and cfg.phantom.grid == (16, 16, 8)
    assert cfg.train.use_film is False and cfg.train.epochs == 3
    assert cfg.model.upsample == "nearest"
    assert cfg.motion.magnitude == 2.5 and cfg.registration.iterations == 10
    assert cfg.motion.spacing == cfg.registration.spacing == 4.0
    assert cfg.kinetics.a == 0.0


def test_schedule_value():
    cfg = parse_config("phantom.schedule = 2x5, 1x10")
    assert cfg.phantom.schedule == ((2, 5.0), (1, 10.0))


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("seed = 1\nphantom.nope = 3", 2, "unknown key"),
        ("foo.bar = 1", 1, "unknown key"),
        ("\n\ntrain.epochs = many", 3, "invalid literal"),
        ("train.use_adv = maybe", 1, "true/false"),
        ("seed = 1\nseed = 2", 2, "duplicate"),
        ("just words", 1, "key = value"),
    ],
)
def test_errors_name_line(text, line, fragment):
    with pytest.raises(ConfigError, match=f"line {line}") as e:
        parse_config(text, "c.cfg")
    assert fragment in str(e.value)


def test_semantic_violation_rejected():
    with pytest.raises(ConfigError, match="learning rates"):
        parse_config("train.lr_g = 0")


def test_dump_round_trip():
    cfg = parse_config("seed = 4\nphantom.noise_level = 10\ntrain.patch = 16, 16, 8")
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert math.isinf(parse_config(dump_config(PipelineConfig())).kinetics.w_max)
