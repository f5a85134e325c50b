import pytest

from madet.config import RunConfig, parse_config
from madet.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg.learning_rate == 0.01
    assert cfg.momentum == 0.9
    assert cfg.batch_size == 32
    assert cfg.stage2_threshold == 0.5
    assert cfg.score_floor == 1e-3
    assert cfg.smooth_radius == 5
    assert cfg.match_radius == 5
    assert cfg.fov_threshold == 0.03
    assert cfg.median_window == 30
    assert cfg.stride == 1
    assert cfg.folds == 4
    assert cfg.precision == 64


def test_comments_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("""
# training knobs
learning_rate = 0.005
stage2.threshold = 0.7   # mine harder negatives
post.floor = 0.01
epochs = 12
""")
    cfg = parse_config(path)
    assert cfg.learning_rate == 0.005
    assert cfg.stage2_threshold == 0.7
    assert cfg.score_floor == 0.01
    assert cfg.epochs == 12
    echoed = cfg.to_dict()
    assert echoed["stage2.threshold"] == 0.7
    assert echoed["momentum"] == 0.9  # defaults echoed too


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rte = 0.01\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert "learning_rte" in str(exc.value)
    assert "line 1" in str(exc.value)


def test_bad_value_and_constraint(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("batch_size = many\n")
    with pytest.raises(ConfigError):
        parse_config(path)
    path.write_text("learning_rate = -1\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert "learning_rate" in str(exc.value)
    path.write_text("precision = 16\n")
    with pytest.raises(ConfigError):
        parse_config(path)
    path.write_text("just a line\n")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_overrides_argument(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\n")
    cfg = parse_config(path, overrides={"threads": 4})
    assert cfg.epochs == 3 and cfg.threads == 4
    with pytest.raises(ConfigError):
        parse_config(path, overrides={"bogus": 1})


def test_runconfig_validate_direct():
    with pytest.raises(ConfigError):
        RunConfig(folds=1).validate()
    assert RunConfig().validate().seed == 0
