import pytest

from rvqsynth.config import (ConfigError, coerce, parse_bool,
                             parse_config_file, write_snapshot)


def test_parse_key_values_and_comments(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# a comment\nepochs = 5\nlr=0.01  # trailing comment\n\n")
    assert parse_config_file(f) == {"epochs": "5", "lr": "0.01"}


def test_include_relative_and_override(tmp_path):
    (tmp_path / "base.cfg").write_text("epochs = 5\nlr = 0.01\n")
    main = tmp_path / "main.cfg"
    main.write_text("include base.cfg\nepochs = 9\n")
    assert parse_config_file(main) == {"epochs": "9", "lr": "0.01"}


def test_include_cycle_detected(tmp_path):
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text("include b.cfg\n")
    b.write_text("include a.cfg\n")
    with pytest.raises(ConfigError):
        parse_config_file(a)


def test_parse_errors(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("no equals sign here\n")
    with pytest.raises(ConfigError):
        parse_config_file(f)
    f.write_text("= value\n")
    with pytest.raises(ConfigError):
        parse_config_file(f)
    with pytest.raises(ConfigError):
        parse_config_file(tmp_path / "absent.cfg")


def test_coerce_validates_keys_and_values():
    schema = {"epochs": int, "lr": float}
    assert coerce({"epochs": "5", "lr": "0.1"}, schema) == {"epochs": 5,
                                                            "lr": 0.1}
    with pytest.raises(ConfigError):
        coerce({"unknown": "1"}, schema)
    with pytest.raises(ConfigError):
        coerce({"epochs": "five"}, schema)


def test_parse_bool():
    for v in ("1", "true", "Yes", "ON", True):
        assert parse_bool(v) is True
    for v in ("0", "false", "No", "off", False):
        assert parse_bool(v) is False
    with pytest.raises(ValueError):
        parse_bool("maybe")


def test_snapshot_is_sorted(tmp_path):
    path = tmp_path / "resolved"
    write_snapshot(path, {"b": 2, "a": 1})
    assert path.read_text() == "a=1\nb=2\n"
