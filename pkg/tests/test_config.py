import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oponerf.config import Config, ConfigError, dump_config, load_config, parse_config


def test_defaults_round_trip():
    cfg = Config()
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(cfg)).digest() == cfg.digest()


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0, 1), st.sampled_from(["fused", "ones", "zeros", "direct"]), st.booleans())
def test_round_trip_of_changed_fields(seed, alpha, mode, prob):
    cfg = Config(seed=seed, alpha=alpha, adaptive_mode=mode, probabilistic=prob)
    assert parse_config(dump_config(cfg)) == cfg


def test_partial_file_overrides_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\niterations = 10  # short run\nlr = 1\n\nvalidation_views = [3, 4]\n")
    cfg = load_config(p)
    assert cfg.iterations == 10 and cfg.lr == 1.0 and cfg.validation_views == [3, 4]
    assert cfg.channels == Config().channels


@pytest.mark.parametrize("text, pattern", [
    ("iterations = 5\nbogus = 1", r"line 2: unknown field 'bogus'"),
    ("lr = abc", r"line 1: field 'lr' has malformed"),
    ("iterations = 2.5", r"line 1: field 'iterations' expects int"),
    ("probabilistic = 1", r"line 1: field 'probabilistic' expects bool"),
    ("iterations", r"line 1: expected 'name = value'"),
    ("adaptive_mode = \"sometimes\"", r"adaptive_mode"),
    ("alpha = -1", r"alpha"),
])
def test_diagnostics_name_line_and_field(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_digest_changes_with_any_field():
    assert Config().digest() != Config(seed=1).digest()
    assert Config().digest() == Config().digest()
