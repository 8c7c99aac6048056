import pytest
from hypothesis import given, strategies as st

from tinyssl.config import SCHEMA, ConfigError, defaults, help_text, parse_config


def test_defaults():
    cfg = parse_config("")
    assert cfg.method == "ca_dssl" and cfg["loss.lambda_reg"] == 0.0 and cfg["loss.lambda_ms"] == 0.5
    assert cfg["optimizer.batch"] == 256 and cfg["optimizer.micro_batch"] == 64
    assert cfg.head_kind() == "capacity_proportional_linear" and cfg.curriculum_enabled()
    assert parse_config("method = simclr").head_kind() == "seed_mlp"
    assert not parse_config("method = simclr").curriculum_enabled()


def test_comments_and_values():
    cfg = parse_config("# run\nloss.lambda_reg = 0.1  # on\n\nhead.kind = seed_mlp\n")
    assert cfg["loss.lambda_reg"] == 0.1 and cfg.head_kind() == "seed_mlp"


@pytest.mark.parametrize("text,line,fragment", [
    ("seed = 1\nbogus = 3", 2, "unknown key"),
    ("seed = x", 1, "bad value"),
    ("seed = 1\nseed = 2", 2, "already set on line 1"),
    ("method = byol\n\nteacher.synth_seed = 3", 3, "uses no teacher"),
    ("method = simclr\nema.decay = 0.9", 2, "no EMA target"),
    ("optimizer.micro_batch = 48", 1, "multiple"),
    ("method = seed\nloss.lambda_ms = 0.5", 2, "lambda_ms"),
    ("method = simclr\nloss.lambda_reg = 0.1", 2, "lambda_reg"),
    ("just words", 1, "key = value"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError, match=fr"line {line}:.*{fragment}"):
        parse_config(text)


def test_overrides_and_round_trip():
    cfg = parse_config("method = byol\n", ["ema.decay=0.99", "optimizer.lr=0.003"])
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values
    with pytest.raises(ConfigError, match="override"):
        parse_config("", ["nope=1"])
    assert defaults().to_text() == ""


@given(st.sampled_from(["ca_dssl", "simclr", "byol", "dino", "supervised", "seed"]),
       st.floats(1e-5, 1e-1), st.integers(0, 2 ** 31), st.sampled_from([1, 2, 4, 8]))
def test_to_text_reparses(method, lr, seed, micro):
    cfg = parse_config(f"method = {method}\noptimizer.lr = {lr!r}\nseed = {seed}\noptimizer.micro_batch = {micro}\n")
    assert parse_config(cfg.to_text()).values == cfg.values


def test_help_lists_every_key():
    text = help_text()
    assert all(k in text for k in SCHEMA)
