from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from intraday_hjb.config import default_config, dump_config, load_config, parse_config
from intraday_hjb.errors import ParameterError


def test_defaults_reproduce_reference_parameters():
    p = default_config().params()
    assert p.lam == 0.4167 and p.gamma == 0.02 and p.T_gc == 275 / 12
    assert default_config().model["T_gc"] == Fraction(275, 12)


def test_round_trip_is_byte_identical():
    text = dump_config(default_config())
    assert dump_config(parse_config(text)) == text


def test_partial_file_fills_defaults(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[model]\nlam = 2.083\n[grid]\nN_q = 60\n")
    cfg = load_config(f)
    assert cfg.params().lam == 2.083
    assert cfg.resolutions() == (50, 50, 60, 16, 300)


@pytest.mark.parametrize("text", ["[nonsense]\na = 1\n", "[model]\nlambda = 1\n",
                                  "[grid]\nN_q = many\n", "[model]\ngamma = -1\n"])
def test_bad_config_is_rejected(text):
    with pytest.raises(ParameterError):
        parse_config(text)


@given(lam=st.floats(0, 2.4, allow_nan=False), nq=st.integers(2, 500),
       seed=st.integers(0, 2 ** 31), upwind=st.sampled_from(["monotone", "one-sided"]),
       num=st.integers(1, 400), den=st.integers(1, 60))
def test_round_trip_property(lam, nq, seed, upwind, num, den):
    cfg = default_config()
    cfg.model["lam"] = lam
    cfg.model["h_lead"] = Fraction(num, den)
    cfg.grid["N_q"] = nq
    cfg.run["seed"] = seed
    cfg.picard["upwind"] = upwind
    text = dump_config(cfg)
    again = parse_config(text)
    assert dump_config(again) == text
    assert again.model == cfg.model
