"""Run configuration as a flat INI file (sections of ``key = value``).

Numbers may be written as exact fractions (``T_gc = 275/12``); they are kept
as :class:`fractions.Fraction` so a parsed file serialises back to the same
text.  Floats are written with ``repr``; ``none`` marks an unset optional.
"""
import configparser
from dataclasses import dataclass, field, fields
from fractions import Fraction
import io

from .errors import ParameterError
from .market_model import ModelParams

__all__ = ["RunConfig", "parse_config", "load_config", "dump_config", "default_config"]

_SECTIONS = ("model", "grid", "bounds", "picard", "benchmark", "run")


def _model_defaults():
    d = {}
    for f in fields(ModelParams):
        v = f.default
        if f.name in ("T_gc", "h_lead", "eta_plus", "eta_minus"):
            v = Fraction(v).limit_denominator(1000)
        d[f.name] = v
    return d


@dataclass
class RunConfig:
    """Typed run configuration; every key has a default."""

    model: dict = field(default_factory=_model_defaults)
    grid: dict = field(default_factory=lambda: {"N_x": 50, "N_y": 50, "N_q": 200, "N_m": 16,
                                                "N_t": 300})
    bounds: dict = field(default_factory=lambda: {"eps_tail": 0.01, "alpha_plus": None,
                                                  "alpha_minus": None, "eps_pad": 1.0,
                                                  "mU_paths": 10000, "mU_steps": 550,
                                                  "mU_seed": 0})
    picard: dict = field(default_factory=lambda: {"R_max": 15, "tol": 1e-06, "omega": 0.5,
                                                  "upwind": "monotone"})
    benchmark: dict = field(default_factory=lambda: {"twap": True, "pf": True, "pf_n_q": 1000,
                                                     "day_beta": True, "q0": 0.0})
    run: dict = field(default_factory=lambda: {"seed": 0, "days": 10, "paths": 100,
                                               "out_dir": "out", "snapshot": True,
                                               "workers": 1})

    def params(self, **overrides):
        """:class:`ModelParams` from the model section (fractions become floats)."""
        kw = {k: (float(v) if isinstance(v, Fraction) else v) for k, v in self.model.items()}
        kw.update(overrides)
        return ModelParams(**kw)

    def resolutions(self):
        g = self.grid
        return (g["N_x"], g["N_y"], g["N_q"], g["N_m"], g["N_t"])

    def alphas(self):
        a, b = self.bounds["alpha_plus"], self.bounds["alpha_minus"]
        if a is None and b is None:
            return None
        if a is None or b is None:
            raise ParameterError("give both alpha_plus and alpha_minus or neither")
        return float(a), float(b)

    def picard_options(self):
        from .hjb_stage3 import PicardOptions
        p = self.picard
        return PicardOptions(int(p["R_max"]), float(p["tol"]), float(p["omega"]), p["upwind"])


def default_config():
    return RunConfig()


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}" if v.denominator != 1 else str(v.numerator)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text, default, key):
    t = text.strip()
    if t.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if t.lower() not in ("true", "false"):
                raise ValueError(t)
            return t.lower() == "true"
        if isinstance(default, int):
            return int(t)
        if isinstance(default, str):
            return t
        if isinstance(default, Fraction):
            return Fraction(t)
        if "/" in t:
            num, den = t.split("/")
            return Fraction(int(num), int(den))
        return float(t)
    except (ValueError, ZeroDivisionError) as exc:
        raise ParameterError(f"cannot parse {key} = {text!r}", key=key) from exc


def parse_config(text):
    """Parse INI text; unknown sections or keys are usage errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParameterError(f"malformed config: {exc}") from exc
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ParameterError(f"unknown config section [{section}]", section=section)
        target = getattr(cfg, section)
        for key, raw in cp.items(section):
            if key not in target:
                raise ParameterError(f"unknown key {key!r} in [{section}]", section=section,
                                     key=key)
            default = target[key]
            if default is None:
                default = 0.0
            target[key] = _coerce(raw, default, f"{section}.{key}")
    cfg.params()
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    """Canonical INI text; ``dump_config(parse_config(t)) == t`` for canonical ``t``."""
    out = io.StringIO()
    for i, section in enumerate(_SECTIONS):
        if i:
            out.write("\n")
        out.write(f"[{section}]\n")
        for key, v in getattr(cfg, section).items():
            out.write(f"{key} = {_format(v)}\n")
    return out.getvalue()
