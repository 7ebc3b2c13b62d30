from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspd import config as cfg
from mspd import marks as mk
from mspd.chaos import random_scenario
from mspd.errors import ParseError, ValidationError
from mspd.kernels import DKernel

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

POISSON = """\
[model]
d = 1
horizon = 2.0

[baseline]
1 = { constant = 1.5 }

[marks]
1 = { family = "point_mass", value = 1.0 }
"""


def test_minimal_poisson():
    spec, opts = cfg.loads(POISSON)
    assert spec.d == 1 and spec.horizon == 2.0
    assert spec.excitation.entry(0, 0) is None
    assert spec.payoff == DKernel.counting(1)
    assert opts.spectral_radius == 0.0
    assert opts.n_paths == 10_000 and opts.step is None


def test_radius_above_one_named():
    text = POISSON + '\n[excitation]\n"1,1" = { profile = { family = "exponential", alpha = 1.2, beta = 1.0 } }\n'
    with pytest.raises(ValidationError, match=r"1\.2\b"):
        cfg.loads(text)


def test_negative_rate_exact_line():
    text = POISSON.replace('1 = { family = "point_mass", value = 1.0 }',
                           '1 = { family = "exponential", rate = -1.0 }')
    with pytest.raises(ParseError) as exc:
        cfg.loads(text)
    assert exc.value.line == line_of(text, "rate = -1.0")


def test_negative_baseline_exact_line():
    text = POISSON.replace("constant = 1.5", "constant = -1.5")
    with pytest.raises(ParseError) as exc:
        cfg.loads(text)
    assert exc.value.line == 6


def line_of(text, needle):
    return next(n for n, ln in enumerate(text.splitlines(), 1) if needle in ln)


@pytest.mark.parametrize("extra, needle", [
    ("\n[run]\nseed = 1\nbogus = 2\n", "bogus"),
    ("\n[extra]\nx = 1\n", "[extra]"),
])
def test_unknown_keys_rejected(extra, needle):
    with pytest.raises(ParseError) as exc:
        cfg.loads(POISSON + extra)
    assert exc.value.line == line_of(POISSON + extra, needle)


def test_unknown_family_key_rejected():
    text = POISSON.replace("value = 1.0", "value = 1.0, shape = 2")
    with pytest.raises(ParseError) as exc:
        cfg.loads(text)
    assert exc.value.line == 9


def test_component_out_of_range():
    with pytest.raises(ParseError) as exc:
        cfg.loads(POISSON.replace("1 = { constant = 1.5 }", "2 = { constant = 1.5 }"))
    assert exc.value.line == 6


def test_syntax_error_has_line():
    with pytest.raises(ParseError) as exc:
        cfg.loads(POISSON + "\n[grid]\nstep = = 1\n")
    assert exc.value.line == line_of(POISSON + "\n[grid]\nstep = = 1\n", "step")


@pytest.mark.parametrize("name", ["hawkes1d", "cross2d", "poisson1d", "blockdiag2d"])
def test_presets_round_trip(name):
    spec, opts = cfg.load(CONFIGS / f"{name}.toml")
    again, opts2 = cfg.loads(cfg.dumps(spec, opts))
    assert again == spec
    assert opts2 == opts


def test_hawkes_preset_values():
    spec, opts = cfg.load(CONFIGS / "hawkes1d.toml")
    assert opts.spectral_radius == pytest.approx(0.5)
    assert spec.marks == (mk.Exponential(1.0),)
    assert opts.seed == 20240601 and opts.n_paths == 100_000 and opts.step == 0.001


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_spec_round_trip(seed):
    import numpy as np
    spec = random_scenario(np.random.default_rng(seed))
    assert cfg.loads(cfg.dumps(spec))[0] == spec
