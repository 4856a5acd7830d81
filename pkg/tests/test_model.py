import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypcomp.config import ConfigError, dumps_config, load_config, loads_config
from hypcomp.expr import ExpressionError
from hypcomp.model import (DesignParams, Grid, ScalarFunction, SimConfig, SpatialMatrixFunction,
                           parse_expression, validate_plant)

from plants import EXAMPLE, toy_spec


# --- expressions -------------------------------------------------------------

@pytest.mark.parametrize("src, z, expected", [
    ("2*exp(2*z)", 0.0, 2.0),
    ("sin(z)", 0.0, 0.0),
    ("z^2+1", 1.0, 2.0),
    ("2*e^3", 0.3, 2 * math.e ** 3),
    ("-z^-2", 0.5, -4.0),
    ("2**z", 1.0, 2.0),
    ("cos(pi*z)", 1.0, -1.0),
    ("(1+z)/(2-z)", 0.5, 1.0),
])
def test_parse_expression_values(src, z, expected):
    assert parse_expression(src)(z) == pytest.approx(expected, rel=1e-15, abs=1e-15)


def test_power_is_right_associative_and_binds_tighter_than_minus():
    assert parse_expression("2^3^2")(0.0) == 512.0
    assert parse_expression("-2^2")(0.0) == -4.0


@pytest.mark.parametrize("src, pos", [("2*+", 3), ("foo(z)", 0), ("z z", 2), ("(z", 2), ("", 0),
                                      ("1 $ 2", 2)])
def test_syntax_errors_report_position(src, pos):
    with pytest.raises(ExpressionError) as info:
        parse_expression(src)
    assert info.value.pos == pos


def test_out_of_range_evaluation_is_an_error():
    f = parse_expression("z")
    with pytest.raises(ValueError):
        f(1.5)
    with pytest.raises(ValueError):
        f(-0.1)


def test_expression_evaluation_is_vectorised():
    z = np.linspace(0, 1, 11)
    np.testing.assert_allclose(parse_expression("exp(z)*sin(z)")(z), np.exp(z) * np.sin(z), rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-3, 3), N=st.integers(2, 64))
def test_table_and_expression_agree_at_nodes(a, b, c, N):
    src = f"{a!r}*z^2 + {b!r}*sin({c!r}*z)"
    expr = parse_expression(src)
    grid = Grid(N)
    table = ScalarFunction.from_table(expr.sample(grid))
    np.testing.assert_array_equal(table(grid.z), expr(grid.z))


# --- grid and spatial functions ---------------------------------------------

def test_grid_nodes():
    g = Grid(16)
    assert g.h == 1 / 16
    assert len(g) == 17
    assert g.z[0] == 0.0 and g.z[-1] == 1.0
    assert np.all(np.diff(g.z) > 0)


@settings(max_examples=30, deadline=None)
@given(N=st.integers(2, 40), seed=st.integers(0, 10_000))
def test_spatial_matrix_function_interpolates_exactly_at_nodes(N, seed):
    g = Grid(N)
    vals = np.random.default_rng(seed).normal(size=(N + 1, 2, 3))
    f = SpatialMatrixFunction(g, vals)
    np.testing.assert_array_equal(f(g.z), vals)
    mid = 0.5 * (g.z[0] + g.z[1])
    np.testing.assert_allclose(f(mid), 0.5 * (vals[0] + vals[1]), rtol=1e-14, atol=1e-14)


# --- validation ---------------------------------------------------------------

def test_example_plant_is_valid(example):
    rep = validate_plant(example.spec, Grid(200))
    assert rep.ok and rep.violations == []


def test_speed_ordering_violation():
    spec = toy_spec(["1", "2", "-1"], 2)
    rep = validate_plant(spec, Grid(32))
    assert not rep.ok
    assert any("lambda_1 > lambda_2" in v for v in rep.violations)


def test_speed_sign_violation():
    rep = validate_plant(toy_spec(["1", "0.5"], 1), Grid(32))
    assert any("lambda_2 must be negative" in v for v in rep.violations)


def test_zero_diagonal_violation():
    spec = toy_spec(["1", "-1"], 1, A=[["1", "0"], ["0", "0"]])
    rep = validate_plant(spec, Grid(32))
    assert any("zero diagonal" in v for v in rep.violations)


def test_unstabilizable_pair():
    spec = toy_spec(["1", "-1"], 1, F=np.eye(2), B=[[1.0], [0.0]])
    rep = validate_plant(spec, Grid(32))
    assert any("stabilizability" in v for v in rep.violations)


def test_uncontrollable_but_stable_mode_is_stabilizable():
    spec = toy_spec(["1", "-1"], 1, F=np.diag([1.0, -1.0]), B=[[1.0], [0.0]])
    assert validate_plant(spec, Grid(32)).ok


def test_non_finite_coefficient_reported():
    spec = toy_spec(["1", "-1"], 1, A=[["0", "1/z"], ["0", "0"]])
    rep = validate_plant(spec, Grid(32))
    assert any("non-finite" in v for v in rep.violations)


def test_design_parameter_violations():
    par = DesignParams([-1, 1], [-1 + 1j, -2], N=8)
    msgs = par.violations(2)
    assert any("N = 8" in m for m in msgs)
    assert any("negative" in m for m in msgs)
    assert any("conjugation" in m for m in msgs)
    assert DesignParams([-1 + 1j, -1 - 1j], [-2, -3]).violations(2) == []


def test_sim_config_invariants():
    with pytest.raises(ValueError):
        SimConfig(cfl=1.5)
    with pytest.raises(ValueError):
        SimConfig(t_final=0.0)


# --- configuration files --------------------------------------------------------

def test_example_config_contents(example):
    spec, par = example.spec, example.params
    assert (spec.n, spec.p, spec.m, spec.n_xi) == (4, 2, 2, 3)
    np.testing.assert_allclose(spec.lam(np.array(0.3)), [3, 2, -1, -2])
    np.testing.assert_allclose(spec.Q1, [[2 * math.e ** 3, math.e ** 2], [math.e, 2]], rtol=1e-15)
    assert par.controller_poles == [-2, -3, -4]
    assert par.observer_poles == [-5, -6, -7]
    assert par.N == 200 and example.sim.cfl == 0.9


def test_config_round_trip(example):
    text = dumps_config(example)
    again = loads_config(text)
    z = np.linspace(0, 1, 57)
    a, b = example.spec, again.spec
    np.testing.assert_allclose(b.lam(z), a.lam(z), rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.A_at(z), a.A_at(z), rtol=0, atol=1e-12)
    for name in ("Q0", "Q1", "C2", "F", "B"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name), rtol=0, atol=1e-12)
    assert again.params.controller_poles == example.params.controller_poles
    assert dumps_config(again) == text


def test_config_hash_is_content_hash():
    a = load_config(EXAMPLE)
    b = loads_config(EXAMPLE.read_text())
    assert a.source_hash == b.source_hash and len(a.source_hash) == 64


@pytest.mark.parametrize("text", [
    "not = [toml",
    "[dimensions]\nn = 2\np = 1\n",
    "[dimensions]\nn = 2\np = 3\nn_xi = 1\n",
])
def test_malformed_configs(text):
    with pytest.raises(ConfigError):
        loads_config(text)
