import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypcomp.characteristics import (CharTable, fundamental_matrix, phi, phi_inverse, settling_times,
                                     sigma)
from hypcomp.model import Grid

from plants import toy_spec


def table(lams, N=200):
    g = Grid(N)
    return CharTable(np.array([np.broadcast_to(np.asarray(v(g.z) if callable(v) else v, float),
                                               g.z.shape) for v in lams]), g)


def test_phi_constant_speed_and_origin():
    t = table([3.0, 2.0, -1.0, -2.0])
    assert phi(t, 0, 1.0) == pytest.approx(1 / 3, abs=1e-15)
    assert phi(t, 3, 1.0) == pytest.approx(-0.5, abs=1e-15)
    for i in range(4):
        assert phi(t, i, 0.0) == 0.0


def test_phi_closed_form_for_variable_speed():
    # lambda = 1/(1+z)  =>  phi = z + z^2/2 (trapezoid on a linear integrand is exact)
    t = table([lambda z: 1 / (1 + z), -1.0])
    assert phi(t, 0, 1.0) == pytest.approx(1.5, abs=1e-12)
    z = np.linspace(0, 1, 7)
    np.testing.assert_allclose(phi(t, 0, t.grid.z), t.grid.z + t.grid.z ** 2 / 2, atol=1e-12)
    assert phi_inverse(t, 0, 1.5) == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(phi(t, 0, z)) > 0)


def test_phi_monotonicity_by_direction():
    t = table([2.0, -0.5])
    assert np.all(np.diff(t.phi[0]) > 0)
    assert np.all(np.diff(t.phi[1]) < 0)
    assert np.all(np.diff(t.tau) > 0)


def test_phi_inverse_examples():
    t = table([2.0, -1.0])
    assert phi_inverse(t, 0, 0.25) == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(phi_inverse(t, 0, phi(t, 0, t.grid.z)), t.grid.z, atol=1e-10)
    with pytest.raises(ValueError):
        phi_inverse(t, 0, 0.6)
    with pytest.raises(ValueError):
        phi_inverse(t, 1, 0.1)
    with pytest.raises(IndexError):
        phi(t, 5, 0.1)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.2, 3.0), b=st.floats(-0.9, 0.9), s=st.floats(0, 1))
def test_phi_of_phi_inverse_is_identity(a, b, s):
    t = table([lambda z: a * (1 + b * z * z), -1.0], N=64)
    target = s * t.tau[0, -1]
    assert phi(t, 0, phi_inverse(t, 0, target)) == pytest.approx(target, abs=1e-10)


def test_sigma_examples():
    t = table([3.0, 2.0, -1.0])
    z = t.grid.z
    for i, j in [(0, 0), (0, 1), (1, 1)]:
        np.testing.assert_allclose(sigma(t, i, j, z, 0.0), z, atol=1e-12)
    np.testing.assert_allclose(sigma(t, 1, 1, z, 0.5 * z), 0.5 * z, atol=1e-12)
    assert sigma(t, 0, 0, 0.7, 0.7) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        sigma(t, 0, 1, 0.1, 0.9)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.3, 4.0), z=st.floats(0, 1), r=st.floats(0, 1))
def test_sigma_equal_constant_speeds(c, z, r):
    t = table([c, c, -1.0], N=50)
    zeta = r * z
    assert sigma(t, 0, 1, z, zeta) == pytest.approx(z - zeta, abs=1e-12)


def test_fundamental_matrix_examples():
    t = table([2.0, -1.0])
    assert np.allclose(fundamental_matrix(np.array([[1.0, 2.0], [0.0, -1.0]]), t, 0, 0.4, 0.4), np.eye(2))
    assert fundamental_matrix([[0.7]], t, 0, 1.0, 0.2)[0, 0] == pytest.approx(np.exp(0.7 * 0.8 / 2), rel=1e-13)
    assert fundamental_matrix([[0.7]], t, 1, 1.0, 0.0)[0, 0] == pytest.approx(np.exp(-0.7), rel=1e-13)
    np.testing.assert_array_equal(fundamental_matrix(np.zeros((3, 3)), t, 1, 0.9, 0.1), np.eye(3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 16), z=st.floats(0, 1), s=st.floats(0, 1), w=st.floats(0, 1))
def test_fundamental_matrix_semigroup(seed, z, s, w):
    M = np.random.default_rng(seed).normal(size=(3, 3))
    t = table([lambda x: 1 + x, -2.0], N=40)
    lhs = fundamental_matrix(M, t, 0, z, s) @ fundamental_matrix(M, t, 0, s, w)
    np.testing.assert_allclose(lhs, fundamental_matrix(M, t, 0, z, w), rtol=1e-10, atol=1e-10)


def test_settling_times_example(example):
    tc, to = settling_times(example.spec, Grid(200))
    assert tc == to == 11 / 6


@pytest.mark.parametrize("lams, expected", [(["1", "-1"], 2.0), (["2", "-0.5"], 2.5)])
def test_settling_times_small(lams, expected):
    assert settling_times(toy_spec(lams, 1), Grid(32))[0] == pytest.approx(expected, abs=1e-14)


def test_char_table_rejects_zero_speed():
    with pytest.raises(ValueError):
        CharTable(np.array([[1.0, 0.0, 1.0]]), Grid(2))
