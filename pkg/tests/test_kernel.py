import numpy as np
import pytest

from hypcomp import kernel as km
from hypcomp.model import Grid

from plants import coupled_2x2, toy_params, toy_spec

FROZEN_RTOL = 1e-7


def test_zero_coupling_gives_zero_kernel():
    spec = toy_spec(["2", "1", "-1"], 2, Q0=[[0.7, -0.4]])
    K = km.solve_controller_kernel(spec, toy_params(N=32), Grid(32))
    assert np.all(K.values == 0.0)
    np.testing.assert_array_equal(km.extract_A0(K, spec).values, 0.0)


def test_example_kernel_gates(design200, example):
    sol = design200.kernel
    spec = example.spec
    g = design200.grid
    lam = spec.lam(g.z)
    assert km.bc_residual(sol.K, lam[:, 0], spec.Q0, spec.p) <= 1e-8
    assert km.diagonal_residual(sol.K, lam, np.asarray(spec.A_at(g.z))) <= 1e-12
    assert km.artificial_residual(sol) == 0.0
    assert sol.change < example.params.tol
    assert np.all(np.isfinite(sol.K.values))
    # the upper triangle of the (z, zeta) square is not part of the domain
    assert np.all(sol.K.values[:, :, 0, 1:] == 0.0)


def test_example_kernel_frozen_values(design200):
    K = design200.kernel.K.values
    np.testing.assert_allclose(K[:, :, -1, 0], [
        [0.4290578809, 0.0, -0.4254387107, 0.3217934107],
        [0.0, 0.0, -0.2931238445, -0.3995817133],
        [0.0228861711, 0.2536576125, 0.0, 0.0],
        [-0.0667511501, -0.0833804954, 0.0, 0.0]], rtol=FROZEN_RTOL, atol=1e-9)
    np.testing.assert_allclose(K[:, :, 100, 50], [
        [0.5663995754, 0.1023177563, -0.3830066683, 0.5079588335],
        [-0.6409369395, -0.2510025792, -0.4904974334, -0.3489205455],
        [-0.114277144, 0.2560128926, -0.1407140828, -0.1733711496],
        [-0.0186128902, -0.1429312172, 0.0707503833, 0.0491401075]], rtol=FROZEN_RTOL, atol=1e-9)


def test_kernel_field_interpolation_and_export(design200):
    K = design200.kernel.K
    np.testing.assert_allclose(K(0.5, 0.25), K.values[:, :, 100, 50], atol=1e-14)
    rows = list(K.csv_rows())
    assert len(rows) == 16 * 201 * 202 // 2
    z, zeta, i, j, v = rows[-1]
    assert z == 1.0 and zeta == 1.0 and (i, j) == (4, 4)


def test_extract_A0_structure(design200, example):
    A0 = km.extract_A0(design200.kernel.K, example.spec).values
    p = example.spec.p
    A1 = A0[:, :p, :]
    assert np.all(A1[:, np.triu_indices(p)[0], np.triu_indices(p)[1]] == 0.0)
    np.testing.assert_allclose(A0[-1], [[0, 0], [1.5983268534, 0], [0.0686585134, 0.507315225],
                                        [-0.2002534503, -0.1667609908]], rtol=FROZEN_RTOL, atol=1e-9)


def test_extract_A0_single_positive_speed_is_zero_block():
    spec, par = coupled_2x2(N=32)
    K = km.solve_controller_kernel(spec, par, Grid(32))
    assert np.all(km.extract_A0(K, spec).values[:, :1, :] == 0.0)


def test_compute_G_reductions(design200, example):
    spec = example.spec
    K = design200.kernel.K
    G = km.compute_G(K, spec).values
    lam0 = spec.lam(np.array(0.0))
    expected = np.einsum("aik,k,kj->aij", K.at_zeta0()[:, :, 2:], lam0[2:], spec.C2)
    np.testing.assert_allclose(G, expected, atol=1e-14)
    np.testing.assert_allclose(G[-1], [[0.4254387107, 0, -0.6435868213], [0.2931238445, 0, 0.7991634267],
                                       [0, 0, 0], [0, 0, 0]], rtol=FROZEN_RTOL, atol=1e-9)


def test_compute_G_zero_and_identity_cases():
    g = Grid(24)
    spec = toy_spec(["1", "-1"], 1, C1=[["sin(z)"], ["z"]], C2=[[0.0]])
    zero = km.KernelField(g, np.zeros((2, 2, 25, 25)))
    G = km.compute_G(zero, spec).values
    np.testing.assert_allclose(G[:, 0, 0], np.sin(g.z), atol=1e-15)
    np.testing.assert_allclose(G[:, 1, 0], g.z, atol=1e-15)
    spec0 = toy_spec(["1", "-1"], 1)
    assert np.all(km.compute_G(zero, spec0).values == 0.0)


def test_self_convergence_2x2():
    spec, par = coupled_2x2()
    Ks = {N: km.solve_controller_kernel(spec, par, Grid(N)).values for N in (200, 400, 800)}
    tri = np.tril(np.ones((201, 201), dtype=bool))
    k200 = Ks[200][:, :, tri]
    k400 = Ks[400][:, :, ::2, ::2][:, :, tri]
    k800 = Ks[800][:, :, ::4, ::4][:, :, tri]
    bound = 2 * np.max(np.abs(k200 - k400))  # first-order extrapolated error of the N = 200 kernel
    assert np.max(np.abs(k200 - k800)) <= 4 * bound
    np.testing.assert_allclose(Ks[200][:, :, -1, 0], [[-0.11625332, -0.34875995], [-0.19056314, 0.0]],
                               atol=1e-8)


def test_interior_residual_first_order(example):
    spec, par = example.spec, example.params
    res = {}
    for N in (50, 100):
        sol = km.solve_kernel(km.controller_problem(spec, par, Grid(N)), par.tol, par.max_iter)
        res[N] = km.pde_residual(sol)
    assert 1.5 <= res[50] / res[100] <= 2.5


def test_non_convergence_reported(example):
    par = toy_params(N=32, max_iter=2)
    with pytest.raises(km.KernelConvergenceError, match="did not converge"):
        km.solve_kernel(km.controller_problem(example.spec, par, Grid(32)), 1e-14, 2)


def test_artificial_data_imposed():
    spec = toy_spec(["2", "1", "-1", "-2"], 2, A=[["0", "1", "0", "0"], ["0.5", "0", "0", "0"],
                                                  ["0", "0", "0", "1"], ["0", "0", "-1", "0"]])
    par = toy_params(N=32, l={(1, 0): "0.3*z"}, m={(3, 2): "0.2"}, n={(2, 3): "-0.1"})
    sol = km.solve_kernel(km.controller_problem(spec, par, Grid(32)), 1e-12, 200)
    assert km.artificial_residual(sol) <= 1e-12
    K = sol.K.values
    assert K[1, 0, -1, 10] == pytest.approx(0.3 * 10 / 32, abs=1e-12)
