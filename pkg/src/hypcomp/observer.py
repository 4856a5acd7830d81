"""Anticollocated observer design.

The observer kernel ``R_I`` is obtained by reflecting its boundary value
problem (``xi = 1 - zeta``, ``eta = 1 - z``) into controller form and reusing
:func:`hypcomp.kernel.solve_kernel`.  From ``R_I`` follow the inverse kernel
``R``, the coupling ``G_o``, the decoupling matrix ``Gamma`` and the gains
``L_xi``, ``L(z)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .characteristics import CharTable
from .decoupling import _row_ivp, place_poles, solve_reciprocal
from .kernel import KernelField, KernelProblem, KernelSolution, solve_kernel
from .model import DesignParams, Grid, PlantSpec
from .volterra import trapezoid_weights

__all__ = [
    "ObserverDesign",
    "ObservabilityReport",
    "observer_problem",
    "solve_observer_kernel",
    "compute_S",
    "compute_R",
    "kerntrafo_residual",
    "compute_Go",
    "solve_Gamma",
    "Gamma_residuals",
    "check_observability",
    "compute_observer_gains",
    "transform_inverse",
    "transform_forward",
    "design_observer",
    "observer_bc_residual",
    "observer_diagonal_residual",
    "recrel_residual",
    "observer_error_matrix",
    "ObservabilityError",
    "GammaSolution",
]

log = logging.getLogger(__name__)


def observer_problem(spec: PlantSpec, params: DesignParams, grid: Grid | None = None) -> KernelProblem:
    """Reflected observer kernel problem in controller form.

    With ``U(x, y) = Lambda(1-x) R_I(1-y, 1-x)^T Lambda(1-y)^{-1}`` the observer
    kernel equations become the controller kernel equations for speeds
    ``Lambda(1-x)``, coupling ``Lambda(1-y) A^T(1-y) Lambda(1-y)^{-1}`` and
    boundary matrix ``-Q1^T``.
    """
    grid = grid or Grid(params.N)
    p = spec.p

    def lam(x):
        return spec.lam(1.0 - np.asarray(x, dtype=float))

    def A_hat(y):
        y = np.asarray(y, dtype=float)
        lv = spec.lam(1.0 - y)
        At = np.swapaxes(spec.A_at(1.0 - y), 0, 1)
        return At * lv[:, None] / lv[None, :]

    return KernelProblem(
        grid=grid, p=p, lam=lam, A=A_hat, Q0=-spec.Q1.T,
        l={(i, j): f for (i, j), f in params.obs_l.items()},
        m={(i + p, j + p): f for (i, j), f in params.obs_m.items()},
        nn={(i + p, j + p): f for (i, j), f in params.obs_n.items()},
    )


def _unreflect(U: KernelField, spec: PlantSpec) -> KernelField:
    """``R_I(z_a, zeta_b) = Lambda(z_a) U(x_{N-b}, y_{N-a})^T Lambda(zeta_b)^{-1}``."""
    g = U.grid
    N = g.N
    lam = spec.lam(g.z)  # (n, N+1)
    V = U.values[:, :, ::-1, ::-1]  # V[i, j, a, b] = U_ij(x_{N-a}, y_{N-b})
    Ut = np.transpose(V, (1, 0, 3, 2))  # -> U_ji(x_{N-b}, y_{N-a}) at [i, j, a, b]
    R = Ut * lam[:, None, :, None] / lam[None, :, None, :]
    return KernelField(g, np.tril(np.ones((N + 1, N + 1))) * R)


def compute_S(R_I: KernelField, spec: PlantSpec) -> np.ndarray:
    """``S(zeta) = -(E1^T - Q1 E2^T) R_I(1, zeta)`` with ``S1`` forced strictly upper.

    Returns an array of shape (N+1, p, n).
    """
    p = spec.p
    row = np.moveaxis(R_I.values[:, :, -1, :], -1, 0)  # (N+1, n, n)
    S = -(row[:, :p, :] - np.einsum("ik,akj->aij", spec.Q1, row[:, p:, :]))
    S[:, :, :p] = np.triu(S[:, :, :p], 1)
    return S


def solve_observer_kernel(spec: PlantSpec, params: DesignParams, grid: Grid | None = None):
    """Observer kernel and boundary coupling.

    Returns
    -------
    R_I : KernelField
    S : ndarray, shape (N+1, p, n)
    sol : KernelSolution
        Solution of the reflected problem (for residual checks).
    """
    prob = observer_problem(spec, params, grid)
    sol = solve_kernel(prob, params.tol, params.max_iter)
    R_I = _unreflect(sol.K, spec)
    return R_I, compute_S(R_I, spec), sol


def observer_bc_residual(R_I: KernelField, S, spec: PlantSpec) -> float:
    """Max of ``|(E1^T - Q1 E2^T) R_I(1, zeta) + S(zeta)|`` over the nodes.

    At the corner ``zeta = 1`` the strictly lower entries of the first block
    carry the diagonal value of the kernel and are excluded.
    """
    p = spec.p
    row = np.moveaxis(R_I.values[:, :, -1, :], -1, 0)
    lhs = row[:, :p, :] - np.einsum("ik,akj->aij", spec.Q1, row[:, p:, :])
    res = np.abs(lhs + S)
    res[-1, :, :p] *= np.triu(np.ones((p, p)), 0)
    return float(np.max(res))


def observer_diagonal_residual(R_I: KernelField, spec: PlantSpec) -> float:
    """Max of ``|Lambda R_I(z,z) - R_I(z,z) Lambda - A|`` off the matrix diagonal."""
    g = R_I.grid
    idx = np.arange(len(g))
    D = R_I.values[:, :, idx, idx]
    lam = spec.lam(g.z)
    res = lam[:, None, :] * D - D * lam[None, :, :] - spec.A_at(g.z)
    off = ~np.eye(spec.n, dtype=bool)
    return float(np.max(np.abs(res[off])))


def compute_R(R_I: KernelField) -> KernelField:
    """Inverse kernel from ``R(z,s) - int_s^z R(z,s') R_I(s',s) ds' = R_I(z,s)``."""
    return solve_reciprocal(R_I, sign=-1.0)


def recrel_residual(R: KernelField, R_I: KernelField) -> float:
    """Max substitution residual of the reciprocity relation (trapezoid rule)."""
    g = R.grid
    N, h = g.N, g.h
    worst = 0.0
    for a in range(1, N + 1):
        Rv = R.values[:, :, a, : a + 1]  # (n, n, a+1) over s'
        for b in range(a + 1):
            w = np.full(a - b + 1, h)
            w[0] = w[-1] = 0.5 * h
            if a == b:
                w[:] = 0.0
            integ = np.einsum("s,iks,kjs->ij", w, Rv[:, :, b:], R_I.values[:, :, b: a + 1, b])
            res = Rv[:, :, b] - integ - R_I.values[:, :, a, b]
            worst = max(worst, float(np.max(np.abs(res))))
    return worst


def kerntrafo_residual(R: KernelField, R_I: KernelField) -> float:
    """Max of ``|R_I(z,0) + int_0^z R(z,s) R_I(s,0) ds - R(z,0)|``."""
    W = trapezoid_weights(len(R.grid), R.grid.h)
    integ = np.einsum("ab,ikab,kjb->aij", W, R.values, R_I.values[:, :, :, 0])
    res = R_I.at_zeta0() + integ - R.at_zeta0()
    return float(np.max(np.abs(res)))


def transform_forward(R: KernelField, X) -> np.ndarray:
    """``T_o[X](z) = X(z) + int_0^z R(z,s) X(s) ds``; X of shape (N+1, n[, q])."""
    W = trapezoid_weights(len(R.grid), R.grid.h)
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        return X + np.einsum("ab,ijab,bj->ai", W, R.values, X)
    return X + np.einsum("ab,ijab,bjq->aiq", W, R.values, X)


def transform_inverse(R_I: KernelField, X) -> np.ndarray:
    """``T_o^{-1}[X](z) = X(z) - int_0^z R_I(z,s) X(s) ds``."""
    W = trapezoid_weights(len(R_I.grid), R_I.grid.h)
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        return X - np.einsum("ab,ijab,bj->ai", W, R_I.values, X)
    return X - np.einsum("ab,ijab,bjq->aiq", W, R_I.values, X)


def compute_Go(R: KernelField, spec: PlantSpec) -> np.ndarray:
    """``G_o(z) = T_o[C1](z) - R(z,0) Lambda(0) E2 C2``; shape (N+1, n, n_xi)."""
    g = R.grid
    p = spec.p
    C1 = np.moveaxis(spec.C1_at(g.z), -1, 0)
    lam0 = spec.lam(np.array(0.0))
    Go = -np.einsum("aik,k,kq->aiq", R.at_zeta0()[:, :, p:], lam0[p:], spec.C2)
    if np.any(C1 != 0):
        Go = Go + transform_forward(R, C1)
    return Go


@dataclass
class GammaSolution:
    Gamma: np.ndarray        # (N+1, n, n_xi)
    cond: float              # condition number of the boundary system


def solve_Gamma(spec: PlantSpec, Go, S, grid: Grid) -> GammaSolution:
    """Decoupling matrix from ``Lambda Gamma' = Gamma F - G_o`` with
    ``E2^T Gamma(0) = C2`` and ``(E1^T - Q1 E2^T) Gamma(1) + int S Gamma = 0``.

    The ``mu`` rows are initial value problems; each ``nu`` row is a
    homogeneous part ``nu_i(0) Psi_i(z, 0)`` plus a particular solution, and
    the unknown ``E1^T Gamma(0)`` solves one linear system.
    """
    p, n, q = spec.p, spec.n, spec.n_xi
    N = grid.N
    tab = CharTable.from_spec(spec, grid)
    F = spec.F
    Go = np.asarray(Go, dtype=float)
    S = np.asarray(S, dtype=float)
    Gam = np.zeros((N + 1, n, q))
    for i in range(p, n):
        Gam[:, i] = _row_ivp(F, tab.phi[i], spec.C2[i - p], -Go[:, i])
    part = np.zeros((N + 1, p, q))
    Psi = np.zeros((N + 1, p, q, q))
    zero = np.zeros((N + 1, q))
    for i in range(p):
        part[:, i] = _row_ivp(F, tab.phi[i], np.zeros(q), -Go[:, i])
        Psi[:, i] = _row_ivp(F, tab.phi[i], np.eye(q), zero[:, None, :])
    w = np.full(N + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    S1, S2 = S[:, :, :p], S[:, :, p:]
    # sum_k X_k T[i,k] = r_i
    T = np.einsum("a,aik,akqr->ikqr", w, S1, Psi)
    for i in range(p):
        T[i, i] += Psi[-1, i]
    r = (spec.Q1 @ Gam[-1, p:] - part[-1]
         - np.einsum("a,aik,akq->iq", w, S1, part)
         - np.einsum("a,aik,akq->iq", w, S2, Gam[:, p:]))
    # unknown vec(X) with X[k, q]; equation (i, r): sum_k sum_q X[k,q] T[i,k,q,r]
    Mbig = np.transpose(T, (0, 3, 1, 2)).reshape(p * q, p * q)
    cond = float(np.linalg.cond(Mbig))
    log.info("Gamma boundary system condition number %.3e", cond)
    X = np.linalg.solve(Mbig, r.reshape(p * q)).reshape(p, q)
    Gam[:, :p] = np.einsum("kq,akqr->akr", X, Psi) + part
    return GammaSolution(Gam, cond)


def Gamma_residuals(spec: PlantSpec, Gamma, S, grid: Grid):
    """``(|E2^T Gamma(0) - C2|, |(E1^T - Q1 E2^T) Gamma(1) + int S Gamma|)`` in max norm."""
    p = spec.p
    w = np.full(grid.N + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    r0 = float(np.max(np.abs(Gamma[0, p:] - spec.C2)))
    r1 = Gamma[-1, :p] - spec.Q1 @ Gamma[-1, p:] + np.einsum("a,aik,akq->iq", w, S, Gamma)
    return r0, float(np.max(np.abs(r1)))


@dataclass
class ObservabilityReport:
    observable: bool
    eigenvalues: np.ndarray
    products: np.ndarray       # |E1^T Gamma(0) v_i| per eigenvector (or per eigenvalue in rank mode)
    thresholds: np.ndarray
    method: str                # "eigenvector" or "rank"

    def __str__(self):
        lines = [f"observability ({self.method} test): {'passed' if self.observable else 'failed'}"]
        for mu, v, t in zip(self.eigenvalues, self.products, self.thresholds):
            lines.append(f"  mu = {mu:.6g}: |C v| = {v:.3e} (threshold {t:.3e})")
        return "\n".join(lines)


def check_observability(Gamma0_row, F, Gamma_norm: float | None = None, rel: float = 1e-8) -> ObservabilityReport:
    """Eigenvector test ``E1^T Gamma(0) v_i != 0`` for every eigenvector of ``F``.

    The threshold is ``rel * ||Gamma(0)|| * ||v_i||``.  If ``F`` has fewer
    than ``n_xi`` independent eigenvectors, the rank of ``[mu I - F; C]`` is
    tested per eigenvalue instead.
    """
    C = np.atleast_2d(np.asarray(Gamma0_row, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    q = F.shape[0]
    gn = float(np.linalg.norm(C)) if Gamma_norm is None else float(Gamma_norm)
    mu, V = np.linalg.eig(F)
    sv = np.linalg.svd(V, compute_uv=False)
    if sv[-1] > 1e-8 * sv[0]:
        prods = np.linalg.norm(C @ V, axis=0)
        thr = rel * gn * np.linalg.norm(V, axis=0)
        ok = bool(np.all(prods > thr)) and gn > 0
        return ObservabilityReport(ok, mu, prods, thr, "eigenvector")
    uniq = []
    for m in mu:
        if not any(abs(m - u) <= 1e-6 * max(1.0, abs(m)) for u in uniq):
            uniq.append(m)
    prods, thr = [], []
    scale = max(gn, np.linalg.norm(F), 1.0)
    for m in uniq:
        Mx = np.vstack([m * np.eye(q) - F, C])
        s = np.linalg.svd(Mx, compute_uv=False)
        prods.append(s[q - 1] if s.size >= q else 0.0)
        thr.append(rel * scale)
    prods, thr = np.array(prods), np.array(thr)
    return ObservabilityReport(bool(np.all(prods > thr)) and gn > 0, np.array(uniq), prods, thr, "rank")


def compute_observer_gains(Gamma, R_I: KernelField, spec: PlantSpec, observer_poles, seed: int = 0):
    """``L_xi`` by dual pole placement and ``L(z) = T_o^{-1}[Gamma](z) L_xi - R_I(z,0) Lambda(0) E1``.

    Returns
    -------
    L_xi : ndarray, shape (n_xi, p)
    L : ndarray, shape (N+1, n, p)
    """
    p = spec.p
    C = Gamma[0, :p]
    L_xi = place_poles(spec.F.T, C.T, observer_poles, seed=seed).T
    lam0 = spec.lam(np.array(0.0))
    L = np.einsum("aiq,qj->aij", transform_inverse(R_I, Gamma), L_xi)
    L = L - R_I.at_zeta0()[:, :, :p] * lam0[None, None, :p]
    return L_xi, L


@dataclass
class ObserverDesign:
    """Observer kernels, decoupling matrix and gains on one grid."""

    R_I: KernelField
    R: KernelField
    S: np.ndarray            # (N+1, p, n)
    G_o: np.ndarray          # (N+1, n, n_xi)
    Gamma: np.ndarray        # (N+1, n, n_xi)
    L_xi: np.ndarray         # (n_xi, p)
    L: np.ndarray            # (N+1, n, p)
    observability: ObservabilityReport
    gamma_cond: float
    kernel: KernelSolution | None = field(default=None, repr=False)

    @property
    def C_obs(self) -> np.ndarray:
        """``E1^T Gamma(0)``."""
        return self.Gamma[0, : self.L.shape[2]]


def observer_error_matrix(spec: PlantSpec, obs: ObserverDesign) -> np.ndarray:
    """``F - L_xi E1^T Gamma(0)``."""
    return spec.F - obs.L_xi @ obs.C_obs


class ObservabilityError(ValueError):
    """The pair (E1^T Gamma(0), F) is not observable."""


def design_observer(spec: PlantSpec, params: DesignParams, grid: Grid | None = None) -> ObserverDesign:
    """Run the full observer design chain."""
    grid = grid or Grid(params.N)
    R_I, S, sol = solve_observer_kernel(spec, params, grid)
    R = compute_R(R_I)
    Go = compute_Go(R, spec)
    gs = solve_Gamma(spec, Go, S, grid)
    rep = check_observability(gs.Gamma[0, : spec.p], spec.F, np.linalg.norm(gs.Gamma[0]))
    if not rep.observable:
        raise ObservabilityError(str(rep))
    L_xi, L = compute_observer_gains(gs.Gamma, R_I, spec, params.observer_poles, params.seed)
    return ObserverDesign(R_I, R, S, Go, gs.Gamma, L_xi, L, rep, gs.cond, sol)
