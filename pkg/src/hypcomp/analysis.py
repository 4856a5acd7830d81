"""Closed-loop analysis of the observer-based compensator.

After the finite-time transients the closed loop reduces to the lumped
system ``[xi; eps_xi]`` with a block-triangular matrix, and the decoupling
state satisfies ``e_x(z, t) = Sigma(z) eps_xi(t)``.  This module solves the
boundary value problem for ``Sigma``, assembles the lumped matrix and
compares the prediction against simulated trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .characteristics import CharTable
from .decoupling import DecouplingSolution, _row_ivp, solve_reciprocal
from .kernel import KernelField
from .model import Grid, PlantSpec
from .observer import ObserverDesign, transform_inverse
from .volterra import trapezoid_weights

__all__ = [
    "ClosedLoopModel",
    "compute_Q1_tilde",
    "solve_Sigma",
    "Sigma_residuals",
    "closed_loop_matrix",
    "full_P",
    "decoupled_state",
    "PostSettlingReport",
    "predict_post_settling",
]

log = logging.getLogger(__name__)


def _trap(grid: Grid):
    w = np.full(grid.N + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return w


def compute_Q1_tilde(spec: PlantSpec, dec: DecouplingSolution, obs: ObserverDesign) -> np.ndarray:
    """``Q1 E2^T T_o^{-1}[Gamma](1) + K_xi + int_0^1 K_x(z) T_o^{-1}[Gamma](z) dz``."""
    p = spec.p
    grid = obs.R_I.grid
    TG = transform_inverse(obs.R_I, obs.Gamma)
    return (spec.Q1 @ TG[-1, p:] + dec.K_xi
            + np.einsum("a,aik,akq->iq", _trap(grid), dec.K_x, TG))


@dataclass
class SigmaSolution:
    Sigma: np.ndarray    # (N+1, n, n_xi)
    cond: float
    Q1_tilde: np.ndarray
    F_tilde: np.ndarray


def solve_Sigma(spec: PlantSpec, H0, Q1_tilde, F_tilde, grid: Grid) -> SigmaSolution:
    """Solve ``Lambda Sigma' = Sigma F~ - H0 E1^T Sigma(0)`` with
    ``(E2^T - Q0 E1^T) Sigma(0) = 0`` and ``E1^T Sigma(1) = Q~1``.

    Every row is written as a combination of the unknown ``X = E1^T Sigma(0)``:
    a homogeneous part through the fundamental matrix and a forced part
    driven by the columns of ``H0``.  The conditions at ``z = 1`` then give
    one linear system for ``X`` (block upper triangular since ``H1`` is
    strictly lower triangular).
    """
    p, n, q = spec.p, spec.n, spec.n_xi
    N = grid.N
    tab = CharTable.from_spec(spec, grid)
    H0 = np.asarray(H0, dtype=float)
    Ft = np.asarray(F_tilde, dtype=float)
    eye = np.eye(q)
    Phi = np.zeros((n, N + 1, q, q))
    Z = np.zeros((n, p, N + 1, q, q))
    zero = np.zeros((N + 1, 1, q))
    for i in range(n):
        Phi[i] = _row_ivp(Ft, tab.phi[i], eye, zero)
        for k in range(p):
            if np.any(H0[:, i, k] != 0):
                Z[i, k] = _row_ivp(Ft, tab.phi[i], np.zeros((q, q)), -H0[:, i, k, None, None] * eye)
    # rows i < p at z = 1: X_i Phi_i(1) + sum_k X_k Z_ik(1) = Q~1_i
    T = np.transpose(Z[:p, :, -1], (1, 0, 2, 3)).copy()  # T[k, i]
    for i in range(p):
        T[i, i] += Phi[i, -1]
    Mbig = np.transpose(T, (0, 2, 1, 3)).reshape(p * q, p * q)
    cond = float(np.linalg.cond(Mbig))
    log.info("Sigma boundary system condition number %.3e", cond)
    X = np.linalg.solve(Mbig.T, np.asarray(Q1_tilde, float).reshape(p * q)).reshape(p, q)
    Y0 = np.vstack([X, spec.Q0 @ X])
    Sig = np.einsum("iq,iaqr->air", Y0, Phi) + np.einsum("kq,ikaqr->air", X, Z)
    return SigmaSolution(Sig, cond, np.asarray(Q1_tilde, float), Ft)


def Sigma_residuals(spec: PlantSpec, sol: SigmaSolution, H0, grid: Grid):
    """Boundary residuals and the mean finite-difference residual of the ODE.

    Returns
    -------
    (r0, r1, rode) : tuple of float
        ``|(E2^T - Q0 E1^T) Sigma(0)|``, ``|E1^T Sigma(1) - Q~1|`` (max
        norms) and the mean of ``|Lambda Sigma' - Sigma F~ + H0 X|`` on the
        cell midpoints.
    """
    p = spec.p
    S = sol.Sigma
    X = S[0, :p]
    r0 = float(np.max(np.abs(S[0, p:] - spec.Q0 @ X)))
    r1 = float(np.max(np.abs(S[-1, :p] - sol.Q1_tilde)))
    zm = 0.5 * (grid.z[1:] + grid.z[:-1])
    lam = spec.lam(zm).T  # (N, n)
    dS = np.diff(S, axis=0) / grid.h
    Sm = 0.5 * (S[1:] + S[:-1])
    Hm = 0.5 * (np.asarray(H0)[1:] + np.asarray(H0)[:-1])
    res = lam[:, :, None] * dS - Sm @ sol.F_tilde + Hm @ X
    return r0, r1, float(np.mean(np.abs(res)))


def closed_loop_matrix(spec: PlantSpec, K, Sigma0_row, L_xi, Gamma0_row) -> np.ndarray:
    """``[[F - B K, B E1^T Sigma(0)], [0, F - L_xi E1^T Gamma(0)]]``."""
    q = spec.n_xi
    top = np.hstack([spec.F - spec.B @ K, spec.B @ Sigma0_row])
    bot = np.hstack([np.zeros((q, q)), spec.F - L_xi @ Gamma0_row])
    return np.vstack([top, bot])


@dataclass
class ClosedLoopModel:
    """Post-settling model of the closed loop."""

    Sigma: np.ndarray
    Q1_tilde: np.ndarray
    matrix: np.ndarray
    cond: float

    @classmethod
    def build(cls, spec: PlantSpec, dec: DecouplingSolution, obs: ObserverDesign) -> "ClosedLoopModel":
        grid = obs.R_I.grid
        Q1t = compute_Q1_tilde(spec, dec, obs)
        Ft = spec.F - obs.L_xi @ obs.Gamma[0, : spec.p]
        sol = solve_Sigma(spec, dec.H0, Q1t, Ft, grid)
        mat = closed_loop_matrix(spec, dec.K, sol.Sigma[0, : spec.p], obs.L_xi, obs.Gamma[0, : spec.p])
        return cls(sol.Sigma, Q1t, mat, sol.cond)


def full_P(P_I: KernelField) -> KernelField:
    """Kernel ``P`` on the whole triangle (per-row Volterra solves)."""
    return solve_reciprocal(P_I, sign=+1.0)


def decoupled_state(x, xi, K: KernelField, P: KernelField, N_I) -> np.ndarray:
    """``e_x = T2[T1[x] - N_I xi]`` with ``T1[x] = x - int K x`` and
    ``T2[v] = v - int P v``.

    ``x`` has shape (..., n, N+1) and ``xi`` shape (..., n_xi); returns the
    same shape as ``x``.
    """
    W = trapezoid_weights(len(K.grid), K.grid.h)
    x = np.asarray(x, dtype=float)
    xt = x - np.einsum("ab,ijab,...jb->...ia", W, K.values, x)
    v = xt - np.einsum("aiq,...q->...ia", np.asarray(N_I), np.asarray(xi, dtype=float))
    return v - np.einsum("ab,ijab,...jb->...ia", W, P.values, v)


@dataclass
class PostSettlingReport:
    t_start: float
    deviation: float          # max over the window of sup_z |e_x - Sigma eps_xi|
    reference: float          # peak of sup_z |e_x| over the whole trace
    relative: float           # deviation / reference
    samples: int

    def __str__(self):
        return (f"post-settling deviation {self.deviation:.3e} over t >= {self.t_start:.4g} "
                f"({self.samples} samples), relative {self.relative:.3%}")


def predict_post_settling(Sigma, t, e_x, eps_xi, t_settle: float, guard: float) -> PostSettlingReport:
    """Compare ``e_x(z, t)`` with ``Sigma(z) eps_xi(t)`` after ``t_settle + guard``.

    Parameters
    ----------
    Sigma : ndarray, shape (N+1, n, n_xi)
    t : ndarray, shape (T,)
    e_x : ndarray, shape (T, n, N+1)
    eps_xi : ndarray, shape (T, n_xi)

    The deviation is normalised by the peak of ``sup_z |e_x|`` over the
    whole trace.

    Raises
    ------
    ValueError
        If the trace ends before the window starts.
    """
    t = np.asarray(t)
    t0 = t_settle + guard
    sel = t >= t0
    if not np.any(sel):
        raise ValueError(f"trace ends at t = {t[-1]:.4g}, before the comparison window t >= {t0:.4g}")
    pred = np.einsum("aiq,tq->tia", np.asarray(Sigma), np.asarray(eps_xi)[sel])
    dev = float(np.max(np.abs(np.asarray(e_x)[sel] - pred)))
    ref = float(np.max(np.abs(e_x)))
    rel = dev / ref if ref > 0 else 0.0
    return PostSettlingReport(t0, dev, ref, rel, int(np.sum(sel)))
