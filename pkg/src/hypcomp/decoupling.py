"""Inverse decoupling of the PDE-ODE cascade and state-feedback gains.

Provides eigenvalue assignment for the ODE, the matrix ``N_I(z)`` from
row-wise linear IVPs along the characteristics, the kernel ``P_I(z, zeta)``
from the line-by-line recursion on its upper-triangular top-left block,
the row ``P(1, zeta)`` of the reciprocal kernel, and the gains
``K_xi``, ``K_x(z)`` of the state feedback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_sylvester
from scipy.optimize import linear_sum_assignment

from .characteristics import CharTable
from .expm import expm_phi
from .kernel import KernelField, compute_G, extract_A0
from .model import Grid, PlantSpec, SpatialMatrixFunction
from .volterra import VolterraError, solve_volterra2, trapezoid_weights

__all__ = [
    "PoleAssignmentError",
    "DecouplingSolution",
    "place_poles",
    "solve_NI",
    "solve_PI",
    "solve_PI_p2",
    "compute_H0",
    "hvolp_residuals",
    "recrel_row_residual",
    "decouple",
    "solve_reciprocal",
    "reciprocal_row",
    "compute_P1row",
    "compute_feedback_gains",
    "tail_weights",
]

log = logging.getLogger(__name__)


class PoleAssignmentError(ValueError):
    """Requested spectrum cannot be assigned."""


# ---------------------------------------------------------------------------
# pole placement


def _match(a, b):
    """Max distance between two multisets of complex numbers under the best pairing."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max()) if a.size else 0.0, c


def _block_form(poles, tol=1e-9):
    """Real block-diagonal matrix with the given spectrum.

    Repeated poles form a single Jordan chain so that the assignment also
    works with fewer inputs than the multiplicity.
    """
    poles = sorted((complex(p) for p in poles), key=lambda c: (c.real, c.imag))
    groups = []  # (value, multiplicity)
    for c in poles:
        if c.imag < -tol:
            continue
        for k, (v, m) in enumerate(groups):
            if abs(v - c) <= tol * max(1.0, abs(c)):
                groups[k] = (v, m + 1)
                break
        else:
            groups.append((c, 1))
    blocks = []
    for v, m in groups:
        if abs(v.imag) <= tol:
            J = v.real * np.eye(m) + np.diag(np.ones(m - 1), 1)
        else:
            R = np.array([[v.real, v.imag], [-v.imag, v.real]])
            J = np.kron(np.eye(m), R) + np.kron(np.diag(np.ones(m - 1), 1), np.eye(2))
        blocks.append(J)
    size = sum(b.shape[0] for b in blocks)
    D = np.zeros((size, size))
    k = 0
    for b in blocks:
        D[k:k + b.shape[0], k:k + b.shape[0]] = b
        k += b.shape[0]
    return D


def _check_conjugate(poles, tol=1e-9):
    rest = list(poles)
    while rest:
        c = rest.pop()
        if abs(c.imag) <= tol * max(1.0, abs(c)):
            continue
        d = min(range(len(rest)), key=lambda k: abs(rest[k] - c.conjugate()), default=None)
        if d is None or abs(rest[d] - c.conjugate()) > 1e-7 * max(1.0, abs(c)):
            raise PoleAssignmentError(f"pole {c} has no complex-conjugate partner")
        rest.pop(d)


def _assign(F, B, poles, rng, tries, cond_limit):
    n = F.shape[0]
    D = _block_form(poles)
    if D.shape[0] != n:
        raise PoleAssignmentError("pole list does not form a real spectrum of the right size")
    K0 = np.zeros((B.shape[1], n))
    # The Sylvester equation needs disjoint spectra; shift F by a random
    # feedback if a requested pole coincides with an open-loop eigenvalue.
    F0 = F
    eigF = np.linalg.eigvals(F)
    if _match_any(eigF, poles):
        for _ in range(tries):
            K0 = rng.standard_normal(K0.shape)
            F0 = F - B @ K0
            if not _match_any(np.linalg.eigvals(F0), poles):
                break
        else:
            raise PoleAssignmentError("could not separate open-loop and requested spectra")
    last = np.inf
    best, best_err = None, np.inf
    target = 1e-10 * max(1.0, max(abs(p) for p in poles))
    for _ in range(tries):
        Gp = rng.standard_normal((B.shape[1], n))
        X = solve_sylvester(F0, -D, B @ Gp)
        c = np.linalg.cond(X)
        last = c
        if not (np.isfinite(c) and c <= cond_limit):
            continue
        K = K0 + Gp @ np.linalg.inv(X)
        err, _ = _match(np.linalg.eigvals(F - B @ K), poles)
        if err <= target:
            return K
        if err < best_err:
            best, best_err = K, err
    if best is not None:
        return best
    raise PoleAssignmentError(f"assignment system ill-conditioned after {tries} draws (cond {last:.3e})")


def _match_any(eigs, poles, tol=1e-6):
    return any(abs(e - p) <= tol * max(1.0, abs(p)) for e in eigs for p in poles)


def _same_charpoly(M, poles, rtol=1e-9):
    """Compare characteristic polynomials; well conditioned for repeated poles,
    whose computed eigenvalues scatter like ``eps**(1/multiplicity)``."""
    a = np.poly(M)
    b = np.real(np.poly(np.asarray(poles, dtype=complex)))
    return bool(np.max(np.abs(a - b)) <= rtol * max(1.0, np.max(np.abs(b))))


def place_poles(F, B, poles, seed: int = 0, tries: int = 5, cond_limit: float = 1e8) -> np.ndarray:
    """Gain ``K`` such that ``F - B K`` has the requested eigenvalues.

    Uses eigenstructure assignment: with a real block matrix ``D`` carrying
    the requested spectrum and a pseudorandom parameter ``Gp`` (seeded),
    solve ``F X - X D = B Gp`` and set ``K = Gp X^{-1}``.  Uncontrollable
    modes (Kalman decomposition) must be stable and listed among ``poles``.

    Raises
    ------
    PoleAssignmentError
        Wrong number of poles, missing conjugates, unstable or unlisted
        uncontrollable modes, or an ill-conditioned assignment system.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    B = np.asarray(B, dtype=float).reshape(F.shape[0], -1)
    n = F.shape[0]
    poles = [complex(p) for p in poles]
    if len(poles) != n:
        raise PoleAssignmentError(f"need {n} poles, got {len(poles)}")
    _check_conjugate(poles)
    rng = np.random.default_rng(seed)
    ctrb = np.hstack([np.linalg.matrix_power(F, k) @ B for k in range(n)])
    U, s, _ = np.linalg.svd(ctrb)
    tol = max(ctrb.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0) * 1e3
    r = int(np.sum(s > tol))
    if r == n:
        K = _assign(F, B, poles, rng, tries, cond_limit)
    else:
        T = U
        Ft = T.T @ F @ T
        Bt = T.T @ B
        unc = np.linalg.eigvals(Ft[r:, r:])
        if np.any(unc.real >= 0):
            raise PoleAssignmentError(
                f"pair (F, B) is not stabilizable: uncontrollable eigenvalues {np.round(unc, 6)}")
        remaining = list(poles)
        for e in unc:
            k = min(range(len(remaining)), key=lambda i: abs(remaining[i] - e))
            if abs(remaining[k] - e) > 1e-6 * max(1.0, abs(e)):
                raise PoleAssignmentError(
                    f"uncontrollable eigenvalue {e:.6g} must be among the requested poles")
            remaining.pop(k)
        Kc = _assign(Ft[:r, :r], Bt[:r], remaining, rng, tries, cond_limit) if r else np.zeros((B.shape[1], 0))
        K = np.hstack([Kc, np.zeros((B.shape[1], n - r))]) @ T.T
    err, _ = _match(np.linalg.eigvals(F - B @ K), poles)
    scale = max(1.0, max(abs(p) for p in poles))
    if err > 1e-6 * scale and not _same_charpoly(F - B @ K, poles):
        raise PoleAssignmentError(f"closed-loop spectrum misses the request by {err:.3e}")
    return K


# ---------------------------------------------------------------------------
# N_I


def _row_ivp(M, phi_row, y0, forcing):
    """Integrate ``dy/dphi = y M + f`` on the grid with an exponential integrator.

    ``y0`` is a row of length ``q`` or a stack of rows; ``forcing`` has shape
    (N+1, q) (or broadcasts against ``y0``) and is piecewise linear in ``phi``.
    """
    N = phi_row.size - 1
    y0 = np.asarray(y0, dtype=float)
    y = np.empty((N + 1,) + y0.shape)
    y[0] = y0
    cache = {}
    for k in range(N):
        d = float(phi_row[k + 1] - phi_row[k])
        key = round(d, 15)
        if key not in cache:
            cache[key] = expm_phi(M, d)
        E, G1, G2 = cache[key]
        y[k + 1] = y[k] @ E + forcing[k] @ (G1 - G2) + forcing[k + 1] @ G2
    return y


def solve_NI(spec: PlantSpec, K, A0, G, grid: Grid):
    """Rows of ``N_I`` from their IVPs along the characteristic directions.

    Parameters
    ----------
    K : ndarray, shape (p, n_xi)
        ODE feedback gain.
    A0 : ndarray, shape (N+1, n, p)
        Target-system coefficient ``[A1; A2]``.
    G : ndarray, shape (N+1, n, n_xi)

    Returns
    -------
    M1, M2, N_I : ndarray
        Samples of shape (N+1, p, n_xi), (N+1, m, n_xi), (N+1, n, n_xi).
    """
    p = spec.p
    K = np.asarray(K, dtype=float)
    M = spec.F - spec.B @ K
    tab = CharTable.from_spec(spec, grid)
    y0 = np.vstack([-K, spec.C2 - spec.Q0 @ K])
    forcing = np.einsum("aik,kq->aiq", np.asarray(A0), K) - np.asarray(G)
    NI = np.empty((len(grid), spec.n, spec.n_xi))
    for i in range(spec.n):
        NI[:, i, :] = _row_ivp(M, tab.phi[i], y0[i], forcing[:, i, :])
    return NI[:, :p], NI[:, p:], NI


# ---------------------------------------------------------------------------
# P_I recursion


def _char_kernel(tab: CharTable, l, j, bvals):
    """``b(sigma_lj(z, zeta)) / lambda_j(zeta)`` on the lower triangle, zero where
    ``phi_j(zeta) > phi_l(z)``."""
    N = tab.grid.N
    s = tab.tau[l][:, None] - tab.tau[j][None, :]
    valid = (s >= -1e-14) & np.tril(np.ones((N + 1, N + 1), dtype=bool))
    sig = tab.tau_inv(l, np.where(valid, np.maximum(s, 0.0), 0.0))
    out = np.interp(sig, tab.grid.z, bvals) / tab.lam[j][None, :]
    return np.where(valid, out, 0.0)


def _tri_int(W, kern, f):
    """``int_0^{z_a} kern(z_a, zeta) f(zeta) dzeta`` by the trapezoid rule."""
    return np.einsum("ab,ab,b->a", W, kern, f)


def _volterra_scalar(kern, rhs, h, where):
    try:
        return solve_volterra2(kern, rhs, h)
    except VolterraError as exc:
        raise VolterraError(f"{where}: {exc}") from exc


def solve_PI(spec: PlantSpec, M1, A1, grid: Grid):
    """Kernel ``P_I`` and coefficient ``H0 = [H1; H2]`` for any ``p``.

    Lines ``l = p, ..., 1`` of the upper-triangular block are processed in
    turn; within a line the boundary data follow from the entries further
    right and the already known rows of ``H1``, after which the strictly
    lower entries ``h_lj`` solve scalar Volterra equations.

    Returns
    -------
    P_I : KernelField
    H1 : ndarray, shape (N+1, p, p)
    """
    p = spec.p
    tab = CharTable.from_spec(spec, grid)
    W = trapezoid_weights(len(grid), grid.h)
    MB = np.einsum("aik,kj->aij", np.asarray(M1), spec.B)
    A1 = np.asarray(A1)
    PI = np.zeros((p, p, len(grid), len(grid)))
    H1 = np.zeros((len(grid), p, p))
    for l in reversed(range(p)):
        for j in reversed(range(l, p)):
            b = MB[:, l, j].copy()
            for k in range(j + 1, p):
                b = b + _tri_int(W, PI[l, k], H1[:, k, j])
            PI[l, j] = _char_kernel(tab, l, j, b)
        for j in range(l):
            rhs = -MB[:, l, j] + A1[:, l, j]
            for k in range(l + 1, p):
                rhs = rhs - _tri_int(W, PI[l, k], H1[:, k, j])
            H1[:, l, j] = _volterra_scalar(PI[l, l], rhs, grid.h, f"h[{l + 1},{j + 1}]")
    return _embed(PI, spec.n, grid), H1


def solve_PI_p2(spec: PlantSpec, M1, A1, grid: Grid):
    """Closed-form sequence for two positive speeds.

    Same primitives and evaluation order as :func:`solve_PI`, written out
    for ``p = 2``: ``p_22``, ``p_12`` from ``M1 B``, then ``h_21`` from its
    Volterra equation, then ``p_11`` with the boundary integral over
    ``p_12 h_21``.
    """
    if spec.p != 2:
        raise ValueError("solve_PI_p2 needs p = 2")
    tab = CharTable.from_spec(spec, grid)
    W = trapezoid_weights(len(grid), grid.h)
    MB = np.einsum("aik,kj->aij", np.asarray(M1), spec.B)
    A1 = np.asarray(A1)
    PI = np.zeros((2, 2, len(grid), len(grid)))
    H1 = np.zeros((len(grid), 2, 2))
    PI[1, 1] = _char_kernel(tab, 1, 1, MB[:, 1, 1].copy())
    H1[:, 1, 0] = _volterra_scalar(PI[1, 1], -MB[:, 1, 0] + A1[:, 1, 0], grid.h, "h[2,1]")
    PI[0, 1] = _char_kernel(tab, 0, 1, MB[:, 0, 1].copy())
    b11 = MB[:, 0, 0].copy() + _tri_int(W, PI[0, 1], H1[:, 1, 0])
    PI[0, 0] = _char_kernel(tab, 0, 0, b11)
    return _embed(PI, spec.n, grid), H1


def hvolp_residuals(spec: PlantSpec, P_I: KernelField, H1, M1, A1) -> dict:
    """Substitution residuals of the Volterra equations for the entries of ``H1``.

    Returns
    -------
    dict
        ``{(l, j): max_z |h_lj + int P_ll h_lj - rhs_lj|}`` for ``l > j``
        (zero-based indices), with the trapezoid rule used by the solver.
    """
    p = spec.p
    grid = P_I.grid
    W = trapezoid_weights(len(grid), grid.h)
    MB = np.einsum("aik,kj->aij", np.asarray(M1), spec.B)
    A1 = np.asarray(A1)
    H1 = np.asarray(H1)
    PI = P_I.values
    out = {}
    for l in range(p):
        for j in range(l):
            rhs = -MB[:, l, j] + A1[:, l, j]
            for k in range(l + 1, p):
                rhs = rhs - _tri_int(W, PI[l, k], H1[:, k, j])
            r = H1[:, l, j] + _tri_int(W, PI[l, l], H1[:, l, j]) - rhs
            out[(l, j)] = float(np.max(np.abs(r)))
    return out


def _embed(block, n, grid):
    p = block.shape[0]
    full = np.zeros((n, n, len(grid), len(grid)))
    full[:p, :p] = block
    return KernelField(grid, full)


def compute_H0(spec: PlantSpec, H1, M2, A2):
    """Stack ``H1`` with ``H2 = -M2 B + A2``; shape (N+1, n, p)."""
    H2 = -np.einsum("aik,kj->aij", np.asarray(M2), spec.B) + np.asarray(A2)
    return np.concatenate([np.asarray(H1), H2], axis=1)


# ---------------------------------------------------------------------------
# reciprocal kernels


def reciprocal_row(KI: KernelField, a: int, sign: float = 1.0) -> np.ndarray:
    """Row ``X(z_a, zeta_b)``, ``b = 0..a``, of the reciprocal kernel.

    Solves ``X(z, zeta) + sign * int_zeta^z X(z, s) KI(s, zeta) ds = KI(z, zeta)``
    at ``z = z_a`` after reflecting ``zeta -> z_a - zeta`` so that the
    forward Nystrom solver applies; the kernel acts from the right, so the
    transposed rows are solved.

    Returns
    -------
    ndarray, shape (a+1, n, n)
        ``X(z_a, zeta_b)`` indexed by ``b``.
    """
    V = KI.values
    rev = np.arange(a, -1, -1)
    KIt = np.transpose(V, (2, 3, 1, 0))  # [z, zeta] -> KI(z, zeta)^T
    kv = sign * np.swapaxes(KIt[np.ix_(rev, rev)], 0, 1)
    g = KIt[a, rev]
    F = solve_volterra2(kv, g, KI.grid.h)
    return np.swapaxes(F, 1, 2)[::-1]


def solve_reciprocal(KI: KernelField, sign: float = 1.0) -> KernelField:
    """All rows of the reciprocal kernel (see :func:`reciprocal_row`)."""
    N = KI.grid.N
    n = KI.shape[0]
    out = np.zeros((n, KI.shape[1], N + 1, N + 1))
    for a in range(N + 1):
        out[:, :, a, : a + 1] = np.moveaxis(reciprocal_row(KI, a, sign), 0, -1)
    return KernelField(KI.grid, out)


def compute_P1row(P_I: KernelField) -> np.ndarray:
    """``P(1, zeta)`` at all nodes; shape (N+1, n, n)."""
    return reciprocal_row(P_I, P_I.grid.N, +1.0)


def recrel_row_residual(P1row, P_I: KernelField) -> float:
    """Max residual of ``P(1,zeta) + int_zeta^1 P(1,s) P_I(s,zeta) ds = P_I(1,zeta)``
    under the trapezoid discretisation used by the solver."""
    N, h = P_I.grid.N, P_I.grid.h
    V = P_I.values
    res = 0.0
    T = tail_weights(N + 1, h)
    for b in range(N + 1):
        integ = np.einsum("a,aik,kja->ij", T[b, b:], P1row[b:], V[:, :, b:, b])
        res = max(res, float(np.max(np.abs(P1row[b] + integ - V[:, :, N, b]))))
    return res


# ---------------------------------------------------------------------------
# gains


def tail_weights(npts: int, h: float) -> np.ndarray:
    """``T[b, a]`` with ``int_{z_b}^1 u ~ sum_a T[b, a] u_a`` (trapezoid)."""
    T = np.triu(np.full((npts, npts), h))
    T[:, -1] *= 0.5
    T[np.arange(npts), np.arange(npts)] = 0.5 * h
    T[-1, -1] = 0.0
    return T


def compute_feedback_gains(K_kernel: KernelField, P1row, N_I, p: int):
    """State-feedback gains.

    ``K_xi = E1^T (int_0^1 P(1,z) N_I(z) dz - N_I(1))`` and
    ``K_x(z) = E1^T (int_z^1 P(1,s) K(s,z) ds - K(1,z) - P(1,z))``.

    Returns
    -------
    K_xi : ndarray, shape (p, n_xi)
    K_x : ndarray, shape (N+1, p, n)
    """
    grid = K_kernel.grid
    N, h = grid.N, grid.h
    P1row = np.asarray(P1row)
    N_I = np.asarray(N_I)
    w = np.full(N + 1, h)
    w[0] = w[-1] = 0.5 * h
    K_xi = (np.einsum("a,aik,akq->iq", w, P1row, N_I) - N_I[-1])[:p]
    T = tail_weights(N + 1, h)
    Kv = K_kernel.values  # (n, n, z, zeta)
    integ = np.einsum("ba,aik,kjab->bij", T, P1row, Kv)
    K_x = (integ - np.moveaxis(Kv[:, :, N, :], -1, 0) - P1row)[:, :p, :]
    return K_xi, K_x


@dataclass
class DecouplingSolution:
    """Everything the state feedback needs, sampled on one grid."""

    K: np.ndarray            # ODE gain, p x n_xi
    M1: np.ndarray           # (N+1, p, n_xi)
    M2: np.ndarray           # (N+1, m, n_xi)
    N_I: np.ndarray          # (N+1, n, n_xi)
    P_I: KernelField
    H0: np.ndarray           # (N+1, n, p)
    P1row: np.ndarray        # (N+1, n, n)
    K_xi: np.ndarray         # (p, n_xi)
    K_x: np.ndarray          # (N+1, p, n)

    def K_x_function(self) -> SpatialMatrixFunction:
        return SpatialMatrixFunction(self.P_I.grid, self.K_x)

    @property
    def H1(self) -> np.ndarray:
        return self.H0[:, : self.K.shape[0]]


def decouple(spec: PlantSpec, K_kernel: KernelField, K) -> DecouplingSolution:
    """Run the decoupling chain for a solved kernel and an ODE gain ``K``."""
    p = spec.p
    grid = K_kernel.grid
    A0 = extract_A0(K_kernel, spec).values
    G = compute_G(K_kernel, spec).values
    M1, M2, N_I = solve_NI(spec, K, A0, G, grid)
    P_I, H1 = solve_PI(spec, M1, A0[:, :p], grid)
    P1row = compute_P1row(P_I)
    H0 = compute_H0(spec, H1, M2, A0[:, p:])
    K_xi, K_x = compute_feedback_gains(K_kernel, P1row, N_I, p)
    return DecouplingSolution(np.asarray(K, float), M1, M2, N_I, P_I, H0, P1row, K_xi, K_x)
