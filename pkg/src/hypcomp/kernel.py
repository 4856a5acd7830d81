"""Backstepping kernel equations on the triangle ``0 <= zeta <= z <= 1``.

Solves, entry by entry,

    lambda_i(z) dK_ij/dz + d(K_ij lambda_j)/dzeta = sum_k K_ik A_kj(zeta)

with the diagonal condition ``K_ij(z, z) = A_ij / (lambda_j - lambda_i)``,
the coupled bottom condition on the upper triangle of the top-left block,
and the artificial data ``l`` (top-left, below the diagonal, at ``z = 1``),
``m`` (bottom-right, on and below the diagonal, at ``zeta = 0``) and ``n``
(bottom-right, above the diagonal, at ``z = 1``).

Method
------
With ``w = K_ij lambda_j(zeta)`` each equation becomes
``dw/ds = lambda_j(zeta) S_ij`` along ``dz/ds = lambda_i``,
``dzeta/ds = lambda_j``, on which ``phi_i(z) - phi_j(zeta)`` is constant.
``w`` is split into the boundary value ``B`` at the entry point of the full
characteristic (computed in closed form from the time maps, which keeps
jumps sharp) and the accumulated source ``I``.  ``I`` is marched row by row
in a semi-Lagrangian fashion: the characteristic through a node is traced to
the neighbouring grid row (or to the boundary, where ``I = 0``) and the
source is integrated with the trapezoid rule.  The sources are taken from
the previous iterate and the whole field is iterated to a fixed point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .characteristics import CharTable
from .model import DesignParams, Grid, PlantSpec, SpatialMatrixFunction

__all__ = [
    "KernelField",
    "KernelProblem",
    "KernelSolution",
    "KernelConvergenceError",
    "controller_problem",
    "solve_kernel",
    "solve_controller_kernel",
    "extract_A0",
    "compute_G",
    "boundary_matrix",
    "bc_residual",
    "diagonal_residual",
    "artificial_residual",
    "pde_residual",
]

log = logging.getLogger(__name__)


class KernelConvergenceError(RuntimeError):
    """Fixed-point iteration for the kernel did not converge."""


class KernelField:
    """Matrix kernel sampled on the lower-triangular node set ``b <= a``.

    ``values[i, j, a, b]`` holds entry ``(i, j)`` at ``(z_a, zeta_b)``; the
    strict upper triangle in ``(a, b)`` is unused and kept at zero.
    """

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape[2:] != (len(grid), len(grid)):
            raise ValueError("kernel samples must have shape (r, c, N+1, N+1)")
        self.grid = grid
        self.values = values

    @property
    def shape(self):
        return self.values.shape[:2]

    def __call__(self, z, zeta):
        """Piecewise-linear interpolation on the triangulated grid.

        Each grid square is split along its diagonal, so nodes on the
        diagonal ``z = zeta`` are reproduced and the interpolant never reads
        values from above it.
        """
        h, N = self.grid.h, self.grid.N
        z = float(z)
        zeta = float(zeta)
        if not (-1e-12 <= zeta <= z + 1e-12 and z <= 1 + 1e-12):
            raise ValueError("point outside the triangle 0 <= zeta <= z <= 1")
        u, v = min(max(z / h, 0.0), N), min(max(zeta / h, 0.0), N)
        a = min(int(np.floor(u)), N - 1)
        b = min(int(np.floor(v)), N - 1)
        du, dv = u - a, v - b
        K = self.values
        if b > a or (b == a and dv > du):
            b = a
            dv = min(dv, du)
        if du >= dv:
            # triangle (a,b), (a+1,b), (a+1,b+1)
            return K[:, :, a, b] + du * (K[:, :, a + 1, b] - K[:, :, a, b]) + dv * (
                K[:, :, a + 1, b + 1] - K[:, :, a + 1, b])
        # triangle (a,b), (a,b+1), (a+1,b+1)
        return K[:, :, a, b] + dv * (K[:, :, a, b + 1] - K[:, :, a, b]) + du * (
            K[:, :, a + 1, b + 1] - K[:, :, a, b + 1])

    def row(self, a):
        """Samples ``K(z_a, zeta_b)`` for ``b = 0..a``; shape (a+1, r, c)."""
        return np.moveaxis(self.values[:, :, a, : a + 1], -1, 0)

    def at_zeta0(self):
        """``K(z, 0)`` at all nodes; shape (N+1, r, c)."""
        return np.moveaxis(self.values[:, :, :, 0], -1, 0)

    def csv_rows(self):
        """Yield ``(z, zeta, i, j, value)`` over the triangular grid (1-based i, j)."""
        z = self.grid.z
        r, c = self.shape
        for a in range(len(z)):
            for b in range(a + 1):
                for i in range(r):
                    for j in range(c):
                        yield z[a], z[b], i + 1, j + 1, self.values[i, j, a, b]


@dataclass
class KernelProblem:
    """Data of one kernel boundary value problem in controller form.

    ``lam(z)`` returns the speeds with shape ``(n,) + z.shape`` and ``A(z)``
    the coupling with shape ``(n, n) + z.shape``; ``l``, ``m``, ``nn`` map
    0-based global index pairs to callables of one variable.
    """

    grid: Grid
    p: int
    lam: Callable
    A: Callable
    Q0: np.ndarray
    l: Mapping = field(default_factory=dict)
    m: Mapping = field(default_factory=dict)
    nn: Mapping = field(default_factory=dict)

    def __post_init__(self):
        self.lam_nodes = np.asarray(self.lam(self.grid.z), dtype=float)
        self.n = self.lam_nodes.shape[0]
        self.table = CharTable(self.lam_nodes, self.grid)
        self.A_nodes = np.asarray(self.A(self.grid.z), dtype=float)
        self.Q0 = np.asarray(self.Q0, dtype=float).reshape(self.n - self.p, self.p)

    def lam_j(self, j, z):
        return np.asarray(self.lam(np.asarray(z, dtype=float)), dtype=float)[j]

    def diag_value(self, i, j, x):
        """``w = K_ij lambda_j`` on the diagonal at ``x``."""
        x = np.asarray(x, dtype=float)
        lam = np.asarray(self.lam(x), dtype=float)
        return np.asarray(self.A(x), dtype=float)[i, j] * lam[j] / (lam[j] - lam[i])

    def art(self, kind, i, j, x):
        d = {"l": self.l, "m": self.m, "n": self.nn}[kind]
        f = d.get((i, j))
        x = np.asarray(x, dtype=float)
        if f is None:
            return np.zeros(x.shape)
        return np.asarray(f(x), dtype=float) * np.ones(x.shape)


def controller_problem(spec: PlantSpec, params: DesignParams, grid: Grid | None = None) -> KernelProblem:
    """Kernel problem for the state feedback, with configured artificial data.

    Artificial-data keys in ``params`` use block-local 0-based indices:
    ``l`` refers to the top-left block, ``m`` and ``n`` to the bottom-right.
    """
    grid = grid or Grid(params.N)
    p = spec.p
    return KernelProblem(
        grid=grid, p=p, lam=spec.lam, A=spec.A_at, Q0=spec.Q0,
        l={(i, j): f for (i, j), f in params.l.items()},
        m={(i + p, j + p): f for (i, j), f in params.m.items()},
        nn={(i + p, j + p): f for (i, j), f in params.n.items()},
    )


# ---------------------------------------------------------------------------
# geometry


def _is_down(p, i, j):
    """Entries whose characteristics are traced towards ``z = 1``."""
    return (i < p and j < p and i > j) or (i >= p and j >= p and i < j)


def _classify(p, n):
    up1, up2, down = [], [], []
    for i in range(n):
        for j in range(n):
            if _is_down(p, i, j):
                down.append((i, j))
            elif i < p and j < p:
                up2.append((i, j))
            else:
                up1.append((i, j))
    return up1, up2, down


def _diag_cross(tab: CharTable, i, j, c):
    """Point ``x`` with ``phi_i(x) - phi_j(x) = c``; exact for the tabulated maps."""
    g = tab.phi[i] - tab.phi[j]
    z = tab.grid.z
    if g[-1] < g[0]:
        return np.interp(-np.asarray(c, float), -g, z)
    return np.interp(c, g, z)


def _jump_offset(prob: KernelProblem, i, k):
    """Invariant ``phi_i(z) - phi_k(zeta)`` on the jump curve of entry (i, k), or None."""
    tab, p = prob.table, prob.p
    if tab.sign[i] != tab.sign[k] or i == k:
        return None
    if (i < p and i < k) or (i >= p and i > k):
        return 0.0
    return tab.phi[i, -1] - tab.phi[k, -1]


def _entry(prob: KernelProblem, i, j, z, zeta):
    """Value of ``w = K_ij lambda_j`` where the characteristic through (z, zeta) enters.

    Returns
    -------
    val : ndarray
        Entry value for characteristics starting on data that is known a priori.
    dyn : ndarray of bool
        Characteristics starting on the coupled bottom boundary; their value
        is ``w_b(zs)``, taken from the current iterate.
    zs : ndarray
        Entry abscissa for the ``dyn`` points.
    """
    tab, p, N = prob.table, prob.p, prob.grid.N
    z = np.asarray(z, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    si, sj = tab.sign[i], tab.sign[j]
    c = tab.phi_at(i, z) - tab.phi_at(j, zeta)
    val = np.zeros(z.shape)
    dyn = np.zeros(z.shape, dtype=bool)
    zs = np.zeros(z.shape)
    if _is_down(p, i, j):
        kind = "l" if i < p else "n"
        ttop = sj * (tab.phi[i, N] - c)
        hit = (ttop >= 0) & (ttop <= tab.tau[j, N])
        zt = tab.tau_inv(j, np.clip(ttop[hit], 0.0, tab.tau[j, N]))
        val[hit] = prob.art(kind, i, j, zt) * prob.lam_j(j, zt)
    else:
        hit = np.zeros(z.shape, dtype=bool)
        if i == j:
            hit = np.ones(z.shape, dtype=bool)
        elif si == sj:
            hit = si * c >= 0
        zb = tab.tau_inv(i, np.maximum(si * c[hit], 0.0))
        if i < p:
            dyn[hit] = True
            zs[hit] = zb
        else:
            val[hit] = prob.art("m", i, j, zb) * prob.lam_j(j, 0.0)
    rest = ~hit
    if np.any(rest):
        val[rest] = prob.diag_value(i, j, _diag_cross(tab, i, j, c[rest]))
    return val, dyn, zs


def _interp_index(x, h, N):
    k = np.clip(np.floor(x / h).astype(int), 0, N - 1)
    return k, np.clip(x / h - k, 0.0, 1.0)


@dataclass
class _RowPlan:
    e: np.ndarray         # group-local entry index
    own: np.ndarray       # global entry index i*n + j
    q: np.ndarray         # flat node index a*(N+1)+b
    p1: np.ndarray        # foot interpolation nodes and weight
    p2: np.ndarray
    wt: np.ndarray
    interior: np.ndarray  # foot strictly inside the triangle
    s_f: np.ndarray       # signed characteristic time from node to foot
    ik: np.ndarray        # (n, R) global indices i*n + k
    bf: np.ndarray        # (n, R) a-priori entry values of w_ik at the foot
    cn: np.ndarray        # (n, R) quadrature weights on K_ik(node)
    cf: np.ndarray        # (n, R) quadrature weights on w_ik(foot)
    dyn: tuple            # (flat positions in (n, R), z index, weight) of bottom-coupled foot values


class _Group:
    """Precomputed characteristic geometry for a set of kernel entries."""

    def __init__(self, prob: KernelProblem, entries, direction):
        self.entries = entries
        self.direction = direction
        g = prob.grid
        N, n, h = g.N, prob.n, g.h
        tab = prob.table
        self.gidx = np.array([i * n + j for i, j in entries], dtype=int)
        npts = (N + 1) ** 2
        self.Bn = np.zeros((len(entries), npts))
        self.Bn_dyn = []
        fixed = {"e": [], "q": [], "val": [], "dyn_a": []}
        cols = {k: [] for k in ("e", "q", "a", "p1", "p2", "wt", "interior", "s_f", "ik", "bf", "cn", "cf",
                                "dpos", "dk", "dw")}
        aa, bb = np.tril_indices(N + 1)
        for e, (i, j) in enumerate(entries):
            si, sj = tab.sign[i], tab.sign[j]
            q_all = aa * (N + 1) + bb
            diag_node = (aa == bb) & (i != j)
            if direction > 0:
                bottom_node = (bb == 0) & (si == sj) & (i < prob.p or i >= j) & ~diag_node
                fix_b = bottom_node
            else:
                fix_b = (aa == N) & ~diag_node
            # ---- fixed nodes
            idx = np.nonzero(diag_node)[0]
            fixed["e"].append(np.full(idx.size, e))
            fixed["q"].append(q_all[idx])
            fixed["val"].append(prob.A_nodes[i, j, aa[idx]]
                                / (prob.lam_nodes[j, aa[idx]] - prob.lam_nodes[i, aa[idx]]))
            fixed["dyn_a"].append(np.full(idx.size, -1))
            idx = np.nonzero(fix_b)[0]
            fixed["e"].append(np.full(idx.size, e))
            fixed["q"].append(q_all[idx])
            if direction < 0:
                fixed["val"].append(prob.art("l" if i < prob.p else "n", i, j, g.z[bb[idx]]))
                fixed["dyn_a"].append(np.full(idx.size, -1))
            elif i >= prob.p:
                fixed["val"].append(prob.art("m", i, j, g.z[aa[idx]]))
                fixed["dyn_a"].append(np.full(idx.size, -1))
            else:
                fixed["val"].append(np.zeros(idx.size))
                fixed["dyn_a"].append(aa[idx])
            # ---- marching nodes and their feet
            march = ~(diag_node | fix_b)
            am, bm = aa[march], bb[march]
            R = am.size
            zn, zetan = g.z[am], g.z[bm]
            t = am - 1 if direction > 0 else am + 1
            s_row = si * (tab.tau[i, t] - tab.tau[i, am])
            T = tab.tau[j, bm] + sj * s_row
            c = tab.phi[i, am] - tab.phi[j, bm]
            p1 = np.zeros(R, dtype=int)
            p2 = np.zeros(R, dtype=int)
            wt = np.zeros(R)
            s_f = np.zeros(R)
            zf = np.zeros(R)
            zetaf = np.zeros(R)
            interior = np.zeros(R, dtype=bool)
            to_bottom = T < 0
            zeta_t = tab.tau_inv(j, np.maximum(T, 0.0))
            if i == j:
                zeta_t = np.minimum(zeta_t, g.z[t])
            to_diag = ~to_bottom & (zeta_t > g.z[t] + 1e-14)
            inner = ~to_bottom & ~to_diag
            ti = t[inner]
            col = zeta_t[inner] / h
            bl = np.minimum(np.floor(col).astype(int), np.maximum(ti - 1, 0))
            p1[inner] = ti * (N + 1) + bl
            p2[inner] = ti * (N + 1) + np.minimum(bl + 1, ti)
            wt[inner] = np.where(ti == 0, 0.0, np.clip(col - bl, 0.0, 1.0))
            s_f[inner] = s_row[inner]
            zf[inner] = g.z[ti]
            zetaf[inner] = zeta_t[inner]
            interior[inner] = True
            if np.any(to_bottom):
                ib = np.nonzero(to_bottom)[0]
                s_star = -sj * tab.tau[j, bm[ib]]
                ze = tab.tau_inv(i, tab.tau[i, am[ib]] + si * s_star)
                k, w_ = _interp_index(ze, h, N)
                p1[ib], p2[ib], wt[ib] = k * (N + 1), (k + 1) * (N + 1), w_
                s_f[ib] = s_star
                zf[ib] = ze
            if np.any(to_diag):
                idg = np.nonzero(to_diag)[0]
                x = _diag_cross(tab, i, j, c[idg])
                k, w_ = _interp_index(x, h, N)
                p1[idg], p2[idg], wt[idg] = k * (N + 2), (k + 1) * (N + 2), w_
                s_f[idg] = tab.phi_at(i, x) - tab.phi[i, am[idg]]
                zf[idg] = x
                zetaf[idg] = x
            # quadrature weights: trapezoid, split where a jump curve of K_ik is crossed
            lamj_n = prob.lam_nodes[j, bm]
            lamj_f = prob.lam_j(j, zetaf)
            lam_f = np.asarray(prob.lam(zetaf), dtype=float)
            A_f = np.asarray(prob.A(zetaf), dtype=float)
            bf = np.zeros((n, R))
            cn = np.zeros((n, R))
            cf = np.zeros((n, R))
            dpos, dk, dw = [], [], []
            for k in range(n):
                theta = np.full(R, 0.5)
                J = _jump_offset(prob, i, k)
                if J is not None:
                    gn = tab.phi[i, am] - tab.phi[k, bm] - J
                    gf = tab.phi_at(i, zf) - tab.phi_at(k, zetaf) - J
                    cross = gn * gf < 0
                    theta[cross] = np.abs(gn[cross]) / (np.abs(gn[cross]) + np.abs(gf[cross]))
                    # an end point on the curve carries the value of one side only;
                    # use the other end for the whole segment
                    on_n = np.abs(gn) < 1e-12
                    on_f = np.abs(gf) < 1e-12
                    theta[on_n & ~on_f] = 0.0
                    theta[on_f & ~on_n] = 1.0
                cn[k] = theta * lamj_n * prob.A_nodes[k, j, bm]
                cf[k] = (1 - theta) * lamj_f * A_f[k, j] / lam_f[k]
                val, dyn, zs = _entry(prob, i, k, zf, zetaf)
                bf[k] = val
                if np.any(dyn):
                    pos = np.nonzero(dyn)[0]
                    kk, ww = _interp_index(zs[pos], h, N)
                    dpos.append(k * R + pos)
                    dk.append(kk)
                    dw.append(ww)
            # entry values at the nodes themselves
            val, dyn, zs = _entry(prob, i, j, zn, zetan)
            qn = am * (N + 1) + bm
            self.Bn[e, qn] = val
            if np.any(dyn):
                kk, ww = _interp_index(zs[dyn], h, N)
                self.Bn_dyn.append((e, i * n + j, qn[dyn], kk, ww))
            cols["e"].append(np.full(R, e))
            cols["q"].append(qn)
            cols["a"].append(am)
            cols["p1"].append(p1)
            cols["p2"].append(p2)
            cols["wt"].append(wt)
            cols["interior"].append(interior)
            cols["s_f"].append(s_f)
            cols["ik"].append(i * n + np.arange(n)[:, None] + np.zeros((1, R), dtype=int))
            cols["bf"].append(bf)
            cols["cn"].append(cn)
            cols["cf"].append(cf)
            cols["dpos"].append(dpos)
            cols["dk"].append(dk)
            cols["dw"].append(dw)
        self.fixed_e = np.concatenate(fixed["e"])
        self.fixed_q = np.concatenate(fixed["q"])
        self.fixed_val = np.concatenate(fixed["val"])
        self.fixed_dyn_a = np.concatenate(fixed["dyn_a"])
        self._split_rows(cols, n)

    def _split_rows(self, cols, n):
        a_all = np.concatenate(cols["a"])
        e_all = np.concatenate(cols["e"])
        sizes = [x.size for x in cols["a"]]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        flat = {k: np.concatenate(cols[k]) for k in ("q", "p1", "p2", "wt", "interior", "s_f")}
        wide = {k: np.concatenate(cols[k], axis=1) for k in ("ik", "bf", "cn", "cf")}
        Rtot = a_all.size
        # bottom-coupled foot values as global (k, position) pairs
        dk_slot, dpos_g, dkk, dww = [], [], [], []
        for e in range(len(cols["a"])):
            R = sizes[e]
            for pos, kk, ww in zip(cols["dpos"][e], cols["dk"][e], cols["dw"][e]):
                dk_slot.append(pos // R)
                dpos_g.append(offs[e] + pos % R)
                dkk.append(kk)
                dww.append(ww)
        if dk_slot:
            dk_slot, dpos_g = np.concatenate(dk_slot), np.concatenate(dpos_g)
            dkk, dww = np.concatenate(dkk), np.concatenate(dww)
        else:
            dk_slot = dpos_g = dkk = np.zeros(0, dtype=int)
            dww = np.zeros(0)
        order = np.lexsort((np.arange(Rtot), a_all if self.direction > 0 else -a_all))
        inv = np.empty(Rtot, dtype=int)
        inv[order] = np.arange(Rtot)
        a_sorted = a_all[order]
        bounds = np.concatenate([[0], np.flatnonzero(np.diff(a_sorted)) + 1, [Rtot]])
        drow = np.searchsorted(bounds, inv[dpos_g], side="right") - 1 if dpos_g.size else dpos_g
        self.rows = []
        for r, (s, t) in enumerate(zip(bounds[:-1], bounds[1:])):
            sel = order[s:t]
            R = sel.size
            dm = drow == r
            dyn = (dk_slot[dm] * R + (inv[dpos_g[dm]] - s), dkk[dm], dww[dm])
            self.rows.append(_RowPlan(
                e=e_all[sel], own=self.gidx[e_all[sel]], q=flat["q"][sel], p1=flat["p1"][sel],
                p2=flat["p2"][sel], wt=flat["wt"][sel], interior=flat["interior"][sel],
                s_f=flat["s_f"][sel], ik=wide["ik"][:, sel], bf=wide["bf"][:, sel],
                cn=wide["cn"][:, sel], cf=wide["cf"][:, sel], dyn=dyn))

    def sweep(self, K_old, I_old, I, wb):
        """March the source integrals of all entries of the group, row by row.

        Sources come from the previous iterate (``K_old``, ``I_old``); the
        marched quantity of each entry is read from and written to ``I``.
        """
        for r in self.rows:
            Kn = K_old[r.ik, r.q]
            If = (1 - r.wt) * I_old[r.ik, r.p1] + r.wt * I_old[r.ik, r.p2]
            wf = r.bf + If
            pos, kk, ww = r.dyn
            if pos.size:
                ks, cs = np.divmod(pos, r.q.size)
                ikd = r.ik[ks, cs]
                wf[ks, cs] += (1 - ww) * wb[ikd, kk] + ww * wb[ikd, kk + 1]
            src = np.sum(r.cn * Kn + r.cf * wf, axis=0)
            own = np.where(r.interior, (1 - r.wt) * I[r.own, r.p1] + r.wt * I[r.own, r.p2], 0.0)
            I[r.own, r.q] = own - r.s_f * src


@dataclass
class KernelSolution:
    K: KernelField
    iterations: int
    change: float
    problem: KernelProblem
    parts: dict = field(default_factory=dict, repr=False)


def _bottom_w(prob, K_flat, N):
    """``K_ij(z, 0) lambda_j(0)`` implied by the coupled bottom condition; shape (n*n, N+1)."""
    n, p = prob.n, prob.p
    K0 = K_flat.reshape(n, n, N + 1, N + 1)[:, :, :, 0]  # (n, n, N+1)
    wb = -np.einsum("ika,k,kj->ija", K0[:, p:], prob.lam_nodes[p:, 0], prob.Q0)
    out = np.zeros((n, n, N + 1))
    out[:p, :p] = np.triu(np.ones((p, p)))[:, :, None] * wb[:p]
    return out.reshape(n * n, N + 1)


def solve_kernel(prob: KernelProblem, tol: float = 1e-10, max_iter: int = 200) -> KernelSolution:
    """Fixed-point solution of a kernel problem in controller form.

    Raises
    ------
    KernelConvergenceError
        If the sup-norm change stays above ``tol`` after ``max_iter`` sweeps
        or the iterates become non-finite.
    """
    g = prob.grid
    N, n = g.N, prob.n
    npts = (N + 1) ** 2
    groups = [_Group(prob, ents, -1 if k == 2 else +1)
              for k, ents in enumerate(_classify(prob.p, n)) if ents]
    lower = np.tril(np.ones((N + 1, N + 1), dtype=bool)).ravel()
    lamj = np.tile(prob.lam_nodes[:, None, :], (1, N + 1, 1)).reshape(n, npts)
    K = np.zeros((n * n, npts))
    I = np.zeros((n * n, npts))
    wb = np.zeros((n * n, N + 1))
    change = np.inf
    for it in range(1, max_iter + 1):
        K_old, I_old = K, I.copy()
        K = np.zeros_like(K_old)
        for gr in groups:
            if gr.entries and gr.entries[0][0] < prob.p and gr.entries[0][1] < prob.p and gr.direction > 0:
                wb = _bottom_w(prob, K, N)
            gr.sweep(K_old, I_old, I, wb)
            W = gr.Bn + I[gr.gidx]
            for e, ij in enumerate(gr.gidx):
                K[ij] = W[e] / lamj[ij % n]
            for e, ij, qn, kk, ww in gr.Bn_dyn:
                K[ij, qn] += ((1 - ww) * wb[ij, kk] + ww * wb[ij, kk + 1]) / lamj[ij % n, qn]
            fv = gr.fixed_val.copy()
            dm = gr.fixed_dyn_a >= 0
            if np.any(dm):
                ij = gr.gidx[gr.fixed_e[dm]]
                fv[dm] = wb[ij, gr.fixed_dyn_a[dm]] / prob.lam_nodes[ij % n, 0]
            K[gr.gidx[gr.fixed_e], gr.fixed_q] = fv
            I[gr.gidx[gr.fixed_e], gr.fixed_q] = 0.0
        K[:, ~lower] = 0.0
        if not np.all(np.isfinite(K)):
            raise KernelConvergenceError(f"kernel iteration diverged at sweep {it}")
        change = float(np.max(np.abs(K - K_old)))
        if change < tol:
            log.info("kernel converged in %d sweeps (change %.2e)", it, change)
            parts = {}
            for gr in groups:
                for e, (i, j) in enumerate(gr.entries):
                    parts[(i, j)] = I[i * n + j].reshape(N + 1, N + 1)
            return KernelSolution(KernelField(g, K.reshape(n, n, N + 1, N + 1)), it, change, prob, parts)
    raise KernelConvergenceError(
        f"kernel iteration did not converge in {max_iter} sweeps (last change {change:.3e})")


def solve_controller_kernel(spec: PlantSpec, params: DesignParams, grid: Grid | None = None) -> KernelField:
    """Solve the state-feedback kernel equations; returns ``K``."""
    prob = controller_problem(spec, params, grid)
    return solve_kernel(prob, params.tol, params.max_iter).K


# ---------------------------------------------------------------------------
# derived quantities and residuals


def boundary_matrix(K: KernelField, lam0, Q0, p):
    """``K(z, 0) Lambda(0) (E1 + E2 Q0)`` at all nodes; shape (N+1, n, p)."""
    n = K.shape[0]
    E = np.zeros((n, p))
    E[:p] = np.eye(p)
    E[p:] = Q0
    return np.einsum("aik,k,kj->aij", K.at_zeta0(), np.asarray(lam0, float), E)


def extract_A0(K: KernelField, spec: PlantSpec) -> SpatialMatrixFunction:
    """Target-system coefficient ``A0 = [A1; A2]`` with ``A1`` strictly lower triangular."""
    p = spec.p
    lam0 = spec.lam(np.array(0.0))
    M = boundary_matrix(K, lam0, spec.Q0, p)
    A0 = M.copy()
    A0[:, :p, :] = np.tril(M[:, :p, :], -1)
    return SpatialMatrixFunction(K.grid, A0)


def compute_G(K: KernelField, spec: PlantSpec) -> SpatialMatrixFunction:
    """``G(z) = K(z,0) Lambda(0) E2 C2 + C1(z) - int_0^z K(z,s) C1(s) ds``."""
    g = K.grid
    p, n = spec.p, spec.n
    lam0 = spec.lam(np.array(0.0))
    K0 = K.at_zeta0()
    G = np.einsum("aik,k,kj->aij", K0[:, :, p:], lam0[p:], spec.C2)
    C1 = np.moveaxis(spec.C1_at(g.z), -1, 0)  # (N+1, n, n_xi)
    if np.any(C1 != 0):
        G = G + C1 - _triangle_apply(K, C1)
    return SpatialMatrixFunction(g, G)


def _triangle_apply(K: KernelField, X):
    """``int_0^{z_a} K(z_a, s) X(s) ds`` by the trapezoid rule; X shape (N+1, n, q)."""
    from .volterra import trapezoid_weights

    W = trapezoid_weights(len(K.grid), K.grid.h)
    return np.einsum("ab,ijab,bjq->aiq", W, K.values, X)


def bc_residual(K: KernelField, lam0, Q0, p) -> float:
    """Max violation of the bottom condition on the upper triangle (corner excluded)."""
    M = boundary_matrix(K, lam0, Q0, p)[:, :p, :]
    mask = np.triu(np.ones((p, p), dtype=bool))
    vals = np.abs(M[:, mask])
    strict = np.triu(np.ones((p, p), dtype=bool), 1)[mask]
    vals[0, strict] = 0.0  # corner node carries the diagonal value
    return float(np.max(vals)) if vals.size else 0.0


def diagonal_residual(K: KernelField, lam_nodes, A_nodes) -> float:
    """Max of ``|K(z,z) Lambda - Lambda K(z,z) - A|`` off the matrix diagonal."""
    N = K.grid.N
    idx = np.arange(N + 1)
    Kd = K.values[:, :, idx, idx]  # (n, n, N+1)
    res = Kd * lam_nodes[None, :, :] - lam_nodes[:, None, :] * Kd - A_nodes
    n = Kd.shape[0]
    off = ~np.eye(n, dtype=bool)
    return float(np.max(np.abs(res[off])))


def artificial_residual(sol: KernelSolution) -> float:
    """Max deviation from the imposed artificial data at boundary nodes (corners excluded)."""
    prob, K = sol.problem, sol.K.values
    g, p, n = prob.grid, prob.p, prob.n
    z = g.z
    worst = 0.0
    for i in range(n):
        for j in range(n):
            if i < p and j < p and i > j:
                res = K[i, j, -1, :-1] - prob.art("l", i, j, z[:-1])
            elif i >= p and j >= p and i >= j:
                sl = slice(1, None) if i != j else slice(None)
                res = K[i, j, sl, 0] - prob.art("m", i, j, z[sl])
            elif i >= p and j >= p and i < j:
                res = K[i, j, -1, :-1] - prob.art("n", i, j, z[:-1])
            else:
                continue
            worst = max(worst, float(np.max(np.abs(res))))
    return worst


def _jump_distance(prob: KernelProblem, i, j):
    """Distance (in characteristic time) of each node from the jump curve of entry (i, j)."""
    tab, N, p = prob.table, prob.grid.N, prob.p
    phi_i = tab.phi[i][:, None]
    phi_j = tab.phi[j][None, :]
    c = phi_i - phi_j
    same = tab.sign[i] == tab.sign[j]
    if not same or i == j:
        return None
    if (i < p and i < j) or (i >= p and i > j):
        return np.abs(c)
    return np.abs(c - (tab.phi[i, N] - tab.phi[j, N]))


def pde_residual(sol: KernelSolution, band: float = 3.0, per_entry: bool = False):
    """Mean absolute interior residual by one-sided forward differences.

    Nodes whose stencil lies within ``band`` cells (measured along the
    characteristic time) of a jump curve are excluded.
    """
    prob = sol.problem
    K = sol.K.values
    g = prob.grid
    N, h, n = g.N, g.h, prob.n
    lam = prob.lam_nodes
    A = prob.A_nodes
    a, b = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    valid = b + 1 <= a
    a, b = a[valid], b[valid]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            Kij = K[i, j]
            dz = (Kij[a + 1, b] - Kij[a, b]) / h
            dzeta = (Kij[a, b + 1] * lam[j, b + 1] - Kij[a, b] * lam[j, b]) / h
            src = np.einsum("kx,kx->x", K[i, :, a, b].T, A[:, j, b])
            r = lam[i, a] * dz + dzeta - src
            dist = _jump_distance(prob, i, j)
            if dist is not None:
                thr = band * h * (1 / np.abs(lam[i]).min() + 1 / np.abs(lam[j]).min())
                keep = (dist[a, b] > thr) & (dist[a + 1, b] > thr) & (dist[a, b + 1] > thr)
                r = r[keep]
            out[i, j] = float(np.mean(np.abs(r))) if r.size else 0.0
    return out if per_entry else float(np.mean(out))
