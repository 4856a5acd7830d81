"""Volterra integral equations of the second kind.

Solves ``f(z) + int_0^z k(z, s) f(s) ds = g(z)`` on a uniform grid, where
``f`` and ``g`` may be vectors (or matrices, solved column by column) and
``k`` is square-matrix valued.  The primary solver is a Nystrom scheme with
trapezoid weights solved by forward substitution; :func:`picard_iterate`
provides an independent successive-approximation oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import Grid

__all__ = [
    "VolterraProblem",
    "VolterraError",
    "solve_volterra2",
    "picard_iterate",
    "trapezoid_weights",
    "volterra_residual",
]


class VolterraError(RuntimeError):
    """Singular discretisation or failed iteration."""


@dataclass
class VolterraProblem:
    """Kernel and right-hand side, either sampled or as callables.

    ``kernel`` is an array of shape ``(N+1, N+1)`` or ``(N+1, N+1, r, r)``
    indexed ``[z_index, s_index]`` (only ``s <= z`` is read) or a callable
    ``k(z, s)`` broadcasting over arrays.  ``rhs`` is an array of shape
    ``(N+1,)``, ``(N+1, r)`` or ``(N+1, r, q)`` or a callable ``g(z)``.
    """

    kernel: object
    rhs: object
    grid: Grid

    def sampled(self):
        z = self.grid.z
        k = self.kernel
        if callable(k):
            Z, S = np.meshgrid(z, z, indexing="ij")
            k = np.asarray(k(Z, S), dtype=float)
        g = self.rhs
        if callable(g):
            g = np.asarray(g(z), dtype=float)
        return _normalise(np.asarray(k, dtype=float), np.asarray(g, dtype=float), len(z))


def _normalise(k, g, npts):
    scalar = g.ndim == 1
    if k.shape[:2] != (npts, npts):
        raise ValueError(f"kernel must have leading shape ({npts}, {npts})")
    if k.ndim == 2:
        k = k[:, :, None, None]
    if g.shape[0] != npts:
        raise ValueError(f"rhs must have {npts} samples")
    vec = g.ndim <= 2
    if g.ndim == 1:
        g = g[:, None, None]
    elif g.ndim == 2:
        g = g[:, :, None]
    if k.shape[2] != g.shape[1] or k.shape[2] != k.shape[3]:
        raise ValueError("kernel and rhs dimensions disagree")
    return k, g, scalar, vec


def _restore(f, scalar, vec):
    if scalar:
        return f[:, 0, 0]
    if vec:
        return f[:, :, 0]
    return f


def trapezoid_weights(npts: int, h: float) -> np.ndarray:
    """Lower-triangular matrix ``W`` with ``int_0^{z_j} u ~ sum_l W[j, l] u_l``."""
    W = np.tril(np.full((npts, npts), h))
    W[:, 0] *= 0.5
    W[np.arange(npts), np.arange(npts)] = 0.5 * h
    W[0, 0] = 0.0
    return W


def solve_volterra2(prob, rhs=None, h=None, pivot_tol=1e-10):
    """Nystrom/trapezoid solution by forward substitution.

    Parameters
    ----------
    prob : VolterraProblem or ndarray
        Either a problem instance, or the sampled kernel (then ``rhs`` and
        ``h`` must be given).

    Returns
    -------
    ndarray
        Samples of ``f`` with the shape of the right-hand side.

    Raises
    ------
    VolterraError
        If ``det(I + h/2 k(z_j, z_j))`` is within ``pivot_tol`` of zero.
    """
    if isinstance(prob, VolterraProblem):
        k, g, scalar, vec = prob.sampled()
        h = prob.grid.h
    else:
        k, g, scalar, vec = _normalise(np.asarray(prob, dtype=float), np.asarray(rhs, dtype=float),
                                       np.asarray(rhs).shape[0])
    npts, r = k.shape[0], k.shape[2]
    f = np.empty_like(g)
    f[0] = g[0]
    eye = np.eye(r)
    w = np.full(npts, h)
    w[0] = 0.5 * h
    for j in range(1, npts):
        acc = g[j] - np.einsum("l,lab,lbc->ac", w[:j], k[j, :j], f[:j])
        piv = eye + 0.5 * h * k[j, j]
        if abs(np.linalg.det(piv)) < pivot_tol:
            raise VolterraError(f"singular Nystrom pivot at node {j} (z = {j * h:.6g})")
        f[j] = np.linalg.solve(piv, acc)
    return _restore(f, scalar, vec)


def volterra_residual(k, f, g, h) -> float:
    """Max-norm residual of the discretised equation for sampled data."""
    npts = np.asarray(g).shape[0]
    k3, g3, _, _ = _normalise(np.asarray(k, float), np.asarray(g, float), npts)
    f3 = _normalise(np.asarray(k, float), np.asarray(f, float), npts)[1]
    k = k3
    W = trapezoid_weights(npts, h)
    integ = np.einsum("jl,jlab,lbc->jac", W, k, f3)
    return float(np.max(np.abs(f3 + integ - g3)))


def picard_iterate(prob: VolterraProblem, max_iters: int = 500, tol: float = 1e-12):
    """Successive approximation ``f_{m+1} = g - int k f_m`` started from ``g``.

    Uses the same trapezoid quadrature as :func:`solve_volterra2`, so the
    two agree up to the iteration tolerance.

    Returns
    -------
    f : ndarray
    iters : int
        Number of iterations performed.
    """
    k, g, scalar, vec = prob.sampled()
    W = trapezoid_weights(k.shape[0], prob.grid.h)
    KW = k * W[:, :, None, None]
    f = g.copy()
    for it in range(1, max_iters + 1):
        f_new = g - np.einsum("jlab,lbc->jac", KW, f)
        change = float(np.max(np.abs(f_new - f)))
        f = f_new
        if change < tol:
            return _restore(f, scalar, vec), it
    raise VolterraError(f"Picard iteration did not converge in {max_iters} iterations (change {change:.3e})")
