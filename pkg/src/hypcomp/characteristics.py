"""Characteristic time maps and fundamental matrices.

For each speed ``lambda_i`` the time map ``phi_i(z) = int_0^z 1/lambda_i``
is tabulated on the grid by the cumulative trapezoid rule and interpolated
linearly between nodes.  The unsigned map ``tau_i = |phi_i|`` is strictly
increasing for every ``i`` and is what the inverses are built on.
"""

from __future__ import annotations

import math

import numpy as np

from .expm import expm
from .model import Grid, PlantSpec

__all__ = ["CharTable", "phi", "phi_inverse", "sigma", "fundamental_matrix", "settling_times"]


class CharTable:
    """Tabulated time maps for all speeds of a plant.

    Parameters
    ----------
    lam : ndarray, shape (n, N+1)
        Signed speeds at the grid nodes.
    grid : Grid
    """

    def __init__(self, lam, grid: Grid):
        lam = np.asarray(lam, dtype=float)
        if lam.ndim != 2 or lam.shape[1] != len(grid):
            raise ValueError("speed samples must have shape (n, N+1)")
        if np.any(lam == 0) or not np.all(np.isfinite(lam)):
            raise ValueError("speeds must be finite and nonzero")
        self.grid = grid
        self.lam = lam
        self.n = lam.shape[0]
        self.sign = np.sign(lam[:, 0])
        inv = 1.0 / np.abs(lam)
        tau = np.zeros_like(lam)
        tau[:, 1:] = np.cumsum(0.5 * grid.h * (inv[:, 1:] + inv[:, :-1]), axis=1)
        self.tau = tau
        self.phi = self.sign[:, None] * tau

    @classmethod
    def from_spec(cls, spec: PlantSpec, grid: Grid) -> "CharTable":
        return cls(spec.lam(grid.z), grid)

    def _check(self, i):
        if not 0 <= i < self.n:
            raise IndexError(f"speed index {i} out of range 0..{self.n - 1}")

    def tau_at(self, i, z):
        self._check(i)
        return np.interp(z, self.grid.z, self.tau[i])

    def phi_at(self, i, z):
        return self.sign[i] * self.tau_at(i, z)

    def tau_inv(self, i, s):
        """Inverse of ``tau_i``: cell search by bisection, then a linear solve."""
        self._check(i)
        s = np.asarray(s, dtype=float)
        t = self.tau[i]
        k = np.clip(np.searchsorted(t, s, side="right") - 1, 0, self.grid.N - 1)
        t0 = t[k]
        dt = t[k + 1] - t0
        z = self.grid.z[k] + self.grid.h * (s - t0) / dt
        return np.clip(z, 0.0, 1.0)

    def lam_at(self, i, z):
        return np.interp(z, self.grid.z, self.lam[i])


def phi(table: CharTable, i: int, z):
    """Time map ``phi_i(z)`` (0-based ``i``)."""
    z = np.asarray(z, dtype=float)
    if np.any(z < -1e-12) or np.any(z > 1 + 1e-12):
        raise ValueError("z outside [0, 1]")
    out = table.phi_at(i, z)
    return float(out) if out.ndim == 0 else out


def phi_inverse(table: CharTable, i: int, s):
    """Inverse of ``phi_i`` for a positive speed ``i``; ``s`` in ``[0, phi_i(1)]``."""
    table._check(i)
    if table.sign[i] < 0:
        raise ValueError("phi_inverse is defined for positive speeds only")
    s = np.asarray(s, dtype=float)
    top = table.tau[i, -1]
    tol = 1e-12 * max(1.0, top)
    if np.any(s < -tol) or np.any(s > top + tol):
        raise ValueError(f"time {s} outside [0, {top}]")
    out = table.tau_inv(i, np.clip(s, 0.0, top))
    return float(out) if out.ndim == 0 else out


def sigma(table: CharTable, i: int, j: int, z, zeta):
    """Composite map ``phi_i^{-1}(phi_i(z) - phi_j(zeta))`` for ``i <= j``.

    Requires ``phi_j(zeta) <= phi_i(z)``; callers branch on that condition.
    """
    if not (0 <= i <= j) or table.sign[j] < 0:
        raise ValueError("sigma needs i <= j among the positive speeds")
    s = table.phi_at(i, z) - table.phi_at(j, zeta)
    if np.any(s < -1e-12):
        raise ValueError("phi_j(zeta) > phi_i(z): characteristic does not reach zeta = 0")
    return phi_inverse(table, i, np.maximum(s, 0.0))


def fundamental_matrix(M, table: CharTable, i: int, z, zeta):
    """``exp(M (phi_i(z) - phi_i(zeta)))``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return expm(M * (phi(table, i, z) - phi(table, i, zeta)))


def settling_times(spec: PlantSpec, grid: Grid | None = None):
    """Finite settling horizons ``(t_c, t_o)``; both are ``sum_{i<=p+1} |phi_i(1)|``."""
    grid = grid or Grid(200)
    inv = 1.0 / np.abs(spec.lam(grid.z)[: spec.p + 1])
    # compensated sums keep the trapezoid rule exact for constant speeds
    totals = [math.fsum(0.5 * (row[1:] + row[:-1])) / grid.N for row in inv]
    t = math.fsum(totals)
    return t, t
