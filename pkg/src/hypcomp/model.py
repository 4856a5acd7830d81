"""Plant data model, coefficient functions and structural validation.

The plant is a system of ``n`` transport equations on ``z in [0, 1]``

    dx/dt = Lambda(z) dx/dz + A(z) x + C1(z) xi
    x2(0) = Q0 x1(0) + C2 xi,   x1(1) = Q1 x2(1) + u
    dxi/dt = F xi + B x1(0),    y = x1(0)

where ``x1`` collects the first ``p`` components (positive speeds) and
``x2`` the remaining ``m`` components (negative speeds).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .expr import Expression, ExpressionError, parse

__all__ = [
    "Grid",
    "ScalarFunction",
    "SpatialMatrixFunction",
    "PlantSpec",
    "DesignParams",
    "SimConfig",
    "ValidationReport",
    "parse_expression",
    "validate_plant",
    "hautus_uncontrollable",
    "matrix_function",
]

_Z_TOL = 1e-12


class Grid:
    """Uniform grid ``z_k = k/N`` on [0, 1]."""

    def __init__(self, N: int):
        N = int(N)
        if N < 1:
            raise ValueError("grid needs at least one cell")
        self.N = N
        self.h = 1.0 / N
        self.z = np.linspace(0.0, 1.0, N + 1)

    def __len__(self):
        return self.N + 1

    def __eq__(self, other):
        return isinstance(other, Grid) and other.N == self.N

    def __hash__(self):
        return hash(self.N)

    def __repr__(self):
        return f"Grid(N={self.N})"


def _check_range(z):
    z = np.asarray(z, dtype=float)
    if np.any(z < -_Z_TOL) or np.any(z > 1.0 + _Z_TOL) or np.any(~np.isfinite(z)):
        raise ValueError("evaluation point outside [0, 1]")
    return np.clip(z, 0.0, 1.0)


class ScalarFunction:
    """A real function on [0, 1], backed by an expression or a sampled table.

    Tables hold values on a uniform grid over [0, 1] and are interpolated
    linearly.  Constants are a special case of expressions.
    """

    def __init__(self, expression: Expression | None = None, table=None):
        if (expression is None) == (table is None):
            raise ValueError("give exactly one of expression or table")
        self.expression = expression
        self.table = None if table is None else np.asarray(table, dtype=float).copy()
        if self.table is not None:
            if self.table.ndim != 1 or self.table.size < 2:
                raise ValueError("table must be a 1-d array with at least two samples")
            self._tz = np.linspace(0.0, 1.0, self.table.size)

    @classmethod
    def from_expression(cls, src: str) -> "ScalarFunction":
        return cls(expression=parse(src))

    @classmethod
    def constant(cls, value: float) -> "ScalarFunction":
        return cls(expression=parse(repr(float(value))))

    @classmethod
    def from_table(cls, values) -> "ScalarFunction":
        return cls(table=values)

    @classmethod
    def coerce(cls, obj) -> "ScalarFunction":
        """Build from a string expression, a number, a list of samples or an instance."""
        if isinstance(obj, ScalarFunction):
            return obj
        if isinstance(obj, str):
            return cls.from_expression(obj)
        if isinstance(obj, (int, float, np.integer, np.floating)):
            return cls.constant(float(obj))
        return cls.from_table(obj)

    def __call__(self, z):
        zc = _check_range(z)
        if self.expression is not None:
            return self.expression.evaluate(zc)
        out = np.interp(zc, self._tz, self.table)
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, grid: Grid) -> np.ndarray:
        return np.asarray(self(grid.z), dtype=float)

    def to_config(self):
        """Serialisable form (expression source or list of samples)."""
        if self.expression is not None:
            return self.expression.source
        return [float(v) for v in self.table]

    @property
    def is_zero(self) -> bool:
        if self.expression is not None:
            zz = np.linspace(0, 1, 33)
            return bool(np.all(self(zz) == 0.0))
        return bool(np.all(self.table == 0.0))

    def __repr__(self):
        if self.expression is not None:
            return f"ScalarFunction({self.expression.source!r})"
        return f"ScalarFunction(table[{self.table.size}])"


def parse_expression(src: str) -> ScalarFunction:
    """Parse an expression in ``z`` into a :class:`ScalarFunction`."""
    return ScalarFunction.from_expression(src)


def matrix_function(entries: Sequence[Sequence[ScalarFunction]]) -> Callable:
    """Return ``f(z) -> array (r, c, *z.shape)`` evaluating a matrix of functions."""
    rows = len(entries)
    cols = len(entries[0]) if rows else 0

    def f(z):
        z = np.asarray(z, dtype=float)
        out = np.empty((rows, cols) + z.shape)
        for i in range(rows):
            for j in range(cols):
                out[i, j] = entries[i][j](z)
        return out

    return f


class SpatialMatrixFunction:
    """Matrix-valued function sampled on grid nodes with linear interpolation.

    Parameters
    ----------
    grid : Grid
    values : ndarray, shape (N+1, rows, cols)
    """

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.shape[0] != len(grid):
            raise ValueError(f"expected {len(grid)} samples, got {values.shape[0]}")
        self.grid = grid
        self.values = values

    @property
    def shape(self):
        return self.values.shape[1:]

    def __call__(self, z):
        zc = _check_range(z)
        flat = self.values.reshape(len(self.grid), -1)
        zs = np.atleast_1d(zc)
        out = np.empty((zs.size, flat.shape[1]))
        for c in range(flat.shape[1]):
            out[:, c] = np.interp(zs, self.grid.z, flat[:, c])
        out = out.reshape((zs.size,) + self.shape)
        return out[0] if np.ndim(zc) == 0 else out

    def __getitem__(self, k):
        return self.values[k]


@dataclass
class PlantSpec:
    """Complete plant description.

    ``Lambda`` holds the ``n`` signed speeds, ``A`` the ``n x n`` coupling and
    ``C1`` the ``n x n_xi`` in-domain ODE coupling, all as functions of z.
    """

    n: int
    p: int
    n_xi: int
    Lambda: list
    A: list
    C1: list
    Q0: np.ndarray
    Q1: np.ndarray
    F: np.ndarray
    B: np.ndarray
    C2: np.ndarray

    def __post_init__(self):
        self.Lambda = [ScalarFunction.coerce(f) for f in self.Lambda]
        self.A = [[ScalarFunction.coerce(f) for f in row] for row in self.A]
        self.C1 = [[ScalarFunction.coerce(f) for f in row] for row in self.C1]
        self.Q0 = np.atleast_2d(np.asarray(self.Q0, dtype=float)).reshape(self.m, self.p)
        self.Q1 = np.atleast_2d(np.asarray(self.Q1, dtype=float)).reshape(self.p, self.m)
        self.F = np.asarray(self.F, dtype=float).reshape(self.n_xi, self.n_xi)
        self.B = np.asarray(self.B, dtype=float).reshape(self.n_xi, self.p)
        self.C2 = np.asarray(self.C2, dtype=float).reshape(self.m, self.n_xi)
        if len(self.Lambda) != self.n:
            raise ValueError(f"Lambda needs {self.n} entries, got {len(self.Lambda)}")
        if len(self.A) != self.n or any(len(r) != self.n for r in self.A):
            raise ValueError(f"A must be {self.n}x{self.n}")
        if len(self.C1) != self.n or any(len(r) != self.n_xi for r in self.C1):
            raise ValueError(f"C1 must be {self.n}x{self.n_xi}")

    @property
    def m(self) -> int:
        return self.n - self.p

    def lam(self, z) -> np.ndarray:
        """Speeds at ``z``; shape ``(n,) + z.shape``."""
        z = np.asarray(z, dtype=float)
        return np.stack([np.asarray(f(z), dtype=float) * np.ones(z.shape) for f in self.Lambda])

    def A_at(self, z) -> np.ndarray:
        return matrix_function(self.A)(z)

    def C1_at(self, z) -> np.ndarray:
        return matrix_function(self.C1)(z)


@dataclass
class DesignParams:
    """Design parameters for controller and observer.

    The artificial boundary data are mappings from 0-based index pairs
    ``(i, j)`` to :class:`ScalarFunction`; missing pairs default to zero.
    ``obs_l``, ``obs_m``, ``obs_n`` apply to the reflected observer problem.
    """

    controller_poles: Sequence[complex]
    observer_poles: Sequence[complex]
    N: int = 200
    tol: float = 1e-10
    max_iter: int = 200
    seed: int = 0
    l: Mapping = field(default_factory=dict)
    m: Mapping = field(default_factory=dict)
    n: Mapping = field(default_factory=dict)
    obs_l: Mapping = field(default_factory=dict)
    obs_m: Mapping = field(default_factory=dict)
    obs_n: Mapping = field(default_factory=dict)

    def __post_init__(self):
        self.controller_poles = [complex(v) for v in self.controller_poles]
        self.observer_poles = [complex(v) for v in self.observer_poles]
        for name in ("l", "m", "n", "obs_l", "obs_m", "obs_n"):
            d = getattr(self, name)
            setattr(self, name, {tuple(k): ScalarFunction.coerce(v) for k, v in dict(d).items()})

    def violations(self, n_xi: int | None = None) -> list[str]:
        out = []
        if self.N < 16:
            out.append(f"grid: N = {self.N} is below the minimum of 16")
        for label, poles in (("controller", self.controller_poles), ("observer", self.observer_poles)):
            if n_xi is not None and len(poles) != n_xi:
                out.append(f"{label} poles: expected {n_xi} values, got {len(poles)}")
            if any(p.real >= 0 for p in poles):
                out.append(f"{label} poles: all real parts must be negative")
            if not _conjugate_closed(poles):
                out.append(f"{label} poles: set is not closed under conjugation")
        return out


def _conjugate_closed(poles, tol=1e-9) -> bool:
    remaining = list(poles)
    while remaining:
        q = remaining.pop()
        if abs(q.imag) <= tol:
            continue
        match = [k for k, r in enumerate(remaining) if abs(r - q.conjugate()) <= tol]
        if not match:
            return False
        remaining.pop(match[0])
    return True


@dataclass
class SimConfig:
    """Simulation settings; initial profiles are functions of z."""

    cfl: float = 0.9
    t_final: float = 6.0
    x0: list | None = None
    xi0: Sequence[float] | None = None
    xhat0: list | None = None
    xihat0: Sequence[float] | None = None
    decimation: int = 10

    def __post_init__(self):
        if not (0.0 < self.cfl <= 1.0):
            raise ValueError("CFL number must lie in (0, 1]")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        if self.decimation < 1:
            raise ValueError("decimation must be at least 1")
        for name in ("x0", "xhat0"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, [ScalarFunction.coerce(f) for f in v])

    def initial_state(self, spec: PlantSpec, grid: Grid):
        """Sampled ``(x0, xi0, xhat0, xihat0)`` with zero defaults."""
        def prof(fs):
            if fs is None:
                return np.zeros((spec.n, len(grid)))
            if len(fs) != spec.n:
                raise ValueError(f"initial profile needs {spec.n} components")
            return np.stack([np.asarray(f(grid.z), dtype=float) * np.ones(len(grid)) for f in fs])

        def vec(v):
            if v is None:
                return np.zeros(spec.n_xi)
            v = np.asarray(v, dtype=float).ravel()
            if v.size != spec.n_xi:
                raise ValueError(f"initial ODE state needs {spec.n_xi} components")
            return v

        return prof(self.x0), vec(self.xi0), prof(self.xhat0), vec(self.xihat0)


@dataclass
class ValidationReport:
    """List of violated structural assumptions; empty means valid."""

    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "plant valid: all structural assumptions hold"
        return "\n".join(f"violation: {v}" for v in self.violations)


def hautus_uncontrollable(F, B, tol=1e-9):
    """Eigenvalues of ``F`` failing the rank test ``rank [mu I - F, B] = n``."""
    F = np.asarray(F, dtype=float)
    B = np.asarray(B, dtype=float)
    nx = F.shape[0]
    bad = []
    scale = max(1.0, np.linalg.norm(F), np.linalg.norm(B))
    for mu in np.linalg.eigvals(F):
        mat = np.hstack([mu * np.eye(nx) - F, B])
        sv = np.linalg.svd(mat, compute_uv=False)
        if sv[-1] <= tol * scale:
            bad.append(complex(mu))
    return bad


def validate_plant(spec: PlantSpec, grid: Grid) -> ValidationReport:
    """Check speed ordering, zero diagonal of ``A`` and stabilizability of (F, B)."""
    rep = ValidationReport()
    z = grid.z
    try:
        lam = spec.lam(z)
    except (ValueError, ExpressionError, FloatingPointError) as exc:
        rep.violations.append(f"speeds: evaluation failed ({exc})")
        return rep
    if not np.all(np.isfinite(lam)):
        bad = np.argwhere(~np.isfinite(lam))[0]
        rep.violations.append(f"speeds: non-finite value of lambda_{bad[0] + 1} at z = {z[bad[1]]:.6g}")
        return rep
    p = spec.p
    for i in range(spec.n):
        if i < p and np.any(lam[i] <= 0):
            rep.violations.append(f"speed ordering: lambda_{i + 1} must be positive on [0, 1]")
        if i >= p and np.any(lam[i] >= 0):
            rep.violations.append(f"speed ordering: lambda_{i + 1} must be negative on [0, 1]")
    for i in range(spec.n - 1):
        if i == p - 1:
            continue
        if np.any(lam[i] <= lam[i + 1]):
            k = int(np.argmax(lam[i] <= lam[i + 1]))
            rep.violations.append(
                f"speed ordering: lambda_{i + 1} > lambda_{i + 2} fails at z = {z[k]:.6g}"
            )
    for i in range(spec.n):
        for j in range(spec.n):
            try:
                vals = np.asarray(spec.A[i][j](z), dtype=float) * np.ones(z.shape)
            except (ValueError, ExpressionError) as exc:
                rep.violations.append(f"A[{i + 1},{j + 1}]: evaluation failed ({exc})")
                continue
            if not np.all(np.isfinite(vals)):
                k = int(np.argmax(~np.isfinite(vals)))
                rep.violations.append(f"A[{i + 1},{j + 1}]: non-finite value at z = {z[k]:.6g}")
            elif i == j and np.any(vals != 0.0):
                rep.violations.append(f"zero diagonal: A[{i + 1},{i + 1}] is not identically zero")
    for i in range(spec.n):
        for j in range(spec.n_xi):
            vals = np.asarray(spec.C1[i][j](z), dtype=float) * np.ones(z.shape)
            if not np.all(np.isfinite(vals)):
                rep.violations.append(f"C1[{i + 1},{j + 1}]: non-finite value on the grid")
    for name in ("Q0", "Q1", "F", "B", "C2"):
        if not np.all(np.isfinite(getattr(spec, name))):
            rep.violations.append(f"{name}: non-finite entries")
    if not rep.violations:
        bad = [mu for mu in hautus_uncontrollable(spec.F, spec.B) if mu.real >= 0]
        if bad:
            txt = ", ".join(f"{mu:.6g}" for mu in bad)
            rep.violations.append(f"stabilizability: (F, B) has uncontrollable unstable eigenvalues {txt}")
    return rep
