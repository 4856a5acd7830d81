"""Time-domain simulation of plant, observer and output-feedback loop.

PDEs are advanced with first-order upwind differences and forward Euler,
the ODEs with the classical Runge-Kutta scheme at the same step (boundary
traces held fixed within a step).  The step is ``dt = CFL h / max|lambda|``,
shortened slightly so that the final time is hit exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Grid, PlantSpec, SimConfig

__all__ = [
    "Gains",
    "SimTrace",
    "SimulationError",
    "evaluate_feedback",
    "simulate_closed_loop",
    "simulate_error_system",
    "simulate_open_loop",
    "time_step",
    "write_trace_csv",
    "write_snapshots_csv",
    "plot_trace",
]

log = logging.getLogger(__name__)

BLOWUP = 1e12


class SimulationError(RuntimeError):
    """Simulation aborted; ``t_last`` is the last time with a finite state."""

    def __init__(self, message, t_last):
        super().__init__(message)
        self.t_last = t_last


def _resample(values, src: Grid, dst: Grid):
    """Linear interpolation of node samples (first axis) onto another grid."""
    values = np.asarray(values, dtype=float)
    if len(src) == len(dst):
        return values
    flat = values.reshape(len(src), -1)
    out = np.stack([np.interp(dst.z, src.z, flat[:, k]) for k in range(flat.shape[1])], axis=1)
    return out.reshape((len(dst),) + values.shape[1:])


@dataclass
class Gains:
    """Controller and observer gains sampled on one grid.

    ``K_x`` has shape (N+1, p, n), ``L`` shape (N+1, n, p).
    """

    grid: Grid
    K_xi: np.ndarray
    K_x: np.ndarray
    L_xi: np.ndarray | None = None
    L: np.ndarray | None = None

    def on(self, grid: Grid) -> "Gains":
        if grid == self.grid:
            return self
        return Gains(grid, self.K_xi, _resample(self.K_x, self.grid, grid), self.L_xi,
                     None if self.L is None else _resample(self.L, self.grid, grid))


def _weights(grid: Grid):
    w = np.full(len(grid), grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return w


def evaluate_feedback(xhat, xihat, gains: Gains, Q1) -> np.ndarray:
    """``u = -Q1 xhat_2(1) - K_xi xihat - int_0^1 K_x(z) xhat(z) dz`` (trapezoid).

    ``xhat`` has shape (n, N+1).
    """
    p = np.asarray(Q1).shape[0]
    xhat = np.asarray(xhat, dtype=float)
    w = _weights(gains.grid)
    integ = np.einsum("b,bij,jb->i", w, gains.K_x, xhat)
    return -np.asarray(Q1) @ xhat[p:, -1] - gains.K_xi @ np.asarray(xihat, float) - integ


def _solve_inflow(x, xi, gains: Gains, p):
    """Value of ``x_1(1)`` with ``x_1(1) = -K_xi xi - int K_x x`` where the
    integral includes the unknown end value itself."""
    w = _weights(gains.grid)
    KN = gains.K_x[-1]
    rest = np.einsum("b,bij,jb->i", w[:-1], gains.K_x[:-1], x[:, :-1]) + w[-1] * KN[:, p:] @ x[p:, -1]
    rhs = -gains.K_xi @ xi - rest
    return np.linalg.solve(np.eye(p) + w[-1] * KN[:, :p], rhs)


def time_step(spec: PlantSpec, grid: Grid, cfl: float, t_final: float):
    """Step size and number of steps for the given CFL number."""
    lam = spec.lam(grid.z)
    lmax = float(np.max(np.abs(lam)))
    dt = cfl * grid.h / lmax
    steps = max(1, int(math.ceil(t_final / dt - 1e-9)))
    return t_final / steps, steps


class _Transport:
    """Explicit upwind operator for ``x_t = Lambda x_z + A x`` on the grid."""

    def __init__(self, spec: PlantSpec, grid: Grid):
        self.p = spec.p
        self.h = grid.h
        self.lam = spec.lam(grid.z)  # (n, N+1)
        A = spec.A_at(grid.z)
        self.A = np.moveaxis(A, -1, 0)  # (N+1, n, n)
        self.has_A = bool(np.any(self.A != 0))
        C1 = spec.C1_at(grid.z)
        self.C1 = np.moveaxis(C1, -1, 0)  # (N+1, n, n_xi)
        self.has_C1 = bool(np.any(self.C1 != 0))

    def rate(self, x, xi):
        """Right-hand side without the boundary nodes' inflow conditions."""
        p, h = self.p, self.h
        r = np.zeros_like(x)
        # positive speeds: information moves toward z = 0, forward difference
        r[:p, :-1] = self.lam[:p, :-1] * (x[:p, 1:] - x[:p, :-1]) / h
        # negative speeds: backward difference
        r[p:, 1:] = self.lam[p:, 1:] * (x[p:, 1:] - x[p:, :-1]) / h
        if self.has_A:
            r += np.einsum("bij,jb->ib", self.A, x)
        if self.has_C1:
            r += np.einsum("biq,q->ib", self.C1, xi)
        return r


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class SimTrace:
    """Sampled simulation results (one row per stored step)."""

    t: np.ndarray                 # (T,)
    x: np.ndarray                 # (T, n, N+1)
    xi: np.ndarray                # (T, n_xi)
    xhat: np.ndarray | None = None
    xihat: np.ndarray | None = None
    u: np.ndarray | None = None   # (T, p)
    y: np.ndarray | None = None   # (T, p)
    grid: Grid | None = None
    dt: float = 0.0
    max_cfl: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def xi_norm(self):
        return np.linalg.norm(self.xi, axis=1)

    @property
    def x_sup(self):
        return np.max(np.abs(self.x), axis=(1, 2))

    @property
    def eps_xi(self):
        return None if self.xihat is None else self.xi - self.xihat

    @property
    def eps_xi_norm(self):
        e = self.eps_xi
        return None if e is None else np.linalg.norm(e, axis=1)

    @property
    def eps_x_sup(self):
        """``sup_z |eps_{x_i}(z, t)|`` per component; shape (T, n)."""
        if self.xhat is None:
            return None
        return np.max(np.abs(self.x - self.xhat), axis=2)

    def norms_table(self):
        """Columns for the trace CSV: name -> 1-D array."""
        cols = {"t": self.t}
        for k in range(self.xi.shape[1]):
            cols[f"xi{k + 1}"] = self.xi[:, k]
        if self.xihat is not None:
            for k in range(self.xihat.shape[1]):
                cols[f"xihat{k + 1}"] = self.xihat[:, k]
        if self.u is not None:
            for k in range(self.u.shape[1]):
                cols[f"u{k + 1}"] = self.u[:, k]
        if self.y is not None:
            for k in range(self.y.shape[1]):
                cols[f"y{k + 1}"] = self.y[:, k]
        cols["xi_norm"] = self.xi_norm
        cols["x_sup"] = self.x_sup
        if self.xhat is not None:
            cols["eps_xi_norm"] = self.eps_xi_norm
            es = self.eps_x_sup
            for k in range(es.shape[1]):
                cols[f"eps_x{k + 1}_sup"] = es[:, k]
        for name, v in self.extra.items():
            if np.ndim(v) == 1 and len(v) == len(self.t):
                cols[name] = v
        return cols


def _check(values, t):
    for v in values:
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP:
            raise SimulationError(f"state exceeded {BLOWUP:.0e} after t = {t:.6g}", t)


def simulate_closed_loop(spec: PlantSpec, gains: Gains, cfg: SimConfig, grid: Grid,
                         state_feedback: bool = False) -> SimTrace:
    """Plant in closed loop with the observer-based compensator.

    With ``state_feedback=True`` the observer is bypassed and the feedback
    acts on the true state.

    Per step: interior PDE update, RK4 for the ODEs with the boundary traces
    of the previous step, then the boundary values in the order
    ``x_2(0)``, observer ``xhat_2(0)``, control input with the observer
    inflow ``xhat_1(1)``, plant inflow ``x_1(1)``.
    """
    g = gains.on(grid)
    p = spec.p
    tr = _Transport(spec, grid)
    x, xi, xh, xih = cfg.initial_state(spec, grid)
    dt, steps = time_step(spec, grid, cfg.cfl, cfg.t_final)
    F, B, Q0, Q1, C2 = spec.F, spec.B, spec.Q0, spec.Q1, spec.C2
    L, L_xi = g.L, g.L_xi
    if not state_feedback and (L is None or L_xi is None):
        raise ValueError("observer gains required unless state_feedback=True")
    Qb = np.vstack([np.eye(p), Q0])

    def boundaries(x, xi, xh, xih):
        x[p:, 0] = Q0 @ x[:p, 0] + C2 @ xi
        if state_feedback:
            v = _solve_inflow(x, xi, g, p)
            u = v - Q1 @ x[p:, -1]
            x[:p, -1] = Q1 @ x[p:, -1] + u
            return u
        yv = x[:p, 0]
        xh[p:, 0] = Q0 @ yv + C2 @ xih
        v = _solve_inflow(xh, xih, g, p)
        xh[:p, -1] = v
        u = v - Q1 @ xh[p:, -1]
        x[:p, -1] = Q1 @ x[p:, -1] + u
        return u

    u = boundaries(x, xi, xh, xih)
    rec = _Recorder(cfg.decimation, steps)
    rec.add(0.0, x, xi, xh, xih, u, x[:p, 0])
    for k in range(1, steps + 1):
        y = x[:p, 0].copy()
        rx = tr.rate(x, xi)
        if not state_feedback:
            innov = y - xh[:p, 0]
            rh = tr.rate(xh, xih) + L.transpose(1, 0, 2) @ innov
            xih_new = _rk4(lambda s: F @ s + B @ y + L_xi @ innov, xih, dt)
            xh = xh + dt * rh
            xih = xih_new
        xi = _rk4(lambda s: F @ s + B @ y, xi, dt)
        x = x + dt * rx
        u = boundaries(x, xi, xh, xih)
        t = k * dt
        _check((x, xi) if state_feedback else (x, xi, xh, xih), t)
        rec.add(t, x, xi, xh, xih, u, x[:p, 0], last=k == steps)
    trace = rec.trace(state_feedback)
    trace.grid, trace.dt = grid, dt
    trace.max_cfl = dt * float(np.max(np.abs(tr.lam))) / grid.h
    return trace


def simulate_open_loop(spec: PlantSpec, cfg: SimConfig, grid: Grid, u=None) -> SimTrace:
    """Plant alone with a given input ``u(t)`` (default zero)."""
    p = spec.p
    tr = _Transport(spec, grid)
    x, xi, _, _ = cfg.initial_state(spec, grid)
    dt, steps = time_step(spec, grid, cfg.cfl, cfg.t_final)
    ufun = u if u is not None else (lambda t: np.zeros(p))

    def boundaries(x, xi, t):
        x[p:, 0] = spec.Q0 @ x[:p, 0] + spec.C2 @ xi
        uu = np.asarray(ufun(t), dtype=float)
        x[:p, -1] = spec.Q1 @ x[p:, -1] + uu
        return uu

    uu = boundaries(x, xi, 0.0)
    rec = _Recorder(cfg.decimation, steps)
    rec.add(0.0, x, xi, None, None, uu, x[:p, 0])
    for k in range(1, steps + 1):
        y = x[:p, 0].copy()
        rx = tr.rate(x, xi)
        xi = _rk4(lambda s: spec.F @ s + spec.B @ y, xi, dt)
        x = x + dt * rx
        t = k * dt
        uu = boundaries(x, xi, t)
        _check((x, xi), t)
        rec.add(t, x, xi, None, None, uu, x[:p, 0], last=k == steps)
    trace = rec.trace(True)
    trace.grid, trace.dt = grid, dt
    trace.max_cfl = dt * float(np.max(np.abs(tr.lam))) / grid.h
    return trace


def simulate_error_system(spec: PlantSpec, gains: Gains, cfg: SimConfig, grid: Grid,
                          eps0=None, eps_xi0=None) -> SimTrace:
    """Observer error dynamics without controller.

    ``eps_t = Lambda eps_z + A eps + C1 eps_xi - L eps_1(0)``,
    ``eps_2(0) = C2 eps_xi``, ``eps_1(1) = Q1 eps_2(1)``,
    ``eps_xi' = F eps_xi - L_xi eps_1(0)``.  The initial error defaults to
    ``x0 - xhat0`` and ``xi0 - xihat0`` from ``cfg``.  The trace stores the
    error in ``x`` and ``xi``.
    """
    g = gains.on(grid)
    p = spec.p
    tr = _Transport(spec, grid)
    x0, xi0, xh0, xih0 = cfg.initial_state(spec, grid)
    e = (x0 - xh0) if eps0 is None else np.array(eps0, dtype=float)
    ex = (xi0 - xih0) if eps_xi0 is None else np.array(eps_xi0, dtype=float)
    dt, steps = time_step(spec, grid, cfg.cfl, cfg.t_final)
    F, L, L_xi = spec.F, g.L, g.L_xi

    def boundaries(e, ex):
        e[p:, 0] = spec.C2 @ ex
        e[:p, -1] = spec.Q1 @ e[p:, -1]

    boundaries(e, ex)
    rec = _Recorder(cfg.decimation, steps)
    rec.add(0.0, e, ex, None, None, None, e[:p, 0])
    for k in range(1, steps + 1):
        y = e[:p, 0].copy()
        r = tr.rate(e, ex) - L.transpose(1, 0, 2) @ y
        ex = _rk4(lambda s: F @ s - L_xi @ y, ex, dt)
        e = e + dt * r
        boundaries(e, ex)
        t = k * dt
        _check((e, ex), t)
        rec.add(t, e, ex, None, None, None, e[:p, 0], last=k == steps)
    trace = rec.trace(True)
    trace.grid, trace.dt = grid, dt
    trace.max_cfl = dt * float(np.max(np.abs(tr.lam))) / grid.h
    return trace


class _Recorder:
    """Keeps every ``every``-th step and always the last one."""

    def __init__(self, every, steps):
        self.every = every
        self.count = 0
        self.rows = []

    def add(self, t, x, xi, xh, xih, u, y, last=False):
        keep = self.count % self.every == 0 or last
        self.count += 1
        if not keep:
            return
        self.rows.append((t, x.copy(), xi.copy(),
                          None if xh is None else xh.copy(),
                          None if xih is None else xih.copy(),
                          None if u is None else np.array(u, dtype=float),
                          np.array(y, dtype=float)))

    def trace(self, no_observer) -> SimTrace:
        cols = list(zip(*self.rows))
        t = np.array(cols[0])
        x = np.stack(cols[1])
        xi = np.stack(cols[2])
        xh = None if no_observer or cols[3][0] is None else np.stack(cols[3])
        xih = None if no_observer or cols[4][0] is None else np.stack(cols[4])
        u = None if cols[5][0] is None else np.stack(cols[5])
        y = np.stack(cols[6])
        return SimTrace(t, x, xi, xh, xih, u, y)


# ---------------------------------------------------------------------------
# export


def write_trace_csv(trace: SimTrace, path) -> None:
    """One row per stored step: time, lumped states, inputs, outputs and norms."""
    cols = trace.norms_table()
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for k in range(len(trace.t)):
            w.writerow([f"{float(cols[n][k]):.12e}" for n in names])


def write_snapshots_csv(trace: SimTrace, path, which: str = "x") -> None:
    """Long-format CSV ``t, z, component, value`` of a distributed state."""
    data = getattr(trace, which)
    if data is None:
        raise ValueError(f"trace has no {which}")
    z = trace.grid.z
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "component", "value"])
        for k, t in enumerate(trace.t):
            for i in range(data.shape[1]):
                for b in range(len(z)):
                    w.writerow([f"{t:.9e}", f"{z[b]:.9e}", i + 1, f"{data[k, i, b]:.12e}"])


def plot_trace(trace: SimTrace, out_dir) -> list:
    """Vector line plots of the norm series; needs matplotlib."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise RuntimeError("plotting needs matplotlib (install the 'plots' extra)") from exc
    out_dir = Path(out_dir)
    files = []
    series = [("xi_norm", trace.xi_norm, r"$\|\xi(t)\|_2$"), ("x_sup", trace.x_sup, r"$\sup_z |x(z,t)|$")]
    if trace.xhat is not None:
        series.append(("eps_xi_norm", trace.eps_xi_norm, r"$\|\varepsilon_\xi(t)\|_2$"))
    for name, v, label in series:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(trace.t, v)
        ax.set_xlabel("t")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        f = out_dir / f"{name}.svg"
        fig.savefig(f)
        plt.close(fig)
        files.append(f)
    return files
