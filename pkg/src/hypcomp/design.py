"""End-to-end compensator design with residual gates.

:func:`run_design` chains the controller kernel, pole placement, the
decoupling quantities, the observer design and the closed-loop analysis.
Every stage records its residuals in a diagnostics mapping; a stage whose
gate fails raises :class:`DesignError` naming that stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernel as km
from . import observer as ob
from .analysis import ClosedLoopModel, Sigma_residuals, solve_Sigma
from .characteristics import settling_times
from .decoupling import (DecouplingSolution, PoleAssignmentError, decouple, hvolp_residuals,
                         place_poles, recrel_row_residual)
from .model import DesignParams, Grid, PlantSpec

__all__ = [
    "DesignError",
    "CompensatorGains",
    "Design",
    "GATES",
    "spectrum_error",
    "run_design",
]

log = logging.getLogger(__name__)

#: Tolerances applied by the design gates.
GATES = {
    "kernel_bc": 1e-8,
    "kernel_diagonal": 1e-8,
    "kernel_artificial": 1e-8,
    "spectrum": 1e-8,
    "ni_boundary": 1e-12,
    "hvolp": 1e-8,
    "recrelp1z": 1e-10,
    "observer_bc": 1e-8,
    "observer_diagonal": 1e-8,
    "kerntrafo": 1e-8,
    "gamma_bc0": 1e-12,
    "gamma_bc1": 1e-6,
    "sigma_bc": 1e-6,
}


class DesignError(RuntimeError):
    """A design stage failed its gate."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: failed ({message})")
        self.stage = stage


@dataclass
class CompensatorGains:
    """Gains of the output-feedback compensator on one grid."""

    grid: Grid
    K: np.ndarray        # (p, n_xi)
    K_xi: np.ndarray     # (p, n_xi)
    K_x: np.ndarray      # (N+1, p, n)
    L_xi: np.ndarray     # (n_xi, p)
    L: np.ndarray        # (N+1, n, p)
    Gamma0: np.ndarray   # E1^T Gamma(0), (p, n_xi)


@dataclass
class Design:
    """All intermediate objects of a design run."""

    spec: PlantSpec
    params: DesignParams
    grid: Grid
    kernel: km.KernelSolution
    decoupling: DecouplingSolution
    observer: ob.ObserverDesign
    closed_loop: ClosedLoopModel
    diagnostics: dict = field(default_factory=dict)

    @property
    def gains(self) -> CompensatorGains:
        o, d = self.observer, self.decoupling
        return CompensatorGains(self.grid, d.K, d.K_xi, d.K_x, o.L_xi, o.L, o.C_obs)


def spectrum_error(matrix, poles) -> float:
    """Largest distance between the eigenvalues of ``matrix`` and ``poles``
    after optimal matching."""
    from scipy.optimize import linear_sum_assignment

    ev = np.linalg.eigvals(np.asarray(matrix, dtype=float))
    target = np.asarray(poles, dtype=complex)
    if ev.size != target.size:
        return float("inf")
    cost = np.abs(ev[:, None] - target[None, :])
    r, c = linear_sum_assignment(cost)
    return float(np.max(cost[r, c])) if ev.size else 0.0


def _eig_list(matrix):
    ev = np.linalg.eigvals(np.asarray(matrix, dtype=float))
    ev = ev[np.lexsort((ev.imag, ev.real))]
    return [[float(v.real), float(v.imag)] for v in ev]


def _gate(diag: dict, stage: str, key: str, value: float, limit: float):
    diag[key] = float(value)
    if not value <= limit:
        raise DesignError(stage, f"{key} = {value:.3e} exceeds {limit:.1e}")


def run_design(spec: PlantSpec, params: DesignParams, grid: Grid | None = None,
               seed: int | None = None) -> Design:
    """Compute the complete compensator design.

    Parameters
    ----------
    spec, params
        Plant and design parameters.
    grid
        Spatial grid; defaults to ``Grid(params.N)``.
    seed
        Overrides ``params.seed`` for the pole-placement parameter matrices.

    Raises
    ------
    DesignError
        With ``stage`` set to one of ``kernel``, ``placement``,
        ``decoupling``, ``observer kernel``, ``observability``,
        ``observer placement`` or ``analysis``.
    """
    grid = grid or Grid(params.N)
    seed = params.seed if seed is None else seed
    p = spec.p
    diag: dict = {"N": grid.N, "seed": int(seed)}
    tc, to = settling_times(spec, grid)
    diag["t_c"], diag["t_o"] = float(tc), float(to)

    # controller kernel
    try:
        ksol = km.solve_kernel(km.controller_problem(spec, params, grid), params.tol, params.max_iter)
    except km.KernelConvergenceError as exc:
        raise DesignError("kernel", str(exc)) from exc
    K = ksol.K
    lam_nodes = spec.lam(grid.z)
    A_nodes = np.asarray(spec.A_at(grid.z), dtype=float)
    diag["kernel_iterations"] = ksol.iterations
    _gate(diag, "kernel", "kernel_bc", km.bc_residual(K, lam_nodes[:, 0], spec.Q0, p), GATES["kernel_bc"])
    _gate(diag, "kernel", "kernel_diagonal", km.diagonal_residual(K, lam_nodes, A_nodes),
          GATES["kernel_diagonal"])
    _gate(diag, "kernel", "kernel_artificial", km.artificial_residual(ksol), GATES["kernel_artificial"])
    diag["kernel_pde"] = km.pde_residual(ksol)

    # ODE gain
    try:
        Kg = place_poles(spec.F, spec.B, params.controller_poles, seed=seed)
    except PoleAssignmentError as exc:
        raise DesignError("placement", str(exc)) from exc
    diag["controller_eigenvalues"] = _eig_list(spec.F - spec.B @ Kg)
    _gate(diag, "placement", "controller_spectrum",
          spectrum_error(spec.F - spec.B @ Kg, params.controller_poles), GATES["spectrum"])

    # decoupling and state-feedback gains
    try:
        dec = decouple(spec, K, Kg)
    except Exception as exc:  # Volterra failures carry their location
        raise DesignError("decoupling", str(exc)) from exc
    nib = max(np.max(np.abs(dec.M1[0] + Kg)),
              np.max(np.abs(dec.M2[0] - (spec.C2 - spec.Q0 @ Kg))))
    _gate(diag, "decoupling", "ni_boundary", nib, GATES["ni_boundary"])
    A1 = km.extract_A0(K, spec).values[:, :p]
    hv = hvolp_residuals(spec, dec.P_I, dec.H1, dec.M1, A1)
    _gate(diag, "decoupling", "hvolp", max(hv.values(), default=0.0), GATES["hvolp"])
    _gate(diag, "decoupling", "recrelp1z", recrel_row_residual(dec.P1row, dec.P_I), GATES["recrelp1z"])

    # observer
    try:
        R_I, S, osol = ob.solve_observer_kernel(spec, params, grid)
    except km.KernelConvergenceError as exc:
        raise DesignError("observer kernel", str(exc)) from exc
    diag["observer_iterations"] = osol.iterations
    _gate(diag, "observer kernel", "observer_bc", ob.observer_bc_residual(R_I, S, spec),
          GATES["observer_bc"])
    _gate(diag, "observer kernel", "observer_diagonal", ob.observer_diagonal_residual(R_I, spec),
          GATES["observer_diagonal"])
    diag["observer_pde"] = km.pde_residual(osol)
    R = ob.compute_R(R_I)
    _gate(diag, "observer kernel", "kerntrafo", ob.kerntrafo_residual(R, R_I), GATES["kerntrafo"])
    Go = ob.compute_Go(R, spec)
    gsol = ob.solve_Gamma(spec, Go, S, grid)
    r0, r1 = ob.Gamma_residuals(spec, gsol.Gamma, S, grid)
    diag["gamma_cond"] = gsol.cond
    _gate(diag, "observer kernel", "gamma_bc0", r0, GATES["gamma_bc0"])
    _gate(diag, "observer kernel", "gamma_bc1", r1, GATES["gamma_bc1"])
    rep = ob.check_observability(gsol.Gamma[0, :p], spec.F, np.linalg.norm(gsol.Gamma[0]))
    diag["observability"] = {"observable": rep.observable, "method": rep.method,
                             "products": [float(v) for v in rep.products]}
    if not rep.observable:
        raise DesignError("observability", str(rep))
    try:
        L_xi, L = ob.compute_observer_gains(gsol.Gamma, R_I, spec, params.observer_poles, seed)
    except PoleAssignmentError as exc:
        raise DesignError("observer placement", str(exc)) from exc
    C = gsol.Gamma[0, :p]
    diag["observer_eigenvalues"] = _eig_list(spec.F - L_xi @ C)
    _gate(diag, "observer placement", "observer_spectrum",
          spectrum_error(spec.F - L_xi @ C, params.observer_poles), GATES["spectrum"])
    obs = ob.ObserverDesign(R_I, R, S, Go, gsol.Gamma, L_xi, L, rep, gsol.cond, osol)

    # closed loop
    cl = ClosedLoopModel.build(spec, dec, obs)
    ssol = solve_Sigma(spec, dec.H0, cl.Q1_tilde, spec.F - L_xi @ C, grid)
    s0, s1, sode = Sigma_residuals(spec, ssol, dec.H0, grid)
    diag["sigma_cond"] = cl.cond
    diag["sigma_ode"] = sode
    diag["sigma_max"] = float(np.max(np.abs(cl.Sigma)))
    _gate(diag, "analysis", "sigma_bc", max(s0, s1), GATES["sigma_bc"])
    poles = list(params.controller_poles) + list(params.observer_poles)
    diag["closed_loop_eigenvalues"] = _eig_list(cl.matrix)
    _gate(diag, "analysis", "separation_spectrum", spectrum_error(cl.matrix, poles), GATES["spectrum"])
    log.info("design complete on N = %d", grid.N)
    return Design(spec, params, grid, ksol, dec, obs, cl, diag)
