"""Verification of a stored design against a fresh recomputation.

The checks bundle the residual gates of the design pipeline, a consistency
test of every stored gain against the gain formulas evaluated with freshly
solved kernels (tampered files fail here), the assigned spectra of the
stored gains and a grid self-convergence test of the kernel residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel as km
from . import observer as ob
from .decoupling import compute_feedback_gains
from .design import GATES, DesignError, run_design, spectrum_error
from .export import DesignOutput
from .model import DesignParams, Grid, PlantSpec

__all__ = ["Check", "VerifyReport", "verify_design", "self_convergence", "MIN_N"]

#: Smallest admissible grid.  Self-convergence needs the half grid to satisfy it.
MIN_N = 16

#: Accepted N vs 2N ratio of first-order residuals.
RATIO_RANGE = (1.5, 2.5)


@dataclass
class Check:
    name: str
    status: str          # "pass", "fail" or "skipped"
    detail: str = ""

    def __str__(self):
        return f"{self.status.upper():7s} {self.name}" + (f": {self.detail}" if self.detail else "")


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    @property
    def failed(self) -> list:
        return [c for c in self.checks if c.status == "fail"]

    def add(self, name, passed: bool, detail: str = ""):
        self.checks.append(Check(name, "pass" if passed else "fail", detail))

    def __str__(self):
        lines = [str(c) for c in self.checks]
        lines.append("verification passed" if self.ok else
                     "verification failed: " + ", ".join(c.name for c in self.failed))
        return "\n".join(lines)


def _rel_diff(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        return float("inf")
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0


def self_convergence(spec: PlantSpec, params: DesignParams, N: int, fine=None):
    """Ratios ``residual(N/2) / residual(N)`` of the interior kernel residuals.

    ``fine`` optionally supplies the (controller, observer) residuals on the
    grid ``N`` when they are already known.

    Returns
    -------
    dict or None
        ``{"controller": ratio, "observer": ratio}``, or ``None`` when
        ``N // 2`` is below :data:`MIN_N`.
    """
    half = N // 2
    if half < MIN_N:
        return None
    out = {}
    res = {}
    if fine is not None:
        res[N] = tuple(fine)
    for M in (half, N):
        if M in res:
            continue
        g = Grid(M)
        ks = km.solve_kernel(km.controller_problem(spec, params, g), params.tol, params.max_iter)
        _, _, os_ = ob.solve_observer_kernel(spec, params, g)
        res[M] = (km.pde_residual(ks), km.pde_residual(os_))
    for k, name in enumerate(("controller", "observer")):
        fine = res[N][k]
        out[name] = res[half][k] / fine if fine > 0 else float("inf")
    return out


def verify_design(spec: PlantSpec, params: DesignParams, output: DesignOutput,
                  config_hash: str | None = None, convergence: bool = True,
                  gain_tol: float = 1e-9) -> VerifyReport:
    """Recompute the design on the stored grid and compare.

    Parameters
    ----------
    output
        Stored design to check.
    config_hash
        Hash of the configuration in use; compared with the stored one.
    convergence
        Run the grid self-convergence check (solves the kernels twice more).
    gain_tol
        Relative tolerance for stored versus recomputed gains.
    """
    rep = VerifyReport()
    N = output.N
    seed = int(output.provenance.get("seed", params.seed))
    if config_hash is not None and output.provenance.get("config_hash"):
        same = output.provenance["config_hash"] == config_hash
        rep.add("config hash", same, "" if same else "design was computed from a different configuration")
    try:
        design = run_design(spec, params, Grid(N), seed=seed)
    except DesignError as exc:
        rep.add(f"design gates ({exc.stage})", False, str(exc))
        return rep
    d = design.diagnostics
    rep.add("design gates", True, "all residual gates hold")
    for key in ("kernel_bc", "observer_bc", "hvolp", "recrelp1z", "kerntrafo", "gamma_bc1", "sigma_bc"):
        rep.add(f"residual {key}", d[key] <= GATES[key], f"{d[key]:.3e} (limit {GATES[key]:.0e})")
    rr = ob.recrel_residual(design.observer.R, design.observer.R_I)
    rep.add("residual recrel R", rr <= 1e-10, f"{rr:.3e} (limit 1e-10)")

    g = output.gains
    dec = design.decoupling
    K_xi, K_x = compute_feedback_gains(design.kernel.K, dec.P1row, dec.N_I, spec.p)
    e1 = _rel_diff(g["K_x"], K_x)
    e2 = _rel_diff(g["K_xi"], K_xi)
    rep.add("reciprocity (K_x)", e1 <= gain_tol, f"relative deviation {e1:.3e}")
    rep.add("reciprocity (K_xi)", e2 <= gain_tol, f"relative deviation {e2:.3e}")
    for key, ref in (("K", dec.K), ("L_xi", design.observer.L_xi), ("L", design.observer.L),
                     ("Gamma0", design.observer.C_obs)):
        e = _rel_diff(g[key], ref)
        rep.add(f"gain {key}", e <= gain_tol, f"relative deviation {e:.3e}")

    ec = spectrum_error(spec.F - spec.B @ g["K"], params.controller_poles)
    eo = spectrum_error(spec.F - g["L_xi"] @ g["Gamma0"], params.observer_poles)
    es = spectrum_error(design.closed_loop.matrix, list(params.controller_poles) + list(params.observer_poles))
    rep.add("controller spectrum", ec <= GATES["spectrum"], f"{ec:.3e}")
    rep.add("observer spectrum", eo <= GATES["spectrum"], f"{eo:.3e}")
    rep.add("separation spectrum", es <= GATES["spectrum"], f"{es:.3e}")

    if not convergence:
        rep.checks.append(Check("self-convergence", "skipped", "disabled"))
    else:
        ratios = self_convergence(spec, params, N, (d["kernel_pde"], d["observer_pde"]))
        if ratios is None:
            rep.checks.append(Check("self-convergence", "skipped",
                                    f"needs two resolutions with N/2 >= {MIN_N} (N = {N})"))
        else:
            lo, hi = RATIO_RANGE
            for name, r in ratios.items():
                rep.add(f"self-convergence ({name} kernel)", lo <= r <= hi,
                        f"N/2 vs N residual ratio {r:.3f} (expected [{lo}, {hi}])")
    return rep
