"""Small plants used across the test modules."""

from pathlib import Path

import numpy as np

from hypcomp.model import DesignParams, PlantSpec

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
EXAMPLE = CONFIG_DIR / "example_4x3.toml"


def toy_spec(lams, p, A=None, F=((0.0,),), B=None, C2=None, Q0=None, Q1=None, C1=None):
    """Plant with the given speeds; unspecified matrices are zero."""
    n = len(lams)
    m = n - p
    F = np.atleast_2d(np.asarray(F, dtype=float))
    q = F.shape[0]
    if A is None:
        A = [["0"] * n for _ in range(n)]
    if C1 is None:
        C1 = [["0"] * q for _ in range(n)]
    return PlantSpec(
        n=n, p=p, n_xi=q, Lambda=list(lams), A=A, C1=C1,
        Q0=np.zeros((m, p)) if Q0 is None else Q0,
        Q1=np.zeros((p, m)) if Q1 is None else Q1,
        F=F,
        B=np.ones((q, p)) if B is None else B,
        C2=np.zeros((m, q)) if C2 is None else C2,
    )


def toy_params(ctrl=(-1.0,), obs=(-2.0,), N=40, **kw):
    return DesignParams(controller_poles=list(ctrl), observer_poles=list(obs), N=N, **kw)


def coupled_2x2(N=40):
    """Constant-speed 2x2 plant with constant off-diagonal coupling and a scalar ODE."""
    spec = toy_spec(["1.5", "-1"], 1, A=[["0", "0.8"], ["-0.5", "0"]], F=[[0.5]], B=[[1.0]],
                    C2=[[1.0]], Q0=[[0.5]], Q1=[[0.3]])
    return spec, toy_params(N=N)
