"""Matrix exponential by Pade-13 scaling and squaring.

Follows Higham's 2005 algorithm (degree selection by 1-norm thresholds,
no backward error refinements).  Used inside quadratures over fundamental
matrices, where the error must stay far below the O(h) scheme error.
"""

from __future__ import annotations

import numpy as np

__all__ = ["expm", "expm_phi"]

_THETA = {3: 1.495585217958292e-2, 5: 2.539398330063230e-1, 7: 9.504178996162932e-1,
          9: 2.097847961257068e0, 13: 5.371920351148152e0}

_B = {
    3: (120.0, 60.0, 12.0, 1.0),
    5: (30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0),
    7: (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0),
    9: (17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0),
    13: (64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
         1187353796428800.0, 129060195264000.0, 10559470521600.0,
         670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
         960960.0, 16380.0, 182.0, 1.0),
}


def _pade(A, m):
    n = A.shape[0]
    ident = np.eye(n)
    b = _B[m]
    A2 = A @ A
    if m < 13:
        U = b[1] * ident
        V = b[0] * ident
        Ak = ident
        for k in range(1, m // 2 + 1):
            Ak = Ak @ A2
            U = U + b[2 * k + 1] * Ak
            V = V + b[2 * k] * Ak
        U = A @ U
    else:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
                 + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
        V = (A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
             + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident)
    return np.linalg.solve(V - U, V + U)


def expm(A) -> np.ndarray:
    """Exponential of a square real or complex matrix."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expm expects a square matrix")
    if A.dtype.kind not in "fc":
        A = A.astype(float)
    if A.shape[0] == 0:
        return np.zeros_like(A)
    norm1 = np.linalg.norm(A, 1)
    if not np.isfinite(norm1):
        raise ValueError("matrix has non-finite entries")
    for m in (3, 5, 7, 9):
        if norm1 <= _THETA[m]:
            return _pade(A, m)
    s = max(0, int(np.ceil(np.log2(norm1 / _THETA[13]))))
    X = _pade(A / 2.0 ** s, 13)
    for _ in range(s):
        X = X @ X
    return X


def expm_phi(M, tau):
    """Return ``(E, G1, G2)`` for the exponential integrator on one cell.

    ``E = exp(M tau)``, ``G1 = int_0^tau exp(M u) du`` and
    ``G2 = (1/tau) int_0^tau (tau - u) exp(M u) du``, computed from one
    exponential of the block matrix ``[[M, I, 0], [0, 0, I], [0, 0, 0]] tau``
    (Van Loan's construction).  ``tau`` may be negative; ``tau = 0`` gives
    ``(I, 0, 0)``.
    """
    M = np.asarray(M, dtype=float)
    k = M.shape[0]
    if tau == 0.0:
        return np.eye(k), np.zeros((k, k)), np.zeros((k, k))
    big = np.zeros((3 * k, 3 * k))
    big[:k, :k] = M
    big[:k, k:2 * k] = np.eye(k)
    big[k:2 * k, 2 * k:] = np.eye(k)
    X = expm(big * tau)
    return X[:k, :k], X[:k, k:2 * k], X[:k, 2 * k:] / tau
