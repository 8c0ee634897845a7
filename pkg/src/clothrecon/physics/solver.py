"""Jacobi-preconditioned conjugate gradient with a dof filter for pinned vertices."""
from __future__ import annotations

import numpy as np

from ..errors import NaNDetected, SolverDiverged


def pcg(matrix, b, tol=1e-9, max_iter=None, free=None):
    """Solve ``A x = b`` on the free dofs.

    ``free`` is a boolean/0-1 mask over dofs; filtered dofs stay at zero (this
    is CG on ``S A S`` restricted to the free subspace). Returns ``(x, iters,
    relative_residual)``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    s = np.ones(n) if free is None else np.asarray(free, dtype=np.float64)
    if max_iter is None:
        max_iter = 10 * n
    if not np.all(np.isfinite(b)):
        raise NaNDetected("non-finite right-hand side")
    b = b * s
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, 0, 0.0
    d = np.abs(matrix.diagonal())
    inv_d = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0) * s
    r = b.copy()
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for k in range(1, max_iter + 1):
        ap = s * (matrix @ p)
        pap = p @ ap
        if not np.isfinite(pap):
            raise NaNDetected("non-finite value inside the linear solve")
        if pap <= 0.0:
            raise SolverDiverged("system matrix is not positive definite along a search direction",
                                 residual=np.linalg.norm(r) / bnorm, iterations=k)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, k, res
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverDiverged(f"CG did not reach relative residual {tol:g} in {max_iter} iterations",
                         residual=res, iterations=max_iter)
