"""Levenberg-Marquardt for ``min |r(x)|^2`` with dense or sparse Jacobians.

Damping starts at ``tau * max(diag(J^T J))``, doubles on a rejected step
and shrinks to a third on an accepted one. Steps are accepted only when
they strictly lower the objective, so the accepted sequence is monotone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalFailure


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    accepted: int
    reason: str
    log: list = field(default_factory=list)


def _solve(J, r, mu):
    g = J.T @ r
    if sp.issparse(J):
        A = (J.T @ J + mu * sp.identity(J.shape[1], format="csr")).tocsc()
        h = spla.spsolve(A, -g)
    else:
        A = J.T @ J + mu * np.eye(J.shape[1])
        h = np.linalg.solve(A, -g)
    return h, g


def levenberg_marquardt(residual, x0, jacobian, max_iter=100, rtol=1e-6, tau=1e-3,
                        broyden=False, max_mu=1e20, xtol=0.0, callback=None):
    """Minimize ``|residual(x)|^2``.

    Parameters
    ----------
    residual : callable
        ``x -> r`` (1-D array). May return non-finite values for infeasible
        points; such steps are rejected.
    jacobian : callable
        ``(x, r) -> J``, dense ndarray or scipy sparse matrix.
    broyden : bool
        If set, the Jacobian is evaluated once and then kept current with
        rank-one secant updates after every trial step.
    rtol : float
        Stop once a trial step lowers the cost by less than this fraction;
        such a step is not taken, so a converged start is returned unchanged.
    xtol : float
        Stop once a rejected trial step is shorter than this (Euclidean norm).
    """
    x = np.asarray(x0, float).copy()
    r = np.asarray(residual(x), float)
    F = float(r @ r)
    if not np.isfinite(F):
        raise NumericalFailure("non-finite objective at the starting point")
    F0 = F
    log = [{"iter": 0, "cost": F, "accepted": True, "mu": None}]
    if F == 0.0:
        return LMResult(x, F, F0, 0, 0, "zero residual", log)
    J = jacobian(x, r)
    diag = J.multiply(J).sum(axis=0) if sp.issparse(J) else np.sum(J * J, axis=0)
    mu = tau * float(np.max(diag)) or tau
    accepted = 0
    reason = "max_iter"
    for it in range(1, max_iter + 1):
        h, g = _solve(J, r, mu)
        if not np.all(np.isfinite(h)):
            raise NumericalFailure("linear solve produced non-finite step")
        if np.linalg.norm(g, np.inf) == 0.0:
            reason = "zero gradient"
            break
        x_new = x + h
        r_new = np.asarray(residual(x_new), float)
        F_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        ok = F_new < F
        converged = ok and (F - F_new) / F < rtol
        ok = ok and not converged
        if broyden and np.all(np.isfinite(r_new)):
            hh = h @ h
            if hh > 0:
                u = (r_new - r - J @ h) / hh
                J = J + np.outer(u, h)
        log.append({"iter": it, "cost": F_new if ok else F, "trial": F_new, "accepted": bool(ok), "mu": mu})
        if callback is not None:
            callback(log[-1])
        if converged:
            reason = "converged"
            break
        if ok:
            x, r, F = x_new, r_new, F_new
            accepted += 1
            mu /= 3.0
            if F == 0.0:
                reason = "converged"
                break
            if not broyden:
                J = jacobian(x, r)
        else:
            mu *= 2.0
            if np.linalg.norm(h) < xtol:
                reason = "step below xtol"
                break
            if mu > max_mu:
                reason = "damping limit"
                break
    return LMResult(x, F, F0, it, accepted, reason, log)
