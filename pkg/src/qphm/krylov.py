"""Preconditioned BiCGStab with residual history capture.

Right preconditioning keeps the reported residual the true residual of the
original system.  Convergence norms can be restricted to the active index
set so that identity-pinned masked unknowns (which converge in step zero)
do not dilute the history.
"""

import time
from dataclasses import dataclass

import numpy as np

BREAKDOWN = 1e-30


@dataclass
class SolveReport:
    iterations: int
    relative_residuals: list
    converged: bool
    wall_time: float
    x: np.ndarray
    true_relres: float = float("nan")
    breakdown: bool = False
    restarts: int = 0

    def residuals_to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,relres\n")
            for k, r in enumerate(self.relative_residuals, start=1):
                fh.write(f"{k},{r:.9e}\n")


def _norm(x, active):
    if active is None:
        return float(np.linalg.norm(x))
    return float(np.linalg.norm(x[active]))


def bicgstab(op, rhs, M=None, tol=1e-6, max_iter=500, seed=0, active=None):
    """Solve op(x) = rhs from x0 = 0.

    op must provide matvec; M, if given, applies an approximate inverse.
    `active` restricts residual norms to those indices.  On near-breakdown
    (tiny rho or omega) the shadow residual is re-randomized once from the
    fixed seed; a second breakdown stops the run with the flag set.
    """
    b = np.asarray(rhs, dtype=complex)
    n = b.shape[0]
    act = None
    if active is not None:
        act = np.asarray(active)
        if act.dtype != bool:
            act = act.astype(bool)
    t0 = time.perf_counter()
    nb = _norm(b, act)
    if nb == 0.0:
        return SolveReport(0, [], True, time.perf_counter() - t0,
                           np.zeros(n, dtype=complex), true_relres=0.0)

    x = np.zeros(n, dtype=complex)
    r = b.copy()
    rhat = r.copy()
    rho_prev = alpha = omega = 1.0 + 0.0j
    v = np.zeros(n, dtype=complex)
    p = np.zeros(n, dtype=complex)
    history = []
    converged = False
    breakdown = False
    restarts = 0
    rng = np.random.default_rng(seed)

    def precond(z):
        return M.apply(z) if M is not None else z

    k = 0
    fresh = True
    while k < max_iter:
        k += 1
        rho = np.vdot(rhat, r)
        if abs(rho) < BREAKDOWN or abs(omega) < BREAKDOWN:
            if restarts == 0:
                restarts = 1
                rhat = rng.standard_normal(n) + 1j * rng.standard_normal(n)
                rho_prev = alpha = omega = 1.0 + 0.0j
                v[:] = 0
                fresh = True
                rho = np.vdot(rhat, r)
            else:
                breakdown = True
                k -= 1
                break
        if fresh:
            p = r.copy()
            fresh = False
        else:
            beta = (rho / rho_prev) * (alpha / omega)
            p = r + beta * (p - omega * v)
        ph = precond(p)
        v = op.matvec(ph)
        denom = np.vdot(rhat, v)
        if abs(denom) < BREAKDOWN:
            breakdown = True
            k -= 1
            break
        alpha = rho / denom
        s = r - alpha * v
        relres_s = _norm(s, act) / nb
        if relres_s <= tol:
            x = x + alpha * ph
            r = s
            history.append(relres_s)
            converged = True
            break
        sh = precond(s)
        t = op.matvec(sh)
        tt = np.vdot(t, t)
        if abs(tt) < BREAKDOWN:
            breakdown = True
            k -= 1
            break
        omega = np.vdot(t, s) / tt
        x = x + alpha * ph + omega * sh
        r = s - omega * t
        relres = _norm(r, act) / nb
        history.append(relres)
        rho_prev = rho
        if relres <= tol:
            converged = True
            break

    true_res = op.matvec(x) - b
    true_relres = _norm(true_res, act) / nb
    return SolveReport(
        iterations=k,
        relative_residuals=history,
        converged=converged,
        wall_time=time.perf_counter() - t0,
        x=x,
        true_relres=true_relres,
        breakdown=breakdown,
        restarts=restarts,
    )
