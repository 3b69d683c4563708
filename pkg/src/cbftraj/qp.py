"""Small dense strictly convex QPs by a dual active-set method.

Solves ``min 1/2 x'Gx + g'x  s.t.  C x >= d`` following Goldfarb and Idnani:
start at the unconstrained minimizer and add violated constraints one at a
time, dropping active constraints whose multipliers would turn negative.
The entering constraint is always the lowest-index violated one, so results
are deterministic.  Infeasibility is detected when a violated constraint
cannot be made active by any primal or dual step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["QpError", "QpResult", "solve_qp"]


class QpError(RuntimeError):
    """Active-set iteration limit exceeded or singular data."""

    def __init__(self, message: str, fallback: np.ndarray):
        super().__init__(message)
        self.fallback = fallback


@dataclass
class QpResult:
    x: np.ndarray
    feasible: bool
    active: list
    multipliers: np.ndarray
    iterations: int


def _violation_tol(C, d, x):
    return 1e-11 * (1.0 + np.abs(d) + np.linalg.norm(C, axis=1) * np.linalg.norm(x))


def solve_qp(G, g, C, d, max_iter: int | None = None) -> QpResult:
    G = np.asarray(G, dtype=float)
    g = np.asarray(g, dtype=float)
    C = np.asarray(C, dtype=float).reshape(-1, g.shape[0])
    d = np.asarray(d, dtype=float).reshape(-1)
    n, m = g.shape[0], C.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + m) + 20
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise QpError("Hessian is not positive definite", np.zeros(n)) from None
    Linv = np.linalg.solve(L, np.eye(n))
    Ginv = Linv.T @ Linv

    x = -Ginv @ g
    active: list[int] = []
    u = np.zeros(0)
    iterations = 0

    while True:
        s = C @ x - d
        violated = np.flatnonzero(s < -_violation_tol(C, d, x))
        violated = [i for i in violated if i not in active]
        if not violated:
            mult = np.zeros(m)
            mult[active] = u
            return QpResult(x, True, sorted(active), mult, iterations)
        p = int(violated[0])
        n_p = C[p]
        u_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                raise QpError("active-set iteration limit exceeded", np.zeros(n))
            if active:
                N = C[active].T
                GN = Ginv @ N
                M = N.T @ GN
                try:
                    r = np.linalg.solve(M, GN.T @ n_p)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, GN.T @ n_p, rcond=None)[0]
                z = Ginv @ n_p - GN @ r
            else:
                r = np.zeros(0)
                z = Ginv @ n_p
            # Dual (partial) step: first active multiplier to hit zero.
            t1, k = np.inf, -1
            for j in range(len(active)):
                if r[j] > 1e-14:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            # Primal (full) step: make constraint p active.
            zn = z @ n_p
            s_p = n_p @ x - d[p]
            # z vanishes when n_p lies in the span of the active normals.
            dependent = len(active) >= n or zn <= 1e-10 * (n_p @ Ginv @ n_p)
            t2 = np.inf if dependent else -s_p / zn
            if np.isinf(t1) and np.isinf(t2):
                mult = np.zeros(m)
                mult[active] = u
                return QpResult(x, False, sorted(active), mult, iterations)
            if np.isinf(t2):
                u = u - t1 * r
                u_p += t1
                active.pop(k)
                u = np.delete(u, k)
                continue
            t = min(t1, t2)
            x = x + t * z
            u = u - t * r
            u_p += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, u_p)
                break
            active.pop(k)
            u = np.delete(u, k)
