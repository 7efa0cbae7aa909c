"""Polytopic discrete-time control barrier functions and the supervisory QP.

The barrier of an invariant polytope {x | P x <= q}, q > 0, is
h(x) = min_k (q_k - P_k x)/q_k: one at the origin, zero on the boundary,
negative outside.  The supervisor solves the smallest input change that
keeps the one-step barrier condition h(x+) >= alpha h(x) for every vertex
of the unmeasured-disturbance box, returning the legacy input untouched
whenever it already complies.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .optim import Infeasible, LpProblem, QpProblem, solve_lp, solve_qp
from .polytope import Polytope
from .rci import DisturbanceSpec, LinearSubsystem


class SupervisionInfeasible(RuntimeError):
    """No admissible input satisfies the barrier rows: the state has left
    the certified region (contract breach)."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = rows or []


@dataclass
class BarrierFunction:
    """Barrier induced by an invariant polytope with the origin interior."""

    poly: Polytope
    alpha: float = 0.5

    def __post_init__(self):
        if np.any(self.poly.q <= 0):
            raise ValueError("barrier polytope must contain the origin strictly")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")

    def value(self, x) -> float:
        """h(x) = min_k (q_k - P_k x)/q_k; h(0) = 1 by construction."""
        x = np.asarray(x, dtype=float).ravel()
        return float(np.min((self.poly.q - self.poly.p @ x) / self.poly.q))


def _wu_vertices(w_u_max):
    w = np.asarray(w_u_max, dtype=float).ravel()
    if w.size == 0 or not np.any(w):
        return [np.zeros(w.size)]
    return [np.array(signs) * w for signs in itertools.product(*[(-1.0, 1.0)] * w.size)]


def supervise(barrier: BarrierFunction, sys: LinearSubsystem, x, w_measured,
              u0, u_set: Polytope, w_u_max=None):
    """Minimally invasive safe input at state x.

    Solves  min ||u - u0||^2  s.t. for every barrier row k and every vertex
    of the unmeasured box:  P_k (A x + B u + E w_m + w_u) <= q_k (1 - alpha
    h(x)),  u in u_set.  The rows are linear in u, so this is a convex QP.
    Returns u0 itself whenever u0 is feasible.
    """
    x = np.asarray(x, dtype=float).ravel()
    w_m = np.asarray(w_measured, dtype=float).ravel()
    u0 = np.asarray(u0, dtype=float).ravel()
    p_mat, q = barrier.poly.p, barrier.poly.q
    h_now = barrier.value(x)
    e_m = np.hstack([sys.e1, sys.e2])
    drift = sys.a @ x + e_m @ w_m

    wu_max = np.zeros(sys.nx) if w_u_max is None else np.asarray(w_u_max, dtype=float).ravel()
    wu_support = np.abs(p_mat) @ wu_max  # max over the box, per row

    # rows: (P_k B) u <= q_k - alpha q_k h(x) - P_k drift - wu support
    g_rows = p_mat @ sys.b
    g_rhs = q * (1.0 - barrier.alpha * h_now) - p_mat @ drift - wu_support
    a_ub = np.vstack([g_rows, u_set.p])
    b_ub = np.concatenate([g_rhs, u_set.q])

    if np.all(a_ub @ u0 <= b_ub + 1e-9):
        return u0.copy()

    qp = QpProblem(h=2.0 * np.eye(sys.nu), g=-2.0 * u0, a_ub=a_ub, b_ub=b_ub)
    try:
        sol = solve_qp(qp)
    except Infeasible:
        rows = _blocking_rows(a_ub, b_ub, len(g_rhs))
        raise SupervisionInfeasible(
            f"barrier rows {rows} admit no input in the input set "
            f"(h(x) = {h_now:.4g})", rows=rows)
    return sol.x


def _blocking_rows(a_ub, b_ub, n_barrier):
    """Barrier rows active at the least-violating admissible point."""
    n = a_ub.shape[1]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    rows = np.hstack([a_ub, np.vstack([-np.ones((n_barrier, 1)),
                                       np.zeros((a_ub.shape[0] - n_barrier, 1))])])
    sol = solve_lp(LpProblem(c=c, a_ub=rows, b_ub=b_ub))
    if sol.status != "optimal":
        return []
    resid = a_ub[:n_barrier] @ sol.x[:-1] - b_ub[:n_barrier]
    return [int(k) for k in np.flatnonzero(resid >= sol.x[-1] - 1e-7)]


def certify(barrier: BarrierFunction, x0_set: Polytope, danger_set: Polytope,
            sys: LinearSubsystem, dist: DisturbanceSpec, n_samples: int = 500,
            rng=None):
    """Check the three barrier conditions against a candidate region.

    (i) every allowed initial state has h >= 0 (x0_set inside the
    polytope); (ii) the polytope misses the danger set; (iii) the
    supervisory QP stays feasible on sampled states with h >= 0 under
    extreme disturbances.  Returns (ok, failed_condition_id).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if not x0_set.is_subset(barrier.poly, tol=1e-9):
        return False, "i"
    if barrier.poly.intersects(danger_set):
        return False, "ii"

    lo = np.array([-barrier.poly.support(-e) for e in np.eye(sys.nx)])
    hi = np.array([barrier.poly.support(e) for e in np.eye(sys.nx)])
    wm = dist.w_measured
    wm_extremes = []
    for _ in range(16):
        d = rng.standard_normal(wm.dim)
        sol = solve_lp(LpProblem(c=-d, a_ub=wm.p, b_ub=wm.q))
        if sol.status == "optimal":
            wm_extremes.append(sol.x)
    done = 0
    attempts = 0
    while done < n_samples and attempts < 50 * n_samples:
        attempts += 1
        x = lo + (hi - lo) * rng.random(sys.nx)
        if barrier.value(x) < 0:
            continue
        done += 1
        w_m = wm_extremes[int(rng.integers(len(wm_extremes)))]
        u0 = np.zeros(sys.nu)
        try:
            supervise(barrier, sys, x, w_m, u0, dist.u_set, dist.w_u_max)
        except SupervisionInfeasible:
            return False, "iii"
    return True, None
