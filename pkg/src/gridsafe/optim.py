"""Dense LP and convex-QP solvers.

Small, self-contained solvers tuned for the problem sizes that show up in
invariant-set synthesis and barrier-function supervision: tens to a few
hundred variables, dense data, exactness preferred over speed.

LP: two-phase revised simplex on bounded variables with Bland's
anti-cycling rule. QP: primal active-set with a small diagonal
regularization so the KKT systems stay factorizable for PSD Hessians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


FEAS_TOL = 1e-9       # bound/row feasibility
OPT_TOL = 1e-9        # reduced-cost / multiplier threshold
PIVOT_TOL = 1e-11     # zero-pivot threshold


class DimensionMismatch(ValueError):
    """Problem data with inconsistent shapes."""


class Degenerate(RuntimeError):
    """Cycling guard tripped; should be unreachable under Bland's rule."""


class Infeasible(RuntimeError):
    """QP constraint set is empty; carries a Farkas certificate when available."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class NotPsd(ValueError):
    """Quadratic term failed the Cholesky-with-tolerance PSD check."""


def _as_matrix(a, ncols):
    if a is None:
        return np.zeros((0, ncols))
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != ncols:
        raise DimensionMismatch(f"expected an (m, {ncols}) matrix, got {None if a is None else a.shape}")
    return a


def _as_vector(b, n, name):
    if b is None:
        return np.zeros(0)
    b = np.asarray(b, dtype=float).ravel()
    if b.shape[0] != n:
        raise DimensionMismatch(f"{name} has length {b.shape[0]}, expected {n}")
    return b


@dataclass
class LpProblem:
    """min c'x  s.t.  a_ub x <= b_ub,  a_eq x == b_eq,  lb <= x <= ub."""

    c: np.ndarray
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.shape[0]
        self.a_ub = _as_matrix(self.a_ub, n)
        self.b_ub = _as_vector(self.b_ub, self.a_ub.shape[0], "b_ub")
        self.a_eq = _as_matrix(self.a_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.a_eq.shape[0], "b_eq")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.lb.shape[0] != n or self.ub.shape[0] != n:
            raise DimensionMismatch("bound vectors must match the variable count")
        if not (np.all(np.isfinite(self.b_ub)) and np.all(np.isfinite(self.b_eq))):
            raise DimensionMismatch("rhs vectors must be finite")
        if np.any(self.lb > self.ub):
            raise DimensionMismatch("lb > ub for some variable")

    @property
    def n(self):
        return self.c.shape[0]


@dataclass
class QpProblem:
    """min (1/2) x'h x + g'x  s.t.  a_ub x <= b_ub,  a_eq x == b_eq.

    h must be symmetric (within 1e-10) positive semidefinite.
    """

    h: np.ndarray
    g: np.ndarray
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.shape[0]
        if self.h.shape != (n, n):
            raise DimensionMismatch(f"h has shape {self.h.shape}, expected ({n}, {n})")
        if np.max(np.abs(self.h - self.h.T), initial=0.0) > 1e-10:
            raise DimensionMismatch("quadratic term is not symmetric within 1e-10")
        self.a_ub = _as_matrix(self.a_ub, n)
        self.b_ub = _as_vector(self.b_ub, self.a_ub.shape[0], "b_ub")
        self.a_eq = _as_matrix(self.a_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.a_eq.shape[0], "b_eq")

    @property
    def n(self):
        return self.g.shape[0]


@dataclass
class Solution:
    """Solver outcome.

    status is one of 'optimal', 'infeasible', 'unbounded'.  duals holds one
    multiplier vector per constraint block ('ineq', 'eq', 'lower', 'upper')
    in the convention  c + a_ub' ineq + a_eq' eq - lower + upper = 0  with
    ineq, lower, upper >= 0.  certificate carries a Farkas vector pair on
    infeasibility or a ray on unboundedness.
    """

    status: str
    x: np.ndarray | None = None
    value: float = np.nan
    duals: dict = field(default_factory=dict)
    certificate: dict = field(default_factory=dict)
    iterations: int = 0


# ---------------------------------------------------------------------------
# LP core: revised simplex on  min c'z  s.t.  A z = b,  0 <= z <= u.
# ---------------------------------------------------------------------------

_AT_LOWER = 0
_AT_UPPER = 1


class _Unbounded(Exception):
    def __init__(self, j, sigma, w, basis):
        self.j = j
        self.sigma = sigma
        self.w = w
        self.basis = basis


class _Simplex:
    """Bounded-variable revised simplex core (shared by phase 1 and 2)."""

    def __init__(self, a, b, upper):
        self.a = a
        self.b = b
        self.upper = upper
        self.m, self.n = a.shape
        self.basis: list[int] = []
        self.status = np.full(self.n, _AT_LOWER, dtype=int)
        self.iterations = 0

    def _nonbasic_upper_mask(self):
        mask = self.status == _AT_UPPER
        mask[self.basis] = False
        return mask

    def _basic_values(self, lu):
        rhs = self.b.copy()
        mask = self._nonbasic_upper_mask()
        if np.any(mask):
            rhs = rhs - self.a[:, mask] @ self.upper[mask]
        return scipy.linalg.lu_solve(lu, rhs, check_finite=False)

    def run(self, cost, max_iter, n_enterable=None):
        """Iterate to optimality; returns (duals y, reduced costs, x_basic).

        Columns with index >= n_enterable may never enter the basis (used
        to lock phase-1 artificials out of phase 2).  Raises _Unbounded
        with ray data, or Degenerate on the iteration cap.
        """
        a, upper = self.a, self.upper
        if n_enterable is None:
            n_enterable = self.n
        while True:
            if self.iterations > max_iter:
                raise Degenerate("simplex iteration cap exceeded")
            self.iterations += 1

            bmat = a[:, self.basis]
            lu = scipy.linalg.lu_factor(bmat, check_finite=False)
            xb = self._basic_values(lu)
            y = scipy.linalg.lu_solve(lu, cost[self.basis], trans=1, check_finite=False)
            d = cost - a.T @ y

            in_basis = np.zeros(self.n, dtype=bool)
            in_basis[self.basis] = True
            enterable = ~in_basis
            enterable[n_enterable:] = False
            at_low = enterable & (self.status == _AT_LOWER)
            at_up = enterable & (self.status == _AT_UPPER)
            candidates = np.flatnonzero((at_low & (d < -OPT_TOL)) | (at_up & (d > OPT_TOL)))
            if candidates.size == 0:
                return y, d, xb

            j = int(candidates[0])  # Bland: smallest eligible index enters
            sigma = 1.0 if self.status[j] == _AT_LOWER else -1.0
            w = scipy.linalg.lu_solve(lu, a[:, j], check_finite=False)
            delta = sigma * w

            # Ratio test, pass 1: the largest step each basic variable and
            # the entering variable's own opposite bound allow.
            t_max = upper[j] if np.isfinite(upper[j]) else np.inf
            basic_upper = upper[self.basis]
            ratios = np.full(self.m, np.inf)
            targets = np.full(self.m, _AT_LOWER, dtype=int)
            dec = delta > PIVOT_TOL
            inc = (delta < -PIVOT_TOL) & np.isfinite(basic_upper)
            np.divide(np.maximum(xb, 0.0), delta, out=ratios, where=dec)
            np.divide(np.maximum(basic_upper - xb, 0.0), -delta, out=ratios, where=inc)
            targets[inc] = _AT_UPPER
            t_star = min(t_max, ratios.min(initial=np.inf))

            if np.isinf(t_star):
                raise _Unbounded(j, sigma, w, list(self.basis))

            # Pass 2 (Bland): among blockers within tolerance of t_star the
            # basic variable with the smallest column index leaves; a bound
            # flip of the entering variable is preferred only if strictly
            # the unique blocker.
            tied = np.flatnonzero(ratios <= t_star + FEAS_TOL)
            if tied.size == 0:
                self.status[j] = _AT_UPPER if sigma > 0 else _AT_LOWER  # bound flip
                continue
            basis_arr = np.asarray(self.basis)
            leave_row = int(tied[np.argmin(basis_arr[tied])])
            if t_max < ratios[leave_row] - FEAS_TOL:
                self.status[j] = _AT_UPPER if sigma > 0 else _AT_LOWER
                continue
            leaving = self.basis[leave_row]
            self.basis[leave_row] = j
            self.status[leaving] = targets[leave_row]
            self.status[j] = _AT_LOWER  # ignored while basic

    def solution_vector(self):
        bmat = self.a[:, self.basis]
        lu = scipy.linalg.lu_factor(bmat)
        xb = self._basic_values(lu)
        z = np.where(self._nonbasic_upper_mask(), np.where(np.isfinite(self.upper), self.upper, 0.0), 0.0)
        z[self.basis] = xb
        return z


def _solve_box_only(problem: LpProblem) -> Solution:
    """No constraint rows: each variable sits at whichever bound pays."""
    n = problem.n
    x = np.zeros(n)
    for j in range(n):
        if problem.c[j] > 0:
            if not np.isfinite(problem.lb[j]):
                return Solution(status="unbounded", certificate={"ray": -np.eye(n)[j]})
            x[j] = problem.lb[j]
        elif problem.c[j] < 0:
            if not np.isfinite(problem.ub[j]):
                return Solution(status="unbounded", certificate={"ray": np.eye(n)[j]})
            x[j] = problem.ub[j]
        else:
            x[j] = np.clip(0.0, problem.lb[j], problem.ub[j])
    d = problem.c
    duals = {"ineq": np.zeros(0), "eq": np.zeros(0),
             "lower": np.maximum(d, 0.0), "upper": np.maximum(-d, 0.0)}
    return Solution(status="optimal", x=x, value=float(problem.c @ x), duals=duals)


def solve_lp(problem: LpProblem, max_iter: int | None = None) -> Solution:
    """Solve a dense LP; infeasible/unbounded outcomes are reported in the
    returned status, never raised.

    Optimal solutions satisfy primal feasibility and complementary
    slackness within 1e-8; infeasible instances carry a Farkas
    certificate, unbounded ones a descent ray.
    """
    n = problem.n
    n_eq, n_ub = problem.a_eq.shape[0], problem.a_ub.shape[0]
    m = n_eq + n_ub
    if m == 0:
        return _solve_box_only(problem)

    # Columns: one or two per original variable (shift / mirror / split),
    # then one slack per inequality row.
    cols = []      # (orig_index, sign) pairs; sign maps z movement back to x
    col_a = []
    col_c = []
    col_u = []
    shift_x = np.zeros(n)
    a_full = np.vstack([problem.a_eq, problem.a_ub])
    b_full = np.concatenate([problem.b_eq, problem.b_ub])

    for j in range(n):
        lo, hi = problem.lb[j], problem.ub[j]
        if np.isfinite(lo):
            shift_x[j] = lo
            cols.append((j, +1.0))
            col_a.append(a_full[:, j])
            col_c.append(problem.c[j])
            col_u.append(hi - lo)
        elif np.isfinite(hi):
            shift_x[j] = hi
            cols.append((j, -1.0))
            col_a.append(-a_full[:, j])
            col_c.append(-problem.c[j])
            col_u.append(np.inf)
        else:
            cols.append((j, +1.0))
            col_a.append(a_full[:, j])
            col_c.append(problem.c[j])
            col_u.append(np.inf)
            cols.append((j, -1.0))
            col_a.append(-a_full[:, j])
            col_c.append(-problem.c[j])
            col_u.append(np.inf)
    for i in range(n_ub):
        cols.append((-1, 0.0))  # slack
        e = np.zeros(m)
        e[n_eq + i] = 1.0
        col_a.append(e)
        col_c.append(0.0)
        col_u.append(np.inf)

    a_std = np.column_stack(col_a)
    c_std = np.array(col_c)
    u_std = np.array(col_u)
    b_std = b_full - a_full @ shift_x
    n_std = a_std.shape[1]

    if max_iter is None:
        max_iter = 50 * (m + n_std) + 500

    # Phase 1: artificial variables form the starting basis.
    art_sign = np.where(b_std >= 0, 1.0, -1.0)
    a_ph1 = np.hstack([a_std, np.diag(art_sign)])
    c_ph1 = np.concatenate([np.zeros(n_std), np.ones(m)])
    u_ph1 = np.concatenate([u_std, np.full(m, np.inf)])
    sx = _Simplex(a_ph1, b_std, u_ph1)
    sx.basis = list(range(n_std, n_std + m))

    try:
        y1, _, xb1 = sx.run(c_ph1, max_iter)
    except _Unbounded:  # pragma: no cover - phase-1 objective is bounded below
        raise Degenerate("phase 1 reported unbounded")

    art_rows = np.asarray(sx.basis) >= n_std
    ph1_val = float(np.sum(np.clip(xb1, 0.0, None)[art_rows]))
    if ph1_val > 1e-7 * max(1.0, np.abs(b_std).max(initial=0.0)):
        # y1'b > max over the box of y1'Az for all feasible z: certificate.
        return Solution(
            status="infeasible",
            certificate={
                "farkas_eq": y1[:n_eq].copy(),
                "farkas_ineq": y1[n_eq:].copy(),
                "phase1_value": ph1_val,
            },
            iterations=sx.iterations,
        )

    # Pivot leftover artificials out where a nonzero pivot exists; pin the
    # rest at zero (their row is redundant in the current basis).
    for row in range(m):
        if sx.basis[row] < n_std:
            continue
        bmat = a_ph1[:, sx.basis]
        lu = scipy.linalg.lu_factor(bmat)
        in_basis = set(sx.basis)
        for j in range(n_std):
            if j in in_basis:
                continue
            w = scipy.linalg.lu_solve(lu, a_ph1[:, j])
            if abs(w[row]) > 1e-8:
                sx.basis[row] = j
                sx.status[j] = _AT_LOWER
                break
    u_ph1[n_std:] = 0.0  # artificials may never take a positive value again

    # Phase 2.
    c_ph2 = np.concatenate([c_std, np.zeros(m)])
    try:
        y2, _, _ = sx.run(c_ph2, max_iter, n_enterable=n_std)
    except _Unbounded as ray:
        direction = np.zeros(n_std + m)
        direction[ray.j] = ray.sigma
        for i, bi in enumerate(ray.basis):
            direction[bi] = -ray.sigma * ray.w[i]
        ray_x = np.zeros(n)
        for k, (j, sgn) in enumerate(cols):
            if j >= 0:
                ray_x[j] += sgn * direction[k]
        return Solution(status="unbounded", certificate={"ray": ray_x}, iterations=sx.iterations)

    z = sx.solution_vector()
    x = shift_x.copy()
    for k, (j, sgn) in enumerate(cols):
        if j >= 0:
            x[j] += sgn * z[k]

    # Multipliers in the convention of Solution.duals: lam_eq = -y_eq,
    # lam_ub = -y_ub >= 0; bound multipliers from original reduced costs.
    lam_eq = -y2[:n_eq]
    lam_ub = np.maximum(-y2[n_eq:], 0.0)
    d_orig = problem.c - (problem.a_eq.T @ y2[:n_eq] + problem.a_ub.T @ y2[n_eq:])
    duals = {
        "ineq": lam_ub,
        "eq": lam_eq,
        "lower": np.maximum(d_orig, 0.0),
        "upper": np.maximum(-d_orig, 0.0),
    }
    return Solution(
        status="optimal",
        x=x,
        value=float(problem.c @ x),
        duals=duals,
        iterations=sx.iterations,
    )


# ---------------------------------------------------------------------------
# QP: primal active set.
# ---------------------------------------------------------------------------

def _qp_feasible_start(problem: QpProblem) -> np.ndarray:
    lp = LpProblem(
        c=np.zeros(problem.n),
        a_ub=problem.a_ub, b_ub=problem.b_ub,
        a_eq=problem.a_eq, b_eq=problem.b_eq,
    )
    sol = solve_lp(lp)
    if sol.status != "optimal":
        raise Infeasible("QP constraints are infeasible", certificate=sol.certificate)
    return sol.x


def solve_qp(problem: QpProblem, start: np.ndarray | None = None,
             max_iter: int | None = None) -> Solution:
    """Solve a convex QP by the primal active-set method.

    `start` may supply a known feasible point to skip the phase-1 LP
    (callers with cheap feasibility knowledge, e.g. the MPC planner, use
    this).  Raises Infeasible / NotPsd; returns an optimal Solution
    otherwise.
    """
    n = problem.n
    h = 0.5 * (problem.h + problem.h.T)
    try:
        np.linalg.cholesky(h + 1e-10 * np.eye(n))
    except np.linalg.LinAlgError:
        raise NotPsd("quadratic term is not positive semidefinite")
    h_reg = h + 1e-10 * np.eye(n)

    a_ub, b_ub = problem.a_ub, problem.b_ub
    a_eq, b_eq = problem.a_eq, problem.b_eq
    m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]

    x = None
    if start is not None:
        cand = np.asarray(start, dtype=float).ravel().copy()
        ok = (m_ub == 0 or np.all(a_ub @ cand <= b_ub + 1e-9)) and \
             (m_eq == 0 or np.max(np.abs(a_eq @ cand - b_eq), initial=0.0) <= 1e-9)
        if ok:
            x = cand
    if x is None:
        x = _qp_feasible_start(problem)

    if max_iter is None:
        max_iter = 50 * (n + m_ub) + 200

    working: list[int] = []
    for it in range(max_iter):
        a_act = np.vstack([a_eq, a_ub[working]]) if (m_eq or working) else np.zeros((0, n))
        k = a_act.shape[0]
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = h_reg
        kkt[:n, n:] = a_act.T
        kkt[n:, :n] = a_act
        rhs = np.concatenate([-(h_reg @ x + problem.g), np.zeros(k)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        p = sol[:n]
        lam = sol[n:]

        if np.max(np.abs(p), initial=0.0) <= 1e-11:
            lam_ineq = lam[m_eq:]
            if lam_ineq.size == 0 or np.min(lam_ineq) >= -OPT_TOL:
                duals_ineq = np.zeros(m_ub)
                for wi, li in zip(working, lam_ineq):
                    duals_ineq[wi] = max(li, 0.0)
                value = float(0.5 * x @ problem.h @ x + problem.g @ x)
                return Solution(
                    status="optimal", x=x, value=value,
                    duals={"ineq": duals_ineq, "eq": lam[:m_eq]},
                    iterations=it + 1,
                )
            working.pop(int(np.argmin(lam_ineq)))
            continue

        alpha = 1.0
        blocker = -1
        if m_ub:
            s = a_ub @ p
            slack = b_ub - a_ub @ x
            for i in range(m_ub):
                if s[i] <= 1e-12 or i in working:
                    continue
                a_i = max(slack[i], 0.0) / s[i]
                if a_i < alpha - 1e-12:
                    alpha = a_i
                    blocker = i
        x = x + alpha * p
        if blocker >= 0:
            a_try = np.vstack([a_eq, a_ub[working + [blocker]]])
            if np.linalg.matrix_rank(a_try, tol=1e-10) == a_try.shape[0]:
                working.append(blocker)
            # else: dependent blocker; the step already landed on its face

    raise Degenerate("active-set iteration cap exceeded")
