"""Minimal robust control invariant sets by iterated robust linear programming.

Each subsystem is a discrete-time linear model whose neighbor couplings and
exogenous inputs are split into a *measured* disturbance (the control law
may feed it forward) and an *unmeasured* remainder bounded elementwise.
The one-step propagation solves, in a single LP, for the smallest template
polytope containing every successor together with affine gains that respect
the input set robustly; iterating the propagation from a small seed set
yields a minimal invariant set for the fixed template.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import Infeasible, LpProblem, solve_lp
from .polytope import Polytope


class Diverged(RuntimeError):
    """The set iteration blew past the divergence bound: no invariant set
    of this template exists at the requested disturbance level."""


@dataclass
class LinearSubsystem:
    """Discrete (or continuous, before `grid.discretize`) per-node model

        x+ = a x + b u + e1 y_N + e2 d (+ w_u),    y = c x

    with scalar output row c and neighbor outputs y_N ordered like
    `neighbors`.
    """

    a: np.ndarray
    b: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    c: np.ndarray
    ts: float
    neighbors: tuple = ()
    name: str = ""

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        n = self.a.shape[0]
        self.b = np.asarray(self.b, dtype=float).reshape(n, -1)
        self.e1 = np.asarray(self.e1, dtype=float).reshape(n, -1)
        self.e2 = np.asarray(self.e2, dtype=float).reshape(n, -1)
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.neighbors = tuple(self.neighbors)
        if self.a.shape != (n, n):
            raise ValueError("state matrix must be square")
        if self.c.shape[0] != n:
            raise ValueError("output row must match the state dimension")
        if not np.any(self.c):
            raise ValueError("output row must be nonzero")
        if self.ts <= 0:
            raise ValueError("sample time must be positive")
        if self.e1.shape[1] != len(self.neighbors):
            raise ValueError("one coupling column per neighbor required")

    @property
    def nx(self):
        return self.a.shape[0]

    @property
    def nu(self):
        return self.b.shape[1]

    @property
    def n_coupling(self):
        return self.e1.shape[1]

    @property
    def n_exo(self):
        return self.e2.shape[1]


@dataclass
class DisturbanceSpec:
    """Bounds the RCI synthesis robustifies against.

    w_measured lives over the stacked (y_N, d) vector, w_u_max bounds the
    unmeasured additive state disturbance elementwise, and u_set constrains
    the input (None only for autonomous systems).
    """

    w_measured: Polytope
    w_u_max: np.ndarray
    u_set: Polytope | None = None

    def __post_init__(self):
        self.w_u_max = np.asarray(self.w_u_max, dtype=float).ravel()
        if np.any(self.w_u_max < 0):
            raise ValueError("unmeasured bounds must be nonnegative")


@dataclass
class RciResult:
    poly: Polytope
    k_ff: np.ndarray
    k_fb: np.ndarray
    iterations: int
    converged: bool

    def output_bound(self, c) -> float:
        return self.poly.output_bound(c)

    def control(self, x, w_measured):
        """Certifying affine policy u = k_ff w_m + k_fb x."""
        return self.k_ff @ np.asarray(w_measured, dtype=float) + self.k_fb @ np.asarray(x, dtype=float)

    def to_dict(self) -> dict:
        return {
            "poly": self.poly.to_dict(),
            "k_ff": self.k_ff.tolist(),
            "k_ff_shape": list(self.k_ff.shape),
            "k_fb": self.k_fb.tolist(),
            "k_fb_shape": list(self.k_fb.shape),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RciResult":
        return cls(
            poly=Polytope.from_dict(data["poly"]),
            k_ff=np.array(data["k_ff"], dtype=float).reshape(data["k_ff_shape"]),
            k_fb=np.array(data["k_fb"], dtype=float).reshape(data["k_fb_shape"]),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
        )


def fan_template(nx: int, n_fan: int = 8):
    """Template rows for the set iteration: a regular fan of unit normals
    offset off the axes, plus dedicated +/- rows for the last state so a
    cap on that coordinate maps onto exactly two offsets.

    Returns (rows, cap_row_indices).  For 1-D states the template is just
    the +/- pair.
    """
    if nx == 1:
        return np.array([[1.0], [-1.0]]), (0, 1)
    if nx != 2:
        raise ValueError("fan template is defined for 1- and 2-D states")
    angles = 2 * np.pi * (np.arange(n_fan) + 0.5) / n_fan
    fan = np.column_stack([np.cos(angles), np.sin(angles)])
    rows = np.vstack([fan, [0.0, 1.0], [0.0, -1.0]])
    return rows, (n_fan, n_fan + 1)


def one_step_propagate(sys: LinearSubsystem, p_mat, q, dist: DisturbanceSpec,
                       state_caps=None):
    """Smallest template offsets containing every one-step successor.

    Solves the dualized robust LP: for each template row, the worst case
    over x in Poly(p_mat, q) and measured disturbance in dist.w_measured of
    the successor row value is replaced by nonnegative multipliers on the
    uncertainty polytope; the unmeasured box enters as a per-row constant.
    Returns (q_plus, k_ff, k_fb).
    """
    p_mat = np.atleast_2d(np.asarray(p_mat, dtype=float))
    q = np.asarray(q, dtype=float).ravel()
    n_rows, nx = p_mat.shape
    nu = sys.nu
    nw = sys.n_coupling + sys.n_exo
    e_m = np.hstack([sys.e1, sys.e2])

    wm = dist.w_measured
    if wm.dim != nw:
        raise ValueError(f"measured-disturbance set has dim {wm.dim}, expected {nw}")
    u_rows = dist.u_set.p if (nu and dist.u_set is not None) else np.zeros((0, nu))
    u_rhs = dist.u_set.q if (nu and dist.u_set is not None) else np.zeros(0)

    # Uncertainty polytope over xi = (x, w_m).
    pz = np.block([
        [p_mat, np.zeros((n_rows, nw))],
        [np.zeros((wm.nrows, nx)), wm.p],
    ])
    qz = np.concatenate([q, wm.q])
    mz = pz.shape[0]
    nxi = nx + nw

    n_robust = n_rows + u_rows.shape[0]
    n_qp = n_rows
    n_kff = nu * nw
    n_kfb = nu * nx
    nvar = n_qp + n_kff + n_kfb + n_robust * mz

    def kff_col(a, j):
        return n_qp + a * nw + j

    def kfb_col(a, i):
        return n_qp + n_kff + a * nx + i

    def mu_col(k, r):
        return n_qp + n_kff + n_kfb + k * mz + r

    # Per-row constant from the unmeasured box.
    wu_support = np.abs(p_mat) @ dist.w_u_max

    a_eq = np.zeros((n_robust * nxi, nvar))
    b_eq = np.zeros(n_robust * nxi)
    a_ub = np.zeros((n_robust, nvar))
    b_ub = np.zeros(n_robust)

    for k in range(n_robust):
        if k < n_rows:
            row = p_mat[k]
            bp = sys.b.T @ row          # length nu
            rhs_x = sys.a.T @ row       # coefficient on x absent the gains
            rhs_w = e_m.T @ row
        else:
            hu = u_rows[k - n_rows]
            bp = hu                     # u-row coefficient on the gains
            rhs_x = np.zeros(nx)
            rhs_w = np.zeros(nw)

        base = k * nxi
        # x-block: pz' mu (x rows) - sum_a bp[a] kfb[a, i] == rhs_x[i]
        for i in range(nx):
            a_eq[base + i, [mu_col(k, r) for r in range(mz)]] = pz[:, i]
            for a_idx in range(nu):
                a_eq[base + i, kfb_col(a_idx, i)] = -bp[a_idx]
            b_eq[base + i] = rhs_x[i]
        # w-block
        for j in range(nw):
            a_eq[base + nx + j, [mu_col(k, r) for r in range(mz)]] = pz[:, nx + j]
            for a_idx in range(nu):
                a_eq[base + nx + j, kff_col(a_idx, j)] = -bp[a_idx]
            b_eq[base + nx + j] = rhs_w[j]

        # budget row: qz' mu (+ wu support) <= q_plus_k  /  <= u bound
        a_ub[k, [mu_col(k, r) for r in range(mz)]] = qz
        if k < n_rows:
            a_ub[k, k] = -1.0
            b_ub[k] = -wu_support[k]
        else:
            b_ub[k] = u_rhs[k - n_rows]

    lb = np.concatenate([
        np.full(n_qp + n_kff + n_kfb, -np.inf),
        np.zeros(n_robust * mz),
    ])
    ub = np.full(nvar, np.inf)
    if state_caps is not None:
        caps = np.asarray(state_caps, dtype=float).ravel()
        if caps.shape[0] != n_rows:
            raise ValueError("state_caps must give one (possibly inf) cap per template row")
        ub[:n_qp] = caps

    cost = np.zeros(nvar)
    cost[:n_qp] = 1.0

    sol = solve_lp(LpProblem(c=cost, a_ub=a_ub, b_ub=b_ub, a_eq=a_eq, b_eq=b_eq, lb=lb, ub=ub))
    if sol.status != "optimal":
        raise Infeasible(
            _diagnose_infeasibility(sys, p_mat, q, dist, state_caps),
            certificate=sol.certificate,
        )

    q_plus = sol.x[:n_qp].copy()
    k_ff = sol.x[n_qp:n_qp + n_kff].reshape(nu, nw) if nu else np.zeros((0, nw))
    k_fb = sol.x[n_qp + n_kff:n_qp + n_kff + n_kfb].reshape(nu, nx) if nu else np.zeros((0, nx))
    return q_plus, k_ff, k_fb


def _diagnose_infeasibility(sys, p_mat, q, dist, state_caps):
    """Name the first offending row: a cap row that cannot hold, or an
    input row no gain can satisfy robustly."""
    if state_caps is not None:
        try:
            q_free, _, _ = one_step_propagate(sys, p_mat, q, dist, state_caps=None)
            caps = np.asarray(state_caps, dtype=float).ravel()
            bad = np.flatnonzero(q_free > caps + 1e-12)
            if bad.size:
                return (f"one-step set violates the cap on template row {bad[0]}: "
                        f"needs {q_free[bad[0]]:.6g}, cap {caps[bad[0]]:.6g}")
        except Infeasible:
            pass
    return "no feedforward/feedback gain satisfies the input set robustly (input rows)"


def compute_mrci(sys: LinearSubsystem, p_mat, q0, dist: DisturbanceSpec,
                 eps: float = 1e-6, max_iter: int = 500, state_caps=None,
                 blowup: float = 1e4, q_init=None) -> RciResult:
    """Iterate the one-step propagation from a small seed until the offsets
    stop growing (q_plus <= q + eps elementwise), then certify exactly.

    The approximate fixed point sits just below the true one, which would
    leave the supervisory QP infeasible by ~eps at boundary states, so a
    final pass inflates the offsets slightly past the fixed point (where
    the monotone one-step map strictly contracts) and re-solves until the
    image lies inside the set with no tolerance.  Capped rows are clipped
    instead of inflated: their one-step LP already pins the image at the
    cap.

    The template orientation p_mat is fixed; only offsets move.  q_init
    warm-starts the iteration (used to keep the gain map monotone across
    coupling-bound sweeps).  Raises Diverged past `blowup` times the seed
    and propagates Infeasible from the one-step LP.
    """
    q0 = np.asarray(q0, dtype=float).ravel()
    if np.any(q0 <= 0):
        raise ValueError("seed offsets must be positive")
    if eps <= 0:
        raise ValueError("eps must be positive")
    q = q0.copy() if q_init is None else np.asarray(q_init, dtype=float).ravel().copy()
    caps = None if state_caps is None else np.asarray(state_caps, dtype=float).ravel()

    floor = None if q_init is None else np.asarray(q_init, dtype=float).ravel()
    r_prev = None
    for it in range(1, max_iter + 1):
        q_plus, k_ff, k_fb = one_step_propagate(sys, p_mat, q, dist, state_caps)
        r = q_plus - q
        if np.all(r <= eps):
            exact = _certify_exact(sys, p_mat, q_plus, dist, caps, eps, it,
                                   r, r_prev, floor)
            if exact is not None:
                return exact
            return RciResult(Polytope(p_mat, q), k_ff, k_fb, it, True)
        if np.any(q_plus > blowup * q0):
            raise Diverged(
                f"offsets exceeded {blowup:g} x seed after {it} iterations "
                "(no finite guarantee at this disturbance level)")
        q = q_plus
        r_prev = r
    return RciResult(Polytope(p_mat, q), k_ff, k_fb, max_iter, False)


def _certify_exact(sys, p_mat, q_conv, dist, caps, eps, iterations,
                   r, r_prev, floor=None):
    """Extrapolate past the fixed point and certify q_plus <= q exactly.

    Near convergence the residual direction tracks the dominant
    (Perron-like) growth direction of the monotone map, so inflating along
    it by the geometric-tail estimate rho/(1-rho) clears the fixed point
    where the map strictly contracts; uniform inflation would not, since
    rows can have Lipschitz sums above one even when the spectral radius
    is below one.  `floor` keeps warm-started sweeps elementwise monotone.
    """
    rho = 0.5
    if r_prev is not None and np.linalg.norm(r_prev) > 0:
        rho = float(np.clip(np.linalg.norm(r) / np.linalg.norm(r_prev), 1e-3, 0.99))
    direction = np.maximum(r, 0.0) + 1e-3 * eps
    mult = 1.5
    for extra in range(1, 6):
        q_cert = q_conv + mult * (rho / (1.0 - rho)) * direction
        if floor is not None:
            q_cert = np.maximum(q_cert, floor)
        if caps is not None:
            q_cert = np.minimum(q_cert, caps)
        try:
            q_chk, k_ff, k_fb = one_step_propagate(sys, p_mat, q_cert, dist,
                                                   caps)
        except Infeasible:
            return None
        if np.all(q_chk <= q_cert + 1e-10):
            return RciResult(Polytope(p_mat, q_cert), k_ff, k_fb,
                             iterations + extra, True)
        mult *= 3.0
    return None


def delay_disturbance_bound(sys: LinearSubsystem, k_ff, omega_max: float,
                            tau: float) -> np.ndarray:
    """Unmeasured-disturbance bound induced by stale neighbor measurements.

    A neighbor output used for feedforward may lag by tau seconds, during
    which it drifts at most omega_max; only coupling columns of the
    feedforward gain see the stale signal.
    """
    if tau < 0:
        raise ValueError("delay must be nonnegative")
    k_ff = np.asarray(k_ff, dtype=float).reshape(sys.nu, -1)
    coupling = sys.b @ k_ff[:, :sys.n_coupling] if sys.nu else np.zeros((sys.nx, sys.n_coupling))
    return np.abs(coupling).sum(axis=1) * omega_max * tau


def compute_mrci_with_delay(sys: LinearSubsystem, p_mat, q0, dist: DisturbanceSpec,
                            omega_max: float, tau: float, eps: float = 1e-6,
                            max_iter: int = 500, state_caps=None,
                            outer_iter: int = 10, q_init=None) -> RciResult:
    """Resolve the circular dependence between the delay-induced unmeasured
    bound and the feedforward gain it depends on: start with the delay
    contribution at zero and recompute it from the converged gain until it
    settles (change < 1e-8, at most `outer_iter` rounds).
    """
    base_wu = dist.w_u_max.copy()
    extra = np.zeros(sys.nx)
    result = None
    for _ in range(outer_iter):
        spec = DisturbanceSpec(dist.w_measured, base_wu + extra, dist.u_set)
        result = compute_mrci(sys, p_mat, q0, spec, eps=eps, max_iter=max_iter,
                              state_caps=state_caps, q_init=q_init)
        new_extra = delay_disturbance_bound(sys, result.k_ff, omega_max, tau)
        if np.max(np.abs(new_extra - extra), initial=0.0) < 1e-8:
            return result
        extra = new_extra
        q_init = result.poly.q  # warm start: bounds only grew
    return result
