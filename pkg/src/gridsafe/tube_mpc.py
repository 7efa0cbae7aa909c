"""Contingency recovery: delay-structured reference planning plus tube
tracking.

After a topology change the network must migrate to a new operating
point.  A single centralized QP plans the full transition (no receding
horizon: the plan is computed once and shipped out across the
communication graph, so a bus may not act before its activation step).
Per-bus barrier supervisors then confine the tracking error to a
precomputed invariant tube cross-section, which is synthesized with the
same contract machinery on the error dynamics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cbf import BarrierFunction, supervise
from .optim import LpProblem, QpProblem, solve_lp, solve_qp
from .polytope import Polytope
from .rci import DisturbanceSpec, LinearSubsystem, RciResult, compute_mrci


class SourceMissing(ValueError):
    """Delay-structure source bus is not in the graph."""


class PlanInfeasible(RuntimeError):
    """The frequency caps cannot be met with the delayed input structure."""

    def __init__(self, message, time_step=None, bus=None):
        super().__init__(message)
        self.time_step = time_step
        self.bus = bus


@dataclass
class DelayStructure:
    """Per-bus activation step: the input is pinned to zero before the
    reference plan has had time to arrive over the graph."""

    source: int
    activation: dict
    unreachable: list = field(default_factory=list)


def delay_structure(adjacency: dict, source: int, edges_per_step: int,
                    t_p: int) -> DelayStructure:
    """BFS hop counts from the planning bus, one activation per
    ceil(hops / edges_per_step); unreachable buses never act (activation
    = t_p, with a warning)."""
    if source not in adjacency:
        raise SourceMissing(f"source bus {source} not in graph")
    if edges_per_step < 1:
        raise ValueError("edges_per_step must be at least 1")
    hops = {source: 0}
    frontier = [source]
    while frontier:
        nxt = []
        for i in frontier:
            for j in adjacency[i]:
                if j not in hops:
                    hops[j] = hops[i] + 1
                    nxt.append(j)
        frontier = nxt
    activation = {}
    unreachable = []
    for i in adjacency:
        if i in hops:
            activation[i] = int(np.ceil(hops[i] / edges_per_step))
        else:
            activation[i] = t_p
            unreachable.append(i)
    if unreachable:
        warnings.warn(f"buses {unreachable} unreachable from {source}: they never act")
    return DelayStructure(source=source, activation=activation, unreachable=unreachable)


@dataclass
class ReferenceTrajectory:
    """Planned nominal transition in deviation coordinates about the
    post-contingency operating point."""

    bus_ids: list
    x_hat: dict          # bus -> (t_p + 1, nx) deviations
    u_hat: dict          # bus -> (t_p,) inputs
    d_hat: dict          # bus -> (t_p,) predicted disturbances
    target: dict         # bus -> absolute operating-point state
    ts: float
    t_p: int
    cost: float = np.nan

    def write_csv(self, path):
        header = ["t"]
        for i in self.bus_ids:
            nx = self.x_hat[i].shape[1]
            header += [f"xhat_{i}_{k}" for k in range(nx)]
            header += [f"uhat_{i}", f"dhat_{i}"]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for t in range(self.t_p + 1):
                row = [f"{t * self.ts:.17g}"]
                for i in self.bus_ids:
                    row += [f"{v:.17g}" for v in self.x_hat[i][t]]
                    u = self.u_hat[i][t] if t < self.t_p else 0.0
                    d = self.d_hat[i][t] if t < self.t_p else 0.0
                    row += [f"{u:.17g}", f"{d:.17g}"]
                fh.write(",".join(row) + "\n")


def _stack(systems: dict):
    ids = sorted(systems)
    offsets = {}
    pos = 0
    for i in ids:
        offsets[i] = slice(pos, pos + systems[i].nx)
        pos += systems[i].nx
    n = pos
    a = np.zeros((n, n))
    b = np.zeros((n, len(ids)))
    e = np.zeros((n, len(ids)))
    for col, i in enumerate(ids):
        s = systems[i]
        a[offsets[i], offsets[i]] = s.a
        for k, j in enumerate(s.neighbors):
            a[offsets[i], offsets[j].start] += s.e1[:, k]
        if s.nu:
            b[offsets[i], col] = s.b[:, 0]
        if s.n_exo:
            e[offsets[i], col] = s.e2[:, 0]
    return ids, offsets, a, b, e


def plan(systems: dict, x0_dev: dict, delay: DelayStructure, t_p: int,
         omega_max_ff: float, u_max: dict, gen_ids, d_hat: dict = None,
         q_theta: float = 10.0, q_omega: float = 100.0, r_weight: float = 1.0,
         terminal_scale: float = 10.0, target: dict = None,
         ts: float = 0.05) -> ReferenceTrajectory:
    """Solve the condensed planning QP over the stacked free inputs.

    systems: per-bus models discretized about the post-contingency
    operating point; x0_dev: initial deviations from it (the pre-event
    steady state); delayed input entries are eliminated rather than
    constrained.  Frequency rows |omega_hat| <= omega_max_ff apply to
    generator buses at every step; inputs live in their boxes.  Raises
    PlanInfeasible with the first offending step/bus when the caps are
    unreachable under the delay structure.
    """
    ids, offsets, a_net, b_net, e_net = _stack(systems)
    n = a_net.shape[0]
    m = len(ids)
    x0 = np.concatenate([np.asarray(x0_dev[i], dtype=float).ravel() for i in ids])
    d_seq = np.zeros((t_p, m))
    if d_hat:
        for col, i in enumerate(ids):
            if i in d_hat:
                d_seq[:, col] = np.asarray(d_hat[i], dtype=float).ravel()[:t_p]

    # condensed prediction: X = phi x0 + gamma U + xi D over t = 1..t_p
    powers = [np.eye(n)]
    for _ in range(t_p):
        powers.append(a_net @ powers[-1])
    phi = np.vstack([powers[t] for t in range(1, t_p + 1)])
    gamma = np.zeros((t_p * n, t_p * m))
    for t in range(1, t_p + 1):
        for s in range(t):
            gamma[(t - 1) * n:t * n, s * m:(s + 1) * m] = powers[t - 1 - s] @ b_net
    drift = phi @ x0
    for t in range(1, t_p + 1):
        acc = np.zeros(n)
        for s in range(t):
            acc += powers[t - 1 - s] @ (e_net @ d_seq[s])
        drift[(t - 1) * n:t * n] += acc

    # state weights: angles q_theta, frequencies q_omega, terminal scaled
    q_diag = np.zeros(n)
    for i in ids:
        sl = offsets[i]
        q_diag[sl.start] = q_theta
        if sl.stop - sl.start == 2:
            q_diag[sl.start + 1] = q_omega
    q_bar = np.tile(q_diag, t_p)
    q_bar[-n:] *= terminal_scale

    # free-input selector: drop entries before each bus's activation step
    free_cols = [t * m + col for t in range(t_p) for col in range(m)
                 if t >= delay.activation[ids[col]]]
    sel = np.zeros((t_p * m, len(free_cols)))
    for k, c in enumerate(free_cols):
        sel[c, k] = 1.0
    gamma_f = gamma @ sel

    h_qp = 2.0 * (gamma_f.T * q_bar) @ gamma_f + 2.0 * r_weight * np.eye(len(free_cols))
    g_qp = 2.0 * gamma_f.T @ (q_bar * drift)

    # frequency-cap rows on generator buses, both signs, every step
    cap_rows = []
    cap_rhs = []
    cap_tags = []
    for t in range(1, t_p + 1):
        for i in gen_ids:
            row = np.zeros(t_p * n)
            row[(t - 1) * n + offsets[i].start + 1] = 1.0
            for sign in (+1.0, -1.0):
                cap_rows.append(sign * row @ gamma_f)
                cap_rhs.append(omega_max_ff - sign * row @ drift)
                cap_tags.append((t, i))
    cap_rows = np.array(cap_rows) if cap_rows else np.zeros((0, len(free_cols)))
    cap_rhs = np.array(cap_rhs)

    box = np.array([u_max[ids[c % m]] for c in free_cols])
    a_ub = np.vstack([cap_rows, np.eye(len(free_cols)), -np.eye(len(free_cols))])
    b_ub = np.concatenate([cap_rhs, box, box])

    # happy path: unconstrained minimizer often satisfies everything
    u_free = np.linalg.solve(h_qp, -g_qp)
    if not (np.all(cap_rows @ u_free <= cap_rhs + 1e-9) and np.all(np.abs(u_free) <= box + 1e-9)):
        start = None
        if np.all(cap_rhs >= -1e-9):
            start = np.zeros(len(free_cols))
        else:
            lp = LpProblem(c=np.zeros(len(free_cols)), a_ub=cap_rows, b_ub=cap_rhs,
                           lb=-box, ub=box)
            lp_sol = solve_lp(lp)
            if lp_sol.status != "optimal":
                t_bad, bus_bad = _first_infeasible(cap_rows, cap_rhs, box, cap_tags)
                raise PlanInfeasible(
                    f"frequency cap unreachable at step {t_bad}, bus {bus_bad}",
                    time_step=t_bad, bus=bus_bad)
            start = lp_sol.x
        sol = solve_qp(QpProblem(h=h_qp, g=g_qp, a_ub=a_ub, b_ub=b_ub), start=start)
        u_free = sol.x

    u_full = sel @ u_free
    x_stack = drift + gamma @ u_full
    cost = float((q_bar * x_stack) @ x_stack + r_weight * u_full @ u_full)

    x_hat = {}
    u_hat = {}
    d_out = {}
    for col, i in enumerate(ids):
        sl = offsets[i]
        traj = np.zeros((t_p + 1, sl.stop - sl.start))
        traj[0] = np.asarray(x0_dev[i], dtype=float).ravel()
        for t in range(1, t_p + 1):
            traj[t] = x_stack[(t - 1) * n + sl.start:(t - 1) * n + sl.stop]
        x_hat[i] = traj
        u_hat[i] = u_full[col::m].copy()
        d_out[i] = d_seq[:, col].copy()

    ref = ReferenceTrajectory(
        bus_ids=ids, x_hat=x_hat, u_hat=u_hat, d_hat=d_out,
        target=dict(target or {}), ts=ts, t_p=t_p, cost=cost,
    )
    _check_recursion(systems, ref, tol=1e-9)
    return ref


def _first_infeasible(cap_rows, cap_rhs, box, cap_tags):
    """Least-violation LP to name the earliest blocking cap row."""
    nf = cap_rows.shape[1]
    c = np.zeros(nf + 1)
    c[-1] = 1.0
    rows = np.hstack([cap_rows, -np.ones((cap_rows.shape[0], 1))])
    lb = np.concatenate([-box, [0.0]])
    ub = np.concatenate([box, [np.inf]])
    sol = solve_lp(LpProblem(c=c, a_ub=rows, b_ub=cap_rhs, lb=lb, ub=ub))
    if sol.status != "optimal":
        return cap_tags[0]
    resid = cap_rows @ sol.x[:-1] - cap_rhs
    k = int(np.argmax(resid))
    return cap_tags[k]


def _check_recursion(systems, ref: ReferenceTrajectory, tol):
    ids = ref.bus_ids
    for t in range(ref.t_p):
        y_hat = {i: ref.x_hat[i][t][0] for i in ids}
        for i in ids:
            s = systems[i]
            coupling = np.array([y_hat[j] for j in s.neighbors])
            nxt = s.a @ ref.x_hat[i][t] + s.e1 @ coupling \
                + (s.b[:, 0] * ref.u_hat[i][t] if s.nu else 0.0) \
                + (s.e2[:, 0] * ref.d_hat[i][t] if s.n_exo else 0.0)
            if np.max(np.abs(nxt - ref.x_hat[i][t + 1])) > tol:
                raise AssertionError(f"nominal recursion violated at t={t}, bus {i}")


# ---------------------------------------------------------------------------
# Error tube and tracking
# ---------------------------------------------------------------------------

def error_rci(sys: LinearSubsystem, delta_bounds: DisturbanceSpec, p_mat, q0,
              eps: float = 1e-6, max_iter: int = 500, q_init=None) -> RciResult:
    """Tube cross-section: invariant set of the tracking-error dynamics.

    The error obeys the same linear model driven by coupling error,
    disturbance prediction error, and model mismatch, all already folded
    into delta_bounds by the caller."""
    return compute_mrci(sys, p_mat, q0, delta_bounds, eps=eps,
                        max_iter=max_iter, q_init=q_init)


def frequency_halfwidth(res: RciResult) -> float:
    """Tube extent along the frequency coordinate (2-state nodes only)."""
    if res.poly.dim != 2:
        raise ValueError("frequency halfwidth applies to generator nodes")
    return res.poly.output_bound([0.0, 1.0])


def lqr_gain(sys: LinearSubsystem, q_diag, r_weight: float = 1.0) -> np.ndarray:
    """Discrete LQR feedback for the nominal tracking input, in the
    convention u0 = u_hat + k_lqr @ e."""
    q = np.diag(np.asarray(q_diag, dtype=float))
    r = r_weight * np.eye(sys.nu)
    p = scipy.linalg.solve_discrete_are(sys.a, sys.b, q, r)
    return -np.linalg.solve(r + sys.b.T @ p @ sys.b, sys.b.T @ p @ sys.a)


def track(sys: LinearSubsystem, tube: BarrierFunction, x, x_hat_t, u_hat_t,
          w_err_measured, u_set: Polytope, k_lqr, w_u_max=None):
    """Supervised tracking input at one step.

    e = x - x_hat; the nominal correction is the LQR feedback on e; the
    tube barrier supervises the correction against the error dynamics with
    the measured error signals, inside the input set shifted by the
    planned input.  Returns the absolute input u_hat + correction."""
    x = np.asarray(x, dtype=float).ravel()
    x_hat_t = np.asarray(x_hat_t, dtype=float).ravel()
    u_hat_t = np.atleast_1d(np.asarray(u_hat_t, dtype=float))
    e = x - x_hat_t
    u0 = k_lqr @ e
    shifted = Polytope(u_set.p, u_set.q - u_set.p @ u_hat_t)
    du = supervise(tube, sys, e, w_err_measured, u0, shifted, w_u_max)
    return u_hat_t + du
