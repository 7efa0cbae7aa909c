"""Assume-guarantee contract machinery for coupled subsystems.

Each node promises a bound on its scalar output while assuming bounds on
its neighbors' outputs.  The *gain map* of a node sends assumed neighbor
bounds to the output bound its synthesized invariant set can guarantee.
A bound vector with gain(y) <= y elementwise is a valid contract, and the
product of the per-node invariant sets is then invariant for the whole
network.  The map is evaluated pointwise on a grid (conservative ceiling
lookups in between), and the valid contract is found as the least fixed
point of the sampled map by monotone iteration from below, which has
linear cost in the node count for sparse graphs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .optim import Infeasible
from .polytope import Polytope
from .rci import (
    DisturbanceSpec,
    Diverged,
    LinearSubsystem,
    RciResult,
    compute_mrci,
    compute_mrci_with_delay,
)


class NotSummable(ValueError):
    """Coupling channels do not share an input direction."""


class OutOfRange(RuntimeError):
    """Query above the sampled domain of a gain grid."""


class NoGuarantee(RuntimeError):
    """The sampled gain diverged at the queried grid point."""


class NoValidContract(RuntimeError):
    """The fixed-point search escaped the sampled domain."""

    def __init__(self, message, node=None, last_iterate=None):
        super().__init__(message)
        self.node = node
        self.last_iterate = last_iterate


class SmallGainViolated(RuntimeError):
    """Loop gain at or above one: no finite interconnection bound."""


@dataclass
class NodeSpec:
    """Everything the gain evaluation needs for one subsystem."""

    sys: LinearSubsystem            # discrete-time model
    d_radius: np.ndarray            # box radius per exogenous channel
    u_set: Polytope | None
    w_u_base: np.ndarray            # unmeasured bound excluding the delay part
    p_mat: np.ndarray
    q0: np.ndarray
    state_caps: np.ndarray | None = None
    eps: float = 1e-6
    max_iter: int = 500
    tau: float = 0.0                # neighbor-measurement delay
    rate_bound: float = 0.0         # neighbor output drift rate, for the delay bound
    coupling_pad: float = 0.0       # widens the assumed coupling bound (inter-sample drift)

    def __post_init__(self):
        self.d_radius = np.asarray(self.d_radius, dtype=float).ravel()
        self.w_u_base = np.asarray(self.w_u_base, dtype=float).ravel()
        if self.d_radius.shape[0] != self.sys.n_exo:
            raise ValueError("one exogenous radius per e2 column required")


def coupling_scales(sys: LinearSubsystem, tol: float = 1e-9):
    """Per-neighbor positive multiples relative to the first coupling
    column.  Raises NotSummable when any column is not a positive multiple
    of the reference, i.e. the channels do not share input dynamics."""
    e1 = sys.e1
    p = e1.shape[1]
    if p == 0:
        return np.zeros(0)
    ref = e1[:, 0]
    ref_ss = ref @ ref
    if ref_ss == 0:
        raise NotSummable("zero reference coupling column")
    scales = np.empty(p)
    for j in range(p):
        rho = (e1[:, j] @ ref) / ref_ss
        if rho <= 0 or np.linalg.norm(e1[:, j] - rho * ref) > tol * max(1.0, np.linalg.norm(e1[:, j])):
            raise NotSummable(f"coupling column {j} is not a positive multiple of column 0")
        scales[j] = rho
    return scales


def combine_summable(bounds) -> float:
    """Sum of bounds on channels that share one input direction (the
    caller pre-scales each bound into the reference channel's units and
    asserts proportionality via `coupling_scales`)."""
    bounds = np.asarray(bounds, dtype=float).ravel()
    if np.any(bounds < 0):
        raise ValueError("bounds must be nonnegative")
    return float(np.sum(bounds))


def _combined_system(node: NodeSpec):
    """Fold all coupling columns onto the reference column."""
    sys = node.sys
    if sys.n_coupling <= 1:
        return sys, coupling_scales(sys) if sys.n_coupling else np.zeros(0)
    scales = coupling_scales(sys)
    folded = LinearSubsystem(
        a=sys.a, b=sys.b, e1=sys.e1[:, :1], e2=sys.e2, c=sys.c, ts=sys.ts,
        neighbors=sys.neighbors[:1], name=sys.name,
    )
    return folded, scales


def _disturbance_spec(node: NodeSpec, coupling_radii) -> DisturbanceSpec:
    radii = np.concatenate([np.asarray(coupling_radii, dtype=float).ravel(),
                            node.d_radius])
    if radii.size == 0:
        # no measured channels at all: zero-dimensional box
        w_m = Polytope(np.zeros((0, 0)), np.zeros(0))
    else:
        w_m = Polytope.box(radii)
    return DisturbanceSpec(w_measured=w_m, w_u_max=node.w_u_base, u_set=node.u_set)


def eval_gain(node: NodeSpec, y_n_max, q_init=None, combine: bool = True):
    """Output bound guaranteed under assumed neighbor bounds.

    Synthesizes the node's invariant set with the coupling treated as a
    bounded disturbance (summable channels folded onto one axis when
    `combine`) and returns (max |y| over the set, RciResult).  Diverged /
    Infeasible propagate: the caller records the point as carrying no
    finite guarantee.
    """
    y = np.asarray(y_n_max, dtype=float).ravel()
    if np.any(y < 0):
        raise ValueError("neighbor bounds must be nonnegative")
    sys = node.sys
    if combine and sys.n_coupling > 1:
        folded, scales = _combined_system(node)
        if y.size != sys.n_coupling:
            raise ValueError("one bound per neighbor required")
        coupling = [combine_summable(scales * y) + node.coupling_pad]
        run_sys = folded
    else:
        if y.size != sys.n_coupling:
            raise ValueError("one bound per neighbor required")
        coupling = y + node.coupling_pad if y.size else y
        run_sys = sys

    dist = _disturbance_spec(node, coupling)
    if node.tau > 0:
        res = compute_mrci_with_delay(run_sys, node.p_mat, node.q0, dist,
                                      omega_max=node.rate_bound, tau=node.tau,
                                      eps=node.eps, max_iter=node.max_iter,
                                      state_caps=node.state_caps, q_init=q_init)
    else:
        res = compute_mrci(run_sys, node.p_mat, node.q0, dist, eps=node.eps,
                           max_iter=node.max_iter, state_caps=node.state_caps,
                           q_init=q_init)
    if not res.converged:
        raise NoGuarantee(f"set iteration did not converge for {sys.name or 'node'}")
    return res.poly.output_bound(sys.c), res


@dataclass
class GainSamples:
    """Gridded gain map of one node.

    With summable coupling there is a single combined axis (scales map
    neighbor bounds into it); otherwise one axis per neighbor.  values and
    diverged are arrays of shape (len(axis_0), ..., len(axis_last)).
    """

    node_id: int
    neighbor_ids: tuple
    axes: list
    values: np.ndarray
    diverged: np.ndarray
    scales: np.ndarray | None    # set iff axes are combined
    monotone: bool = True
    rci: dict = field(default_factory=dict)   # grid index -> RciResult

    def query_point(self, y_by_neighbor):
        """Map per-neighbor bounds to grid coordinates."""
        y = np.asarray(y_by_neighbor, dtype=float).ravel()
        if self.scales is not None:
            return np.array([combine_summable(self.scales * y)])
        return y


def sample_gain_grid(node: NodeSpec, node_id: int, axis_max, points_per_axis: int,
                     combine: bool = True) -> GainSamples:
    """Evaluate the gain map on a regular grid from zero to axis_max.

    Grid points are visited in ascending order and each evaluation is
    warm-started from a dominated neighbor, which both speeds the set
    iterations up and keeps the recorded values monotone (the map itself
    is monotone, so any violation is a numerical artifact and is asserted
    against).  Points past a diverged one along an axis are marked
    diverged without evaluation.
    """
    if points_per_axis < 2:
        raise ValueError("need at least two points per axis")
    sys = node.sys
    p = sys.n_coupling
    if p == 0:
        gain, res = eval_gain(node, np.zeros(0))
        return GainSamples(node_id, (), [], np.array(gain), np.array(False),
                           scales=None, rci={(): res})

    if combine:
        _, scales = _combined_system(node)
        n_axes = 1
    else:
        scales = None
        n_axes = p
        if n_axes > 3:
            raise ValueError("more than 3 non-summable axes; combine channels instead")
    axis_max = np.broadcast_to(np.asarray(axis_max, dtype=float).ravel(), (n_axes,))
    axes = [np.linspace(0.0, m, points_per_axis) for m in axis_max]
    shape = tuple(points_per_axis for _ in range(n_axes))
    values = np.full(shape, np.nan)
    diverged = np.zeros(shape, dtype=bool)
    rcis = {}

    eval_node = node
    if combine:
        # the grid lives on the combined axis: evaluate the folded model
        folded, _ = _combined_system(node)
        eval_node = NodeSpec(sys=folded, d_radius=node.d_radius, u_set=node.u_set,
                             w_u_base=node.w_u_base, p_mat=node.p_mat, q0=node.q0,
                             state_caps=node.state_caps, eps=node.eps,
                             max_iter=node.max_iter, tau=node.tau,
                             rate_bound=node.rate_bound, coupling_pad=node.coupling_pad)

    for idx in itertools.product(*[range(points_per_axis)] * n_axes):
        prior = tuple(np.maximum(np.array(idx) - 1, 0))
        if any(i > 0 and diverged[tuple(np.subtract(idx, np.eye(n_axes, dtype=int)[k]))]
               for k, i in enumerate(idx)):
            diverged[idx] = True  # monotone map: beyond a diverged point all diverge
            continue
        coupling = np.array([axes[k][i] for k, i in enumerate(idx)])
        warm = rcis.get(prior)
        try:
            gain, res = eval_gain(eval_node, coupling, combine=False,
                                  q_init=None if warm is None else warm.poly.q)
        except (Diverged, Infeasible, NoGuarantee):
            diverged[idx] = True
            continue
        values[idx] = gain
        rcis[idx] = res

    samples = GainSamples(node_id, tuple(sys.neighbors), axes, values, diverged,
                          scales=scales, rci=rcis)
    samples.monotone = _check_monotone(values, diverged)
    if not samples.monotone:
        raise AssertionError(f"sampled gain map of node {node_id} is not monotone")
    return samples


def _check_monotone(values, diverged, tol=1e-9):
    v = np.where(diverged, np.inf, values)
    with np.errstate(invalid="ignore"):
        for axis in range(v.ndim):
            d = np.diff(v, axis=axis)
            d = d[np.isfinite(d)]
            if d.size and np.min(d) < -tol:
                return False
    return True


def gain_upper(samples: GainSamples, y_n_max) -> float:
    """Conservative gain lookup: the value at the componentwise-smallest
    grid point dominating the query.  Monotonicity makes this an upper
    bound on the true gain, so the epigraph approximation is inner."""
    if not samples.axes:
        return float(samples.values)
    y = np.atleast_1d(np.asarray(y_n_max, dtype=float)).ravel()
    # already in grid coordinates, or per-neighbor bounds needing the map
    point = y if y.size == len(samples.axes) else samples.query_point(y)
    idx = []
    for ax, v in zip(samples.axes, point):
        # ceiling with a 1e-9 snap so certification slack on sampled values
        # does not push an exact grid hit into the next cell
        k = int(np.searchsorted(ax, v - 1e-9, side="left"))
        if k >= ax.size:
            raise OutOfRange(f"query {v:.6g} above sampled max {ax[-1]:.6g}")
        idx.append(k)
    idx = tuple(idx)
    if samples.diverged[idx]:
        raise NoGuarantee(f"no finite guarantee at grid point {idx}")
    return float(samples.values[idx])


# ---------------------------------------------------------------------------
# Network-level contract objects
# ---------------------------------------------------------------------------

@dataclass
class ContractState:
    """A bound vector together with the invariant sets that realize it."""

    y_max: dict
    rci: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "y_max": {str(k): float(v) for k, v in self.y_max.items()},
            "rci": {str(k): r.to_dict() for k, r in self.rci.items()},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            y_max={int(k): float(v) for k, v in data["y_max"].items()},
            rci={int(k): RciResult.from_dict(r) for k, r in data.get("rci", {}).items()},
        )


def _neighbor_bounds(samples: GainSamples, y_max: dict):
    return np.array([y_max[j] for j in samples.neighbor_ids])


def sampled_gain_vector(samples_by_node: dict, y_max: dict) -> dict:
    """Apply the sampled gain map to a bound vector, node by node."""
    return {i: gain_upper(s, s.query_point(_neighbor_bounds(s, y_max)))
            for i, s in samples_by_node.items()}


def check_validity(y_max: dict, samples_by_node: dict = None,
                   nodes: dict = None, tol: float = 1e-9) -> bool:
    """Validity condition: the gain of the bound vector is at most the
    bound vector itself, elementwise within tol.

    Sampled mode reads the gain grids; exact mode re-runs the synthesis
    per node (slow, used for spot checks)."""
    if samples_by_node is not None:
        gains = sampled_gain_vector(samples_by_node, y_max)
    elif nodes is not None:
        gains = {}
        for i, node in nodes.items():
            y_n = np.array([y_max[j] for j in node.sys.neighbors])
            gains[i], _ = eval_gain(node, y_n)
    else:
        raise ValueError("provide samples_by_node or nodes")
    return all(gains[i] <= y_max[i] + tol for i in y_max)


def search_contract(samples_by_node: dict, max_iter: int = 200,
                    tol: float = 1e-9) -> ContractState:
    """Least fixed point of the sampled gain map by monotone iteration
    from below: y[0] = gain(0), y[k+1] = gain(y[k]).

    The iterates are elementwise nondecreasing and live on the finite set
    of sampled values, so the loop terminates either at a valid contract
    or by escaping the sampled domain (NoValidContract)."""
    y = {i: 0.0 for i in samples_by_node}
    for _ in range(max_iter):
        try:
            y_next = sampled_gain_vector(samples_by_node, y)
        except (OutOfRange, NoGuarantee) as exc:
            raise NoValidContract(
                f"fixed-point iteration escaped the sampled domain: {exc}",
                last_iterate=y) from exc
        if any(y_next[i] < y[i] - 1e-12 for i in y_next):
            raise AssertionError("gain iteration lost monotonicity")
        if all(y_next[i] <= y[i] + tol for i in y_next):
            rci = _final_rcis(samples_by_node, y_next)
            return ContractState(y_max=y_next, rci=rci)
        y = y_next
    raise NoValidContract("fixed-point iteration did not settle", last_iterate=y)


def _final_rcis(samples_by_node, y_max):
    """Invariant sets at the converged bound vector: the stored grid-point
    results at the ceiling lookup (the sets that realize the bounds)."""
    out = {}
    for i, s in samples_by_node.items():
        if not s.axes:
            out[i] = s.rci[()]
            continue
        point = s.query_point(_neighbor_bounds(s, y_max))
        idx = tuple(int(np.searchsorted(ax, v - 1e-9, side="left"))
                    for ax, v in zip(s.axes, point))
        out[i] = s.rci[idx]
    return out


# ---------------------------------------------------------------------------
# Generic parameterized-contract recursion and the small-gain closed form
# ---------------------------------------------------------------------------

@dataclass
class StlContract:
    """Parameterized assumption/guarantee templates with the maps between
    their parameter spaces: gain_map takes feedback-assumption parameters
    to guarantee parameters; feedback_map (default identity) turns
    guarantees back into next-round assumptions."""

    assumption_env: object = None
    assumption_fb: object = None
    guarantee: object = None
    gain_map: object = None
    feedback_map: object = None


def iterate_contract(contract: StlContract, p_af0, steps: int):
    """Unroll the contract recursion: p_g[k] = gain(p_af[k]),
    p_af[k+1] = feedback(p_g[k]).  Returns the guarantee parameters."""
    gamma = contract.feedback_map or (lambda p: p)
    p_af = p_af0
    out = []
    for _ in range(steps):
        p_g = contract.gain_map(p_af)
        out.append(p_g)
        p_af = gamma(p_g)
    return out


def small_gain_bounds(mu1, mu2, nu1, nu2, d1_norm, d2_norm):
    """Closed-form output bounds of two interconnected gains
    y1 <= mu1 d1 + nu1 y2, y2 <= mu2 d2 + nu2 y1 under nu1 nu2 < 1."""
    for v in (mu1, mu2, nu1, nu2, d1_norm, d2_norm):
        if v < 0:
            raise ValueError("all parameters must be nonnegative")
    loop = nu1 * nu2
    if loop >= 1:
        raise SmallGainViolated(f"loop gain {loop:g} >= 1")
    y1 = (mu1 * d1_norm + mu2 * nu1 * d2_norm) / (1.0 - loop)
    y2 = (mu1 * nu2 * d1_norm + mu2 * d2_norm) / (1.0 - loop)
    return y1, y2


# ---------------------------------------------------------------------------
# Coupled linear-network simulation under the certified policies
# ---------------------------------------------------------------------------

def simulate_linear_network(nodes: dict, contract: ContractState, steps: int,
                            rng, x0: dict = None, adversarial: bool = True):
    """Roll the coupled discrete network under each node's certifying
    affine policy, with exogenous and unmeasured disturbances drawn at
    their extremes (vertex signs) when adversarial.

    Returns {node: states array of shape (steps+1, nx)}.  This is the
    object the composition theorem speaks about: if the contract is valid,
    every state stays in its node's invariant set and every output within
    its bound."""
    ids = sorted(nodes)
    x = {}
    for i in ids:
        if x0 is not None:
            x[i] = np.asarray(x0[i], dtype=float).ravel().copy()
        else:
            # random point inside the invariant set, by rejection from its box
            poly = contract.rci[i].poly
            lo = np.array([-poly.support(-e) for e in np.eye(nodes[i].sys.nx)])
            hi = np.array([poly.support(e) for e in np.eye(nodes[i].sys.nx)])
            for _ in range(1000):
                cand = lo + (hi - lo) * rng.random(nodes[i].sys.nx)
                if poly.contains(cand, tol=0.0):
                    x[i] = cand
                    break
            else:
                x[i] = np.zeros(nodes[i].sys.nx)
    history = {i: np.empty((steps + 1, nodes[i].sys.nx)) for i in ids}
    for i in ids:
        history[i][0] = x[i]

    scales = {i: (coupling_scales(nodes[i].sys) if nodes[i].sys.n_coupling else np.zeros(0))
              for i in ids}
    for t in range(steps):
        y = {i: float(nodes[i].sys.c @ x[i]) for i in ids}
        x_new = {}
        for i in ids:
            node = nodes[i]
            sys = node.sys
            res = contract.rci[i]
            z_signed = float(np.sum([scales[i][k] * y[j] for k, j in enumerate(sys.neighbors)])) \
                if sys.n_coupling else None
            if adversarial:
                d = node.d_radius * rng.choice([-1.0, 1.0], size=node.d_radius.size)
                wu = node.w_u_base * rng.choice([-1.0, 1.0], size=node.w_u_base.size)
            else:
                d = node.d_radius * rng.uniform(-1, 1, size=node.d_radius.size)
                wu = node.w_u_base * rng.uniform(-1, 1, size=node.w_u_base.size)
            w_m = np.concatenate([[z_signed] if z_signed is not None else [], d])
            u = res.k_ff @ w_m + res.k_fb @ x[i] if sys.nu else np.zeros(0)
            coupling_term = sys.e1[:, :1] @ np.array([z_signed]) if sys.n_coupling else 0.0
            x_new[i] = sys.a @ x[i] + (sys.b @ u if sys.nu else 0.0) \
                + coupling_term + sys.e2 @ d + wu
        x = x_new
        for i in ids:
            history[i][t + 1] = x[i]
    return history
