"""Reduced-order power-network plant.

Generators are second-order swing models, loads first-order (the algebraic
load balance integrated as D_i * dtheta/dt = RHS so the plant stays an
ODE), coupled through sinusoidal line flows.  The module provides the
nonlinear simulation, per-bus linearization about an operating point,
exact ZOH discretization, a droop/integral legacy controller, the
linearization-error bound that feeds the disturbance budget, and the DC
rebalance that replaces a full OPF after contingencies.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .rci import LinearSubsystem


class NotAnEquilibrium(ValueError):
    """Power balance residual at the operating point exceeds tolerance."""


class Singular(RuntimeError):
    """An island without generators cannot be rebalanced."""


@dataclass
class Bus:
    index: int
    kind: str                 # 'generator' | 'load'
    damping: float
    inertia: float = 0.0      # generators only
    voltage: float = 1.0
    p_in: float = 0.0         # nominal injection
    load: float = 0.0         # uncontrollable load r_i

    def __post_init__(self):
        if self.kind not in ("generator", "load"):
            raise ValueError(f"bus {self.index}: unknown kind {self.kind!r}")
        if self.kind == "generator" and self.inertia <= 0:
            raise ValueError(f"generator bus {self.index} needs positive inertia")
        if self.damping <= 0:
            raise ValueError(f"bus {self.index} needs positive damping")


@dataclass
class Line:
    i: int
    j: int
    reactance: float

    def __post_init__(self):
        if self.reactance <= 0:
            raise ValueError(f"line {self.i}-{self.j} needs positive reactance")

    @property
    def key(self):
        return (min(self.i, self.j), max(self.i, self.j))


@dataclass
class ContingencyEvent:
    time: float
    kind: str                 # 'bus_loss' | 'line_trip' | 'injection_step'
    bus: int | None = None
    line: tuple | None = None
    delta_p: float = 0.0

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("event time must be nonnegative")
        if self.kind not in ("bus_loss", "line_trip", "injection_step"):
            raise ValueError(f"unknown event kind {self.kind!r}")


class GridNetwork:
    """Bus/line graph with physical parameters and an operating point."""

    def __init__(self, buses, lines, omega_max, theta0=None):
        self.buses = {b.index: b for b in buses}
        if len(self.buses) != len(buses):
            raise ValueError("duplicate bus indices")
        self.lines = []
        seen = set()
        for ln in lines:
            if ln.i not in self.buses or ln.j not in self.buses:
                raise ValueError(f"line {ln.i}-{ln.j} references a missing bus")
            if ln.key in seen:
                raise ValueError(f"duplicate line {ln.key}")
            seen.add(ln.key)
            self.lines.append(ln)
        self.omega_max = float(omega_max)
        if self.omega_max <= 0:
            raise ValueError("omega_max must be positive")
        ids = self.bus_ids
        self.theta0 = {i: 0.0 for i in ids} if theta0 is None else dict(theta0)

    @property
    def bus_ids(self):
        return sorted(self.buses)

    @property
    def generator_ids(self):
        return [i for i in self.bus_ids if self.buses[i].kind == "generator"]

    @property
    def load_ids(self):
        return [i for i in self.bus_ids if self.buses[i].kind == "load"]

    def neighbors(self, i):
        out = set()
        for ln in self.lines:
            if ln.i == i:
                out.add(ln.j)
            elif ln.j == i:
                out.add(ln.i)
        return sorted(out)

    def line_between(self, i, j):
        for ln in self.lines:
            if ln.key == (min(i, j), max(i, j)):
                return ln
        return None

    def stiffness(self, i, j, theta=None):
        """Flow sensitivity V_i V_j / X_ij * cos(theta_i - theta_j)."""
        ln = self.line_between(i, j)
        if ln is None:
            raise ValueError(f"no line between {i} and {j}")
        th = self.theta0 if theta is None else theta
        vv = self.buses[i].voltage * self.buses[j].voltage / ln.reactance
        return vv * np.cos(th[i] - th[j])

    def flow(self, i, j, theta):
        ln = self.line_between(i, j)
        vv = self.buses[i].voltage * self.buses[j].voltage / ln.reactance
        return vv * np.sin(theta[i] - theta[j])

    def balance_residual(self, theta=None):
        """Per-bus net power at rest: p_in - load - sum of line flows."""
        th = self.theta0 if theta is None else theta
        res = {}
        for i in self.bus_ids:
            flows = sum(self.flow(i, j, th) for j in self.neighbors(i))
            res[i] = self.buses[i].p_in - self.buses[i].load - flows
        return res

    def rebalance_from_angles(self, theta0):
        """Set injections so theta0 is an exact equilibrium of the sine model."""
        self.theta0 = dict(theta0)
        for i in self.bus_ids:
            flows = sum(self.flow(i, j, self.theta0) for j in self.neighbors(i))
            self.buses[i].p_in = self.buses[i].load + flows

    def islands(self):
        """Connected components of the current bus/line graph."""
        remaining = set(self.bus_ids)
        comps = []
        while remaining:
            seed = min(remaining)
            comp, queue = {seed}, [seed]
            while queue:
                i = queue.pop()
                for j in self.neighbors(i):
                    if j in remaining - comp:
                        comp.add(j)
                        queue.append(j)
            comps.append(sorted(comp))
            remaining -= comp
        return comps

    def is_connected(self):
        return len(self.islands()) <= 1

    def copy(self):
        return copy.deepcopy(self)

    def apply_event(self, event: ContingencyEvent):
        if event.kind == "bus_loss":
            if event.bus not in self.buses:
                raise ValueError(f"bus {event.bus} not in network")
            del self.buses[event.bus]
            self.lines = [ln for ln in self.lines if event.bus not in (ln.i, ln.j)]
            self.theta0.pop(event.bus, None)
        elif event.kind == "line_trip":
            i, j = event.line
            ln = self.line_between(i, j)
            if ln is None:
                raise ValueError(f"no line between {i} and {j}")
            self.lines.remove(ln)
        else:
            if event.bus not in self.buses:
                raise ValueError(f"bus {event.bus} not in network")
            self.buses[event.bus].p_in += event.delta_p


# ---------------------------------------------------------------------------
# Linearization and discretization
# ---------------------------------------------------------------------------

def linearize(net: GridNetwork, theta0=None, balance_tol=1e-6):
    """Continuous-time per-bus models about the operating point.

    Generators: 2-state (angle deviation, frequency); loads: 1-state.
    Coupling columns act on neighbor angle deviations; the exogenous
    column carries net power deviations scaled by 1/M (1/D for loads).
    """
    th = net.theta0 if theta0 is None else dict(theta0)
    residual = net.balance_residual(th)
    worst = max(abs(v) for v in residual.values())
    if worst > balance_tol:
        raise NotAnEquilibrium(f"balance residual {worst:.3e} exceeds {balance_tol:g}")

    systems = {}
    for i in net.bus_ids:
        bus = net.buses[i]
        nbrs = net.neighbors(i)
        b_sum = sum(net.stiffness(i, j, th) for j in nbrs)
        if bus.kind == "generator":
            m = bus.inertia
            a = np.array([[0.0, 1.0], [-b_sum / m, -bus.damping / m]])
            b = np.array([[0.0], [-1.0 / m]])
            e1 = np.array([[0.0] * len(nbrs),
                           [net.stiffness(i, j, th) / m for j in nbrs]])
            e2 = np.array([[0.0], [1.0 / m]])
            c = np.array([1.0, 0.0])
        else:
            d = bus.damping
            a = np.array([[-b_sum / d]])
            b = np.array([[-1.0 / d]])
            e1 = np.array([[net.stiffness(i, j, th) / d for j in nbrs]])
            e2 = np.array([[1.0 / d]])
            c = np.array([1.0])
        systems[i] = LinearSubsystem(a=a, b=b, e1=e1, e2=e2, c=c, ts=1.0,
                                     neighbors=tuple(nbrs), name=f"bus{i}")
    return systems


def _phi_integral(a, ts, tol=1e-12):
    """Phi = integral_0^ts exp(a s) ds by a truncated series with
    scaling-and-squaring (doubling) for robustness."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    nrm = np.linalg.norm(a, ord=np.inf) * ts
    s = max(0, int(np.ceil(np.log2(nrm / 0.5)))) if nrm > 0.5 else 0
    h = ts / (2 ** s)
    term = np.eye(n) * h
    phi = term.copy()
    k = 1
    while np.linalg.norm(term, ord=np.inf) > tol * max(1.0, np.linalg.norm(phi, ord=np.inf)):
        term = term @ a * h / (k + 1)
        phi = phi + term
        k += 1
        if k > 200:
            break
    for _ in range(s):
        expm_h = np.eye(n) + a @ phi
        phi = phi + expm_h @ phi
    return phi


def discretize(sys: LinearSubsystem, ts: float) -> LinearSubsystem:
    """Exact zero-order-hold discretization of a continuous subsystem."""
    if ts <= 0:
        raise ValueError("ts must be positive")
    phi = _phi_integral(sys.a, ts)
    a_d = np.eye(sys.nx) + sys.a @ phi
    return LinearSubsystem(
        a=a_d, b=phi @ sys.b, e1=phi @ sys.e1, e2=phi @ sys.e2,
        c=sys.c, ts=ts, neighbors=sys.neighbors, name=sys.name,
    )


def assemble_network(systems: dict, discrete: bool = False):
    """Couple per-bus models into one network system.

    Returns (a, b, e2, index): the stacked state matrix with coupling
    columns folded onto neighbor angle entries, input and exogenous
    matrices with one column per bus, and `index` mapping bus id to its
    state slice.  With discrete=True the per-node matrices are taken as
    ZOH models and the coupling acts on the neighbor angle held over the
    step, which is the information pattern the synthesis assumes.
    """
    ids = sorted(systems)
    offsets = {}
    pos = 0
    for i in ids:
        offsets[i] = slice(pos, pos + systems[i].nx)
        pos += systems[i].nx
    n = pos
    a = np.zeros((n, n))
    b = np.zeros((n, len(ids)))
    e2 = np.zeros((n, len(ids)))
    for col, i in enumerate(ids):
        s = systems[i]
        a[offsets[i], offsets[i]] = s.a
        for k, j in enumerate(s.neighbors):
            # neighbor output is its angle deviation: first state entry
            a[offsets[i], offsets[j].start] += s.e1[:, k]
        b[offsets[i], col] = s.b[:, 0] if s.nu else 0.0
        e2[offsets[i], col] = s.e2[:, 0] if s.n_exo else 0.0
    return a, b, e2, offsets


# ---------------------------------------------------------------------------
# Nonlinear simulation
# ---------------------------------------------------------------------------

@dataclass
class StepView:
    """Per-sample measurement snapshot handed to bus controllers."""
    t: float
    k: int
    theta: dict
    omega: dict
    theta_ref: dict
    d: dict

    def delta_theta(self, i):
        return self.theta[i] - self.theta_ref[i]


@dataclass
class Trace:
    """Sampled simulation record; uniform sampling, one row per sample."""
    timestamps: np.ndarray
    theta: dict
    omega: dict
    u_legacy: dict
    u_applied: dict
    d: dict
    theta_ref: dict
    events: list = field(default_factory=list)
    islanded: bool = False

    def channels(self):
        chans = {}
        for i, v in self.theta.items():
            chans[f"theta_{i}"] = v
        for i, v in self.omega.items():
            chans[f"omega_{i}"] = v
        for i in self.theta:
            chans[f"dtheta_{i}"] = self.theta[i] - self.theta_ref[i]
        return chans

    def write_csv(self, path):
        ids = sorted(self.theta)
        gen_ids = sorted(self.omega)
        header = ["t"]
        header += [f"theta_{i}" for i in ids]
        header += [f"omega_{i}" for i in gen_ids]
        header += [f"u0_{i}" for i in ids]
        header += [f"u_{i}" for i in ids]
        header += [f"d_{i}" for i in ids]
        header += ["event"]
        marks = {round(t / (self.timestamps[1] - self.timestamps[0])): desc
                 for t, desc in self.events}
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for k, t in enumerate(self.timestamps):
                row = [f"{t:.17g}"]
                row += [f"{self.theta[i][k]:.17g}" for i in ids]
                row += [f"{self.omega[i][k]:.17g}" for i in gen_ids]
                row += [f"{self.u_legacy[i][k]:.17g}" for i in ids]
                row += [f"{self.u_applied[i][k]:.17g}" for i in ids]
                row += [f"{self.d[i][k]:.17g}" for i in ids]
                row.append(marks.get(k, ""))
                fh.write(",".join(row) + "\n")


def _rhs(net, theta, omega, u, d):
    """Time derivative of (theta, omega) given held inputs."""
    dtheta = {}
    domega = {}
    for i in net.bus_ids:
        bus = net.buses[i]
        flows = sum(net.flow(i, j, theta) for j in net.neighbors(i))
        power = bus.p_in + d[i] - bus.load - u[i] - flows
        if bus.kind == "generator":
            dtheta[i] = omega[i]
            domega[i] = (power - bus.damping * omega[i]) / bus.inertia
        else:
            dtheta[i] = power / bus.damping
    return dtheta, domega


def simulate(net: GridNetwork, controllers, disturbances, events, t_end, ts,
             substeps: int = 10, on_event=None) -> Trace:
    """Fixed-step RK4 integration of the swing model, sampled at ts.

    Controllers map bus id to a callable StepView -> (u_applied, u_legacy)
    and are sampled-and-held at ts; disturbances map bus id to a callable
    t -> net power deviation, evaluated continuously inside the
    integrator.  Events mutate a private copy of the network at their
    scheduled times; `on_event(net, event, view)` lets the caller retarget
    controllers after a topology change.
    """
    net = net.copy()
    events = sorted(events, key=lambda e: e.time)
    n_steps = int(round(t_end / ts))
    h = ts / substeps

    theta = {i: float(net.theta0[i]) for i in net.bus_ids}
    omega = {i: 0.0 for i in net.generator_ids}

    all_ids = net.bus_ids
    rec = {
        "theta": {i: np.full(n_steps + 1, np.nan) for i in all_ids},
        "omega": {i: np.full(n_steps + 1, np.nan) for i in net.generator_ids},
        "u0": {i: np.zeros(n_steps + 1) for i in all_ids},
        "u": {i: np.zeros(n_steps + 1) for i in all_ids},
        "d": {i: np.zeros(n_steps + 1) for i in all_ids},
        "ref": {i: np.full(n_steps + 1, np.nan) for i in all_ids},
    }
    trace_events = []
    islanded = False
    pending = list(events)

    for k in range(n_steps + 1):
        t = k * ts
        while pending and pending[0].time <= t + 1e-12:
            ev = pending.pop(0)
            net.apply_event(ev)
            theta = {i: theta[i] for i in net.bus_ids}
            omega = {i: omega[i] for i in net.generator_ids}
            desc = ev.kind + (f"_{ev.bus}" if ev.bus is not None else "") + \
                (f"_{ev.line[0]}_{ev.line[1]}" if ev.line is not None else "")
            trace_events.append((t, desc))
            if not net.is_connected():
                islanded = True
            if on_event is not None:
                view = StepView(t, k, dict(theta), dict(omega), dict(net.theta0),
                                {i: disturbances.get(i, _zero)(t) for i in net.bus_ids})
                on_event(net, ev, view)

        d_now = {i: disturbances.get(i, _zero)(t) for i in net.bus_ids}
        view = StepView(t, k, dict(theta), dict(omega), dict(net.theta0), d_now)
        u_app, u_leg = {}, {}
        for i in net.bus_ids:
            ctrl = controllers.get(i)
            if ctrl is None:
                u_app[i] = u_leg[i] = 0.0
            else:
                ua, ul = ctrl(view)
                u_app[i], u_leg[i] = float(ua), float(ul)

        for i in net.bus_ids:
            rec["theta"][i][k] = theta[i]
            rec["u0"][i][k] = u_leg[i]
            rec["u"][i][k] = u_app[i]
            rec["d"][i][k] = d_now[i]
            rec["ref"][i][k] = net.theta0[i]
        for i in net.generator_ids:
            rec["omega"][i][k] = omega[i]

        if k == n_steps:
            break

        # RK4 on the current topology with u held, d(t) continuous
        for s in range(substeps):
            t_sub = t + s * h

            def deriv(th, om, tau):
                d_sub = {i: disturbances.get(i, _zero)(tau) for i in net.bus_ids}
                return _rhs(net, th, om, u_app, d_sub)

            k1t, k1o = deriv(theta, omega, t_sub)
            th2 = {i: theta[i] + 0.5 * h * k1t[i] for i in theta}
            om2 = {i: omega[i] + 0.5 * h * k1o[i] for i in omega}
            k2t, k2o = deriv(th2, om2, t_sub + 0.5 * h)
            th3 = {i: theta[i] + 0.5 * h * k2t[i] for i in theta}
            om3 = {i: omega[i] + 0.5 * h * k2o[i] for i in omega}
            k3t, k3o = deriv(th3, om3, t_sub + 0.5 * h)
            th4 = {i: theta[i] + h * k3t[i] for i in theta}
            om4 = {i: omega[i] + h * k3o[i] for i in omega}
            k4t, k4o = deriv(th4, om4, t_sub + h)
            theta = {i: theta[i] + h / 6 * (k1t[i] + 2 * k2t[i] + 2 * k3t[i] + k4t[i])
                     for i in theta}
            omega = {i: omega[i] + h / 6 * (k1o[i] + 2 * k2o[i] + 2 * k3o[i] + k4o[i])
                     for i in omega}

    return Trace(
        timestamps=np.arange(n_steps + 1) * ts,
        theta=rec["theta"], omega=rec["omega"],
        u_legacy=rec["u0"], u_applied=rec["u"], d=rec["d"],
        theta_ref=rec["ref"], events=trace_events, islanded=islanded,
    )


def _zero(_t):
    return 0.0


# ---------------------------------------------------------------------------
# Legacy controller
# ---------------------------------------------------------------------------

class DroopController:
    """Droop-plus-integral frequency feedback for generators, proportional
    angle feedback for loads, saturated to the input set."""

    def __init__(self, bus_id, kind, kp, ki=0.0, u_max=np.inf, ts=0.05):
        self.bus_id = bus_id
        self.kind = kind
        self.kp = kp
        self.ki = ki
        self.u_max = u_max
        self.ts = ts
        self.integral = 0.0

    def legacy(self, view: StepView) -> float:
        if self.kind == "generator":
            w = view.omega[self.bus_id]
            u0 = self.kp * w + self.ki * self.integral
            self.integral += w * self.ts
        else:
            u0 = self.kp * view.delta_theta(self.bus_id)
        return float(np.clip(u0, -self.u_max, self.u_max))

    def reset(self):
        self.integral = 0.0

    def __call__(self, view: StepView):
        u0 = self.legacy(view)
        return u0, u0


# ---------------------------------------------------------------------------
# Linearization error and post-contingency operating point
# ---------------------------------------------------------------------------

def sine_linearization_error(theta0: float, dev: float, points: int = 10_000) -> float:
    """max |sin(theta0 + delta) - sin(theta0) - cos(theta0) delta| over
    |delta| <= dev, by a dense scan."""
    if dev == 0:
        return 0.0
    delta = np.linspace(-dev, dev, points)
    err = np.sin(theta0 + delta) - np.sin(theta0) - np.cos(theta0) * delta
    return float(np.max(np.abs(err)))


def linearization_error_bound(net: GridNetwork, theta_dev_max, theta=None):
    """Per-bus acceleration bound from replacing line sines by their
    tangents, for angle-difference excursions up to theta_dev_max.

    theta_dev_max: scalar bound on every line's angle-difference deviation,
    or a dict keyed by line.key.  Returns {bus: n-vector} in the state
    coordinates of the linearized subsystem (error enters the frequency
    row for generators, the angle row for loads).
    """
    th = net.theta0 if theta is None else dict(theta)
    out = {}
    for i in net.bus_ids:
        bus = net.buses[i]
        total = 0.0
        for j in net.neighbors(i):
            ln = net.line_between(i, j)
            dev = theta_dev_max[ln.key] if isinstance(theta_dev_max, dict) else float(theta_dev_max)
            vv = bus.voltage * net.buses[j].voltage / ln.reactance
            total += vv * sine_linearization_error(th[i] - th[j], dev)
        if bus.kind == "generator":
            out[i] = np.array([0.0, total / bus.inertia])
        else:
            out[i] = np.array([total / bus.damping])
    return out


def new_operating_point(net: GridNetwork):
    """Post-contingency angles from a DC power-flow rebalance.

    The net imbalance of each island is absorbed by its generators in
    proportion to inertia, then the island's DC system (line stiffnesses
    V_i V_j / X_ij) is solved with its lowest-indexed bus as the angle
    reference.  Returns (theta_star, injections).
    """
    theta_star = {}
    injections = {i: net.buses[i].p_in for i in net.bus_ids}
    for island in net.islands():
        gens = [i for i in island if net.buses[i].kind == "generator"]
        if not gens:
            raise Singular(f"island {island} has no generator to absorb imbalance")
        imbalance = sum(net.buses[i].p_in - net.buses[i].load for i in island)
        m_total = sum(net.buses[i].inertia for i in gens)
        for i in gens:
            injections[i] -= imbalance * net.buses[i].inertia / m_total

        idx = {b: k for k, b in enumerate(island)}
        n = len(island)
        lap = np.zeros((n, n))
        for ln in net.lines:
            if ln.i in idx and ln.j in idx:
                w = net.buses[ln.i].voltage * net.buses[ln.j].voltage / ln.reactance
                a, b = idx[ln.i], idx[ln.j]
                lap[a, a] += w
                lap[b, b] += w
                lap[a, b] -= w
                lap[b, a] -= w
        p = np.array([injections[i] - net.buses[i].load for i in island])
        ref = 0  # lowest-indexed bus of the island
        keep = [k for k in range(n) if k != ref]
        if keep:
            sol = np.linalg.solve(lap[np.ix_(keep, keep)], p[keep])
            full = np.zeros(n)
            full[keep] = sol
        else:
            full = np.zeros(n)
        resid = lap @ full - p
        if np.max(np.abs(resid)) > 1e-9:
            raise Singular(f"DC solve residual {np.max(np.abs(resid)):.3e} on island {island}")
        for b, k in idx.items():
            theta_star[b] = float(full[k])
    return theta_star, injections


def damped_energy(net: GridNetwork, theta, omega):
    """Storage function: kinetic + line potential - injection work.
    Nonincreasing along unforced, uncontrolled trajectories."""
    kin = sum(0.5 * net.buses[i].inertia * omega[i] ** 2 for i in net.generator_ids)
    pot = 0.0
    for ln in net.lines:
        vv = net.buses[ln.i].voltage * net.buses[ln.j].voltage / ln.reactance
        pot += vv * (1.0 - np.cos(theta[ln.i] - theta[ln.j]))
    work = sum((net.buses[i].p_in - net.buses[i].load) * theta[i] for i in net.bus_ids)
    return kin + pot - work
