"""Scenario pipeline: JSON configs in, synthesized artifacts and traces out.

A scenario bundles a network file, per-bus input/disturbance bounds,
template and sampling parameters, supervision settings, formula checks,
and a contingency schedule.  The functions here turn a config into
per-node synthesis inputs, run the contract search, build supervised
controllers for the nonlinear plant, and drive the contingency pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stl
from .cbf import BarrierFunction, supervise
from .contract import (
    ContractState,
    NodeSpec,
    coupling_scales,
    sample_gain_grid,
    search_contract,
)
from .grid import (
    Bus,
    ContingencyEvent,
    DroopController,
    GridNetwork,
    Line,
    StepView,
    Trace,
    _phi_integral,
    discretize,
    linearization_error_bound,
    linearize,
    new_operating_point,
    simulate,
)
from .polytope import Polytope
from .rci import fan_template
from .tube_mpc import (
    DelayStructure,
    ReferenceTrajectory,
    delay_structure,
    error_rci,
    frequency_halfwidth,
    lqr_gain,
    plan,
    track,
)


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


@dataclass
class ScenarioConfig:
    """Parsed scenario file; see configs/ieee9.json for the layout."""

    network: dict
    bounds: dict
    synthesis: dict
    simulation: dict
    formulas: list
    mpc: dict
    events: list
    seed: int
    path: Path | None = None

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        with open(path) as fh:
            raw = json.load(fh)
        network = raw.get("network")
        if isinstance(network, str):
            net_path = (path.parent / network).resolve()
            if not net_path.exists():
                raise ConfigError(f"network file {net_path} does not exist")
            with open(net_path) as fh:
                network = json.load(fh)
        if network is None:
            raise ConfigError("scenario needs a network section or file reference")
        cfg = cls(
            network=network,
            bounds=raw.get("bounds", {}),
            synthesis=raw.get("synthesis", {}),
            simulation=raw.get("simulation", {}),
            formulas=raw.get("formulas", []),
            mpc=raw.get("mpc", {}),
            events=raw.get("events", []),
            seed=int(raw.get("seed", 0)),
            path=path,
        )
        cfg.validate()
        return cfg

    def validate(self):
        if float(self.network.get("omega_max", 0.0)) <= 0:
            raise ConfigError("omega_max must be positive")
        for ev in self.events:
            if ev.get("kind") not in ("bus_loss", "line_trip", "injection_step"):
                raise ConfigError(f"unknown event kind {ev.get('kind')!r}")
        for text in self.formulas:
            stl.parse(text)  # raises ValueError on malformed formulas

    def per_bus(self, section: str, key: str, bus: int, default=None):
        table = self.bounds.get(section, {}) if section else self.bounds
        table = table if isinstance(table, dict) else {}
        if str(bus) in table:
            return table[str(bus)]
        if "default" in table:
            return table["default"]
        if default is None:
            raise ConfigError(f"no value for {section or key}[{bus}] and no default")
        return default


def build_network(cfg: ScenarioConfig) -> GridNetwork:
    buses = []
    for spec in cfg.network["buses"]:
        buses.append(Bus(
            index=int(spec["index"]), kind=spec["kind"],
            damping=float(spec["damping"]),
            inertia=float(spec.get("inertia", 0.0)),
            voltage=float(spec.get("voltage", 1.0)),
            p_in=float(spec.get("p_in", 0.0)),
            load=float(spec.get("load", 0.0)),
        ))
    lines = [Line(int(ln["i"]), int(ln["j"]), float(ln["reactance"]))
             for ln in cfg.network["lines"]]
    net = GridNetwork(buses, lines, omega_max=float(cfg.network["omega_max"]))
    theta0 = cfg.network.get("theta0")
    if theta0:
        net.rebalance_from_angles({int(k): float(v) for k, v in theta0.items()})
    return net


def rate_bounds(net: GridNetwork, cfg: ScenarioConfig) -> dict:
    """Per-bus bound on how fast the angle deviation can move, used for
    inter-sample drift and measurement-staleness budgets.  Generators are
    capped by the frequency bound; loads by worst-case power over damping
    with angles inside the sampled contract domain."""
    axis_max = float(cfg.synthesis.get("axis_max", 0.1))
    rates = {}
    for i in net.bus_ids:
        bus = net.buses[i]
        if bus.kind == "generator":
            rates[i] = net.omega_max
        else:
            u_max = float(cfg.per_bus("u_max", "u_max", i))
            d_max = float(cfg.per_bus("d_max", "d_max", i))
            flow = sum(net.stiffness(i, j) * 2.0 * axis_max for j in net.neighbors(i))
            rates[i] = (d_max + u_max + flow) / bus.damping
    return rates


def build_nodes(net: GridNetwork, cfg: ScenarioConfig, systems_d: dict = None) -> dict:
    """Per-bus synthesis inputs from the scenario bounds.

    The unmeasured budget collects the linearization error over the
    sampled angle domain plus the intra-step drift of the sinusoidal
    disturbance; staleness of the neighbor measurements over one sampling
    interval is handled by the per-node delay loop (tau = ts), and the
    inter-sample drift of the coupling itself by the coupling pad."""
    syn = cfg.synthesis
    ts = float(cfg.simulation.get("ts", 0.05))
    axis_max = float(syn.get("axis_max", 0.1))
    fan_rows = int(syn.get("fan_rows", 8))
    q0_scale = float(syn.get("q0", 1e-3))
    eps = float(syn.get("eps", 1e-6))
    wu_margin = float(syn.get("wu_margin", 0.0))

    systems_c = linearize(net)
    if systems_d is None:
        systems_d = {i: discretize(s, ts) for i, s in systems_c.items()}
    lin_err = linearization_error_bound(net, 2.0 * axis_max)
    rates = rate_bounds(net, cfg)

    nodes = {}
    for i in net.bus_ids:
        sys_d = systems_d[i]
        bus = net.buses[i]
        u_max = float(cfg.per_bus("u_max", "u_max", i))
        d_max = float(cfg.per_bus("d_max", "d_max", i))
        freq_hz = float(cfg.simulation.get("disturbance_hz", 0.2))
        d_drift = d_max * 2 * np.pi * freq_hz * ts

        p_mat, cap_rows = fan_template(sys_d.nx, fan_rows)
        caps = None
        if bus.kind == "generator":
            # dedicated +/- angle rows: capping them forces the one-step LP
            # to keep gains that actually recentre the angle (the greedy
            # objective otherwise trades a neutral angle drift for smaller
            # frequency rows today)
            theta_cap = float(syn.get("theta_cap", 0.9 * axis_max))
            p_mat = np.vstack([p_mat, [[1.0, 0.0]], [[-1.0, 0.0]]])
            caps = np.full(p_mat.shape[0], np.inf)
            caps[list(cap_rows)] = net.omega_max
            caps[-2:] = theta_cap

        # the continuous-time mismatch bound enters the discrete model
        # through the ZOH integral, like any held input channel
        phi = _phi_integral(systems_c[i].a, ts)
        lin_step = np.abs(phi) @ lin_err[i]
        w_u = (1.0 + wu_margin) * lin_step + np.abs(sys_d.e2[:, 0]) * d_drift
        if sys_d.n_coupling:
            scales = coupling_scales(sys_d)
            pad = float(np.sum([scales[k] * rates[j] * ts
                                for k, j in enumerate(sys_d.neighbors)]))
            rate = max(rates[j] for j in sys_d.neighbors)
        else:
            pad = 0.0
            rate = 0.0
        nodes[i] = NodeSpec(
            sys=sys_d,
            d_radius=[d_max],
            u_set=Polytope.box(u_max, dim=1),
            w_u_base=w_u,
            p_mat=p_mat,
            q0=q0_scale * np.ones(p_mat.shape[0]),
            state_caps=caps,
            eps=eps,
            tau=ts * float(syn.get("staleness_steps", 1.0)),
            rate_bound=rate,
            coupling_pad=pad,
        )
    return nodes


def synthesize_contract(nodes: dict, cfg: ScenarioConfig):
    """Epigraph sampling for every node, then the fixed-point search."""
    syn = cfg.synthesis
    axis_max = float(syn.get("axis_max", 0.1))
    points = int(syn.get("points_per_axis", 9))
    samples = {i: sample_gain_grid(nodes[i], node_id=i, axis_max=axis_max,
                                   points_per_axis=points)
               for i in sorted(nodes)}
    contract = search_contract(samples)
    return samples, contract


class SupervisedController:
    """Barrier supervision wrapped around the droop legacy law for one bus."""

    def __init__(self, bus_id, sys_d, rci, legacy: DroopController,
                 u_set: Polytope, w_u_max, alpha, scales, neighbors):
        self.bus_id = bus_id
        self.sys_d = sys_d          # combined-coupling discrete model
        self.barrier = BarrierFunction(rci.poly, alpha=alpha)
        self.legacy_ctrl = legacy
        self.u_set = u_set
        self.w_u_max = w_u_max
        self.scales = scales
        self.neighbors = neighbors

    def state(self, view: StepView):
        if self.bus_id in view.omega:
            return np.array([view.delta_theta(self.bus_id), view.omega[self.bus_id]])
        return np.array([view.delta_theta(self.bus_id)])

    def measured(self, view: StepView):
        z = float(np.sum([self.scales[k] * view.delta_theta(j)
                          for k, j in enumerate(self.neighbors)])) if len(self.neighbors) else None
        d = view.d[self.bus_id]
        return np.array(([z] if z is not None else []) + [d])

    def __call__(self, view: StepView):
        u0 = self.legacy_ctrl.legacy(view)
        u = supervise(self.barrier, self.sys_d, self.state(view),
                      self.measured(view), [u0], self.u_set, self.w_u_max)
        return float(u[0]), u0


def build_supervisors(net: GridNetwork, nodes: dict, contract: ContractState,
                      cfg: ScenarioConfig) -> dict:
    """One supervised controller per bus, certifying the contract's sets.

    The configured barrier decay alpha is validated per node: if the
    supervisory QP is not feasible everywhere inside the set at that
    alpha, it is halved until it is (alpha = 0 is always valid for an
    exactly invariant set)."""
    alpha_cfg = float(cfg.synthesis.get("alpha", 0.5))
    ts = float(cfg.simulation.get("ts", 0.05))
    controllers = {}
    for i in net.bus_ids:
        node = nodes[i]
        sys_d = node.sys
        if sys_d.n_coupling > 1:
            from .contract import _combined_system
            sys_run, scales = _combined_system(node)
        else:
            sys_run = sys_d
            scales = coupling_scales(sys_d) if sys_d.n_coupling else np.zeros(0)
        res = contract.rci[i]
        legacy = DroopController(
            i, net.buses[i].kind,
            kp=float(cfg.per_bus("legacy_kp", "kp", i, default=1.0)),
            ki=float(cfg.per_bus("legacy_ki", "ki", i, default=0.2)),
            u_max=float(cfg.per_bus("u_max", "u_max", i)),
            ts=ts,
        )
        z_max = float(np.sum([scales[k] * contract.y_max[j]
                              for k, j in enumerate(sys_d.neighbors)])) + node.coupling_pad
        alpha = alpha_cfg
        while alpha > 1e-3 and not _alpha_feasible(sys_run, res, node, alpha, z_max):
            alpha *= 0.5
        if alpha <= 1e-3:
            alpha = 0.0
        controllers[i] = SupervisedController(
            i, sys_run, res, legacy, node.u_set,
            node.w_u_base, alpha, scales, sys_d.neighbors,
        )
    return controllers


def _alpha_feasible(sys_d, res, node: NodeSpec, alpha, coupling_radius,
                    n_samples=60) -> bool:
    """Spot-check supervisory feasibility at the barrier decay alpha."""
    from .cbf import SupervisionInfeasible

    bar = BarrierFunction(res.poly, alpha=alpha)
    rng = np.random.default_rng(12345)
    nx = sys_d.nx
    lo = np.array([-res.poly.support(-e) for e in np.eye(nx)])
    hi = np.array([res.poly.support(e) for e in np.eye(nx)])
    radii = np.concatenate([[coupling_radius], node.d_radius]) \
        if sys_d.n_coupling else node.d_radius
    done = 0
    tries = 0
    while done < n_samples and tries < 40 * n_samples:
        tries += 1
        x = lo + (hi - lo) * rng.random(nx)
        if bar.value(x) < 0:
            continue
        done += 1
        w = radii * rng.choice([-1.0, 1.0], size=radii.size)
        try:
            supervise(bar, sys_d, x, w, np.zeros(sys_d.nu), node.u_set, node.w_u_base)
        except SupervisionInfeasible:
            return False
    return True


def sinusoid_disturbances(net: GridNetwork, cfg: ScenarioConfig, rng,
                          amplitude_scale: float = 1.0) -> dict:
    """Per-bus sinusoidal net-power deviations at the configured bounds."""
    freq_hz = float(cfg.simulation.get("disturbance_hz", 0.2))
    omega = 2 * np.pi * freq_hz
    out = {}
    for i in net.bus_ids:
        amp = amplitude_scale * float(cfg.per_bus("d_max", "d_max", i))
        phase = float(rng.uniform(0, 2 * np.pi))

        def gen(t, amp=amp, phase=phase):
            return amp * np.sin(omega * t + phase)

        out[i] = gen
    return out


def evaluate_formulas(trace: Trace, formulas: list) -> dict:
    """Boolean verdict (or 'insufficient-horizon') per configured formula."""
    st = SampledTraceFromTrace(trace)
    verdicts = {}
    for text in formulas:
        f = stl.parse(text)
        try:
            verdicts[text] = bool(stl.evaluate(f, st, 0))
        except stl.InsufficientHorizon:
            verdicts[text] = "insufficient-horizon"
    return verdicts


def SampledTraceFromTrace(trace: Trace) -> stl.SampledTrace:
    return stl.SampledTrace(trace.timestamps, trace.channels())
