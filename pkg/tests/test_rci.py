"""Invariant-set synthesis tests: hand-dualized one-step cases, fixed
points, sampling-based invariance, monotonicity, and the delay bound."""

import numpy as np
import pytest

from gridsafe.optim import Infeasible
from gridsafe.polytope import Polytope
from gridsafe.rci import (
    DisturbanceSpec,
    Diverged,
    LinearSubsystem,
    compute_mrci,
    compute_mrci_with_delay,
    delay_disturbance_bound,
    fan_template,
    one_step_propagate,
)

from oracles import max_invariance_violation


P1 = np.array([[1.0], [-1.0]])


def scalar_system(a, b=0.0, e2=1.0):
    return LinearSubsystem(
        a=[[a]], b=np.array([[b]]) if b else np.zeros((1, 0)),
        e1=np.zeros((1, 0)), e2=[[e2]], c=[1.0], ts=1.0,
    )


def box_spec(w_radius, u_radius=None, wu=0.0, nw=1):
    return DisturbanceSpec(
        w_measured=Polytope.box(w_radius, dim=nw),
        w_u_max=[wu],
        u_set=Polytope.box(u_radius, dim=1) if u_radius is not None else None,
    )


def planar_system():
    """2-D node with one coupled neighbor, one exogenous channel."""
    return LinearSubsystem(
        a=[[0.9, 0.1], [-0.2, 0.8]],
        b=[[0.0], [0.1]],
        e1=[[0.0], [0.05]],
        e2=[[0.0], [0.1]],
        c=[1.0, 0.0],
        ts=0.1,
        neighbors=(1,),
    )


def planar_spec():
    return DisturbanceSpec(
        w_measured=Polytope.from_bounds([-0.5, -0.2], [0.5, 0.2]),
        w_u_max=[1e-3, 1e-3],
        u_set=Polytope.box(1.0, dim=1),
    )


class TestOneStep:
    def test_hand_dualized_scalar(self):
        # x+ = 0.5 x + w, |w| <= 1, no control: 0.5*2 + 1 = 2 on both rows
        sys = scalar_system(0.5)
        q_plus, k_ff, k_fb = one_step_propagate(sys, P1, [2.0, 2.0], box_spec(1.0))
        np.testing.assert_allclose(q_plus, [2.0, 2.0], atol=1e-8)
        assert k_ff.shape == (0, 1) and k_fb.shape == (0, 1)

    def test_pure_contraction(self):
        sys = scalar_system(0.5)
        q_plus, _, _ = one_step_propagate(sys, P1, [2.0, 2.0], box_spec(0.0))
        np.testing.assert_allclose(q_plus, [1.0, 1.0], atol=1e-8)

    def test_feedforward_cancels_measured_disturbance(self):
        # x+ = x + u + w, |w| <= 1, |u| <= 1: on a tiny set the only optimal
        # vertices have k_ff within q of -1, so q stays put
        sys = scalar_system(1.0, b=1.0)
        q = np.array([1e-7, 1e-7])
        q_plus, k_ff, k_fb = one_step_propagate(sys, P1, q, box_spec(1.0, u_radius=1.0))
        np.testing.assert_allclose(q_plus, q, atol=1e-8)
        assert abs(k_ff[0, 0] + 1.0) <= 1e-6

    def test_unmeasured_box_enters_as_constant(self):
        sys = scalar_system(0.5)
        q_plus, _, _ = one_step_propagate(sys, P1, [2.0, 2.0], box_spec(0.0, wu=0.25))
        np.testing.assert_allclose(q_plus, [1.25, 1.25], atol=1e-8)

    def test_cap_conflict_reports_row(self):
        sys = scalar_system(0.5)
        with pytest.raises(Infeasible, match="cap on template row"):
            one_step_propagate(sys, P1, [2.0, 2.0], box_spec(1.0),
                               state_caps=[1.5, np.inf])


class TestComputeMrci:
    def test_scalar_fixed_point(self):
        # q = 0.5 q + 1 has fixed point 2
        sys = scalar_system(0.5)
        res = compute_mrci(sys, P1, [1e-3, 1e-3], box_spec(1.0), eps=1e-7)
        assert res.converged
        np.testing.assert_allclose(res.poly.q, [2.0, 2.0], atol=1e-6)

    def test_zero_disturbance_stays_at_seed(self):
        sys = scalar_system(0.5)
        res = compute_mrci(sys, P1, [1e-3, 1e-3], box_spec(0.0))
        assert res.converged
        assert np.all(res.poly.q <= 1e-3 + 1e-6)

    def test_full_cancellation_collapses_to_seed(self):
        sys = scalar_system(1.0, b=1.0)
        res = compute_mrci(sys, P1, [1e-3, 1e-3], box_spec(1.0, u_radius=1.5), eps=1e-6)
        assert res.converged
        assert np.all(res.poly.q <= 1e-3 + 10e-6)

    def test_divergence_detected(self):
        sys = scalar_system(1.1)
        with pytest.raises(Diverged):
            compute_mrci(sys, P1, [1e-3, 1e-3], box_spec(1.0))

    def test_fixed_point_property(self):
        sys = planar_system()
        p_mat, _ = fan_template(2)
        spec = planar_spec()
        res = compute_mrci(sys, p_mat, 1e-3 * np.ones(10), spec)
        assert res.converged
        q_plus, _, _ = one_step_propagate(sys, p_mat, res.poly.q, spec)
        assert np.all(q_plus <= res.poly.q + 1e-6)

    def test_invariance_by_sampling(self):
        sys = planar_system()
        p_mat, _ = fan_template(2)
        spec = planar_spec()
        res = compute_mrci(sys, p_mat, 1e-3 * np.ones(10), spec)
        assert res.converged
        rng = np.random.default_rng(99)
        state_viol, input_viol = max_invariance_violation(sys, res, spec, rng, n_pairs=1000)
        assert state_viol <= 1e-6
        assert input_viol <= 1e-8

    def test_monotone_in_coupling_bound(self):
        sys = planar_system()
        p_mat, _ = fan_template(2)
        q_prev = None
        for w_bound in (0.1, 0.2, 0.4):
            spec = DisturbanceSpec(
                w_measured=Polytope.from_bounds([-w_bound, -0.2], [w_bound, 0.2]),
                w_u_max=[0.0, 0.0],
                u_set=Polytope.box(1.0, dim=1),
            )
            res = compute_mrci(sys, p_mat, 1e-3 * np.ones(10), spec,
                               q_init=q_prev)
            assert res.converged
            if q_prev is not None:
                assert np.all(res.poly.q >= q_prev - 1e-9)
            q_prev = res.poly.q

    def test_state_caps_enforced(self):
        sys = planar_system()
        p_mat, cap_rows = fan_template(2)
        caps = np.full(10, np.inf)
        caps[list(cap_rows)] = 0.05
        res = compute_mrci(sys, p_mat, 1e-3 * np.ones(10), planar_spec(),
                           state_caps=caps)
        assert res.converged
        assert res.poly.q[cap_rows[0]] <= 0.05 + 1e-9
        assert res.poly.q[cap_rows[1]] <= 0.05 + 1e-9
        # the cap binds the second state: check by support function
        assert res.poly.support([0.0, 1.0]) <= 0.05 + 1e-8

    def test_nonconverged_flag(self):
        sys = scalar_system(0.999)
        res = compute_mrci(sys, P1, [1e-3, 1e-3], box_spec(1.0), max_iter=3)
        assert not res.converged
        assert res.iterations == 3

    def test_serialization_roundtrip(self):
        sys = planar_system()
        p_mat, _ = fan_template(2)
        res = compute_mrci(sys, p_mat, 1e-3 * np.ones(10), planar_spec())
        again = type(res).from_dict(res.to_dict())
        np.testing.assert_allclose(again.poly.q, res.poly.q)
        np.testing.assert_allclose(again.k_ff, res.k_ff)
        np.testing.assert_allclose(again.k_fb, res.k_fb)


class TestDelayBound:
    def test_zero_delay(self):
        sys = scalar_system(1.0, b=1.0)
        assert np.all(delay_disturbance_bound(sys, [[0.7]], 0.05, 0.0) == 0.0)

    def test_zero_gain(self):
        sys = scalar_system(1.0, b=1.0)
        assert np.all(delay_disturbance_bound(sys, [[0.0]], 0.05, 0.5) == 0.0)

    def test_formula_value(self):
        # |b k_ff| = 2, omega_max 0.05, tau 0.1 -> 0.01; the exogenous
        # column of the gain does not contribute
        sys = LinearSubsystem(a=[[1.0]], b=[[2.0]], e1=[[1.0]], e2=[[1.0]],
                              c=[1.0], ts=1.0, neighbors=(2,))
        bound = delay_disturbance_bound(sys, [[1.0, 5.0]], 0.05, 0.1)
        np.testing.assert_allclose(bound, [0.01], atol=1e-12)

    def test_outer_loop_settles(self):
        # coupled scalar node: the delay bound feeds back into the spec
        sys = LinearSubsystem(a=[[0.5]], b=[[1.0]], e1=[[0.5]], e2=np.zeros((1, 0)),
                              c=[1.0], ts=1.0, neighbors=(2,))
        spec = DisturbanceSpec(
            w_measured=Polytope.box(1.0, dim=1),
            w_u_max=[0.0],
            u_set=Polytope.box(2.0, dim=1),
        )
        res = compute_mrci_with_delay(sys, P1, [1e-3, 1e-3], spec,
                                      omega_max=0.05, tau=0.5)
        assert res.converged
        # final set must absorb the gain-induced stale-signal bound
        extra = delay_disturbance_bound(sys, res.k_ff, 0.05, 0.5)
        spec2 = DisturbanceSpec(spec.w_measured, extra, spec.u_set)
        q_plus, _, _ = one_step_propagate(sys, P1, res.poly.q, spec2)
        assert np.all(q_plus <= res.poly.q + 1e-5)


class TestValidation:
    def test_zero_output_row_rejected(self):
        with pytest.raises(ValueError):
            LinearSubsystem(a=[[1.0]], b=[[1.0]], e1=np.zeros((1, 0)),
                            e2=[[1.0]], c=[0.0], ts=1.0)

    def test_bad_seed_rejected(self):
        sys = scalar_system(0.5)
        with pytest.raises(ValueError):
            compute_mrci(sys, P1, [0.0, 1e-3], box_spec(1.0))

    def test_fan_template_shape(self):
        rows, caps = fan_template(2)
        assert rows.shape == (10, 2)
        assert caps == (8, 9)
        # dedicated rows are exactly +/- the second axis
        np.testing.assert_allclose(rows[8], [0.0, 1.0])
        np.testing.assert_allclose(rows[9], [0.0, -1.0])
        # fan rows are unit length and avoid the axes
        np.testing.assert_allclose(np.linalg.norm(rows[:8], axis=1), 1.0)
        assert np.min(np.abs(rows[:8])) > 0.01
