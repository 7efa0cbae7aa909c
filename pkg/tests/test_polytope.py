"""Polytope geometry tests against the vertex-enumeration oracle."""

import numpy as np
import pytest

from gridsafe.optim import DimensionMismatch
from gridsafe.polytope import EmptyPolytope, Polytope, cross

from oracles import polytope_vertices


def random_polytope(rng, n=2, rows=6):
    """Bounded nonempty polytope containing a point near the origin."""
    a = rng.standard_normal((rows, n))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = 0.2 + rng.random(rows)
    box = Polytope.box(3.0, dim=n)
    return Polytope(np.vstack([a, box.p]), np.concatenate([b, box.q]))


class TestSupport:
    def test_unit_box_axis(self):
        box = Polytope.box(1.0, dim=2)
        assert box.support([1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)

    def test_zero_direction(self):
        poly = random_polytope(np.random.default_rng(0))
        assert poly.support(np.zeros(2)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_vertex_max(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            poly = random_polytope(rng)
            verts = polytope_vertices(poly)
            assert verts
            d = rng.standard_normal(2)
            expected = max(d @ v for v in verts)
            assert poly.support(d) == pytest.approx(expected, abs=1e-8)

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(5)
        poly = random_polytope(rng)
        for _ in range(20):
            d = rng.standard_normal(2)
            alpha = 10 ** rng.uniform(-2, 2)
            assert poly.support(alpha * d) == pytest.approx(
                alpha * poly.support(d), abs=1e-8 * max(1, alpha))

    def test_subadditivity(self):
        rng = np.random.default_rng(6)
        poly = random_polytope(rng)
        for _ in range(20):
            d1, d2 = rng.standard_normal(2), rng.standard_normal(2)
            assert poly.support(d1 + d2) <= poly.support(d1) + poly.support(d2) + 1e-8

    def test_unbounded_direction_gives_inf(self):
        half = Polytope([[1.0, 0.0]], [1.0])
        assert np.isinf(half.support([-1.0, 0.0]))

    def test_empty_raises(self):
        empty = Polytope([[1.0], [-1.0]], [-1.0, -1.0])
        with pytest.raises(EmptyPolytope):
            empty.support([1.0])


class TestContains:
    def test_origin_in_unit_box(self):
        assert Polytope.box(1.0, dim=2).contains([0.0, 0.0], tol=0.0)

    def test_outside_point(self):
        assert not Polytope.box(1.0, dim=2).contains([1.0 + 1e-3, 0.0], tol=1e-6)

    def test_boundary_point_with_tol(self):
        assert Polytope.box(1.0, dim=2).contains([1.0, 0.0], tol=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Polytope.box(1.0, dim=2).contains([0.0, 0.0, 0.0])

    def test_contains_all_oracle_vertices(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            poly = random_polytope(rng)
            for v in polytope_vertices(poly):
                assert poly.contains(v, tol=1e-7)


class TestSubset:
    def test_half_box_in_unit_box(self):
        assert Polytope.box(0.5, dim=2).is_subset(Polytope.box(1.0, dim=2))

    def test_unit_box_not_in_half_box(self):
        assert not Polytope.box(1.0, dim=2).is_subset(Polytope.box(0.5, dim=2))

    def test_matches_vertex_membership(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            inner = random_polytope(rng)
            outer = random_polytope(rng)
            expected = all(outer.contains(v, tol=1e-8) for v in polytope_vertices(inner))
            assert inner.is_subset(outer, tol=1e-8) == expected

    def test_transitivity(self):
        rng = np.random.default_rng(17)
        hit = 0
        for _ in range(40):
            a, b, c = (random_polytope(rng) for _ in range(3))
            if a.is_subset(b) and b.is_subset(c):
                hit += 1
                assert a.is_subset(c, tol=1e-7)
        # scaled chain guarantees at least one witness
        a = Polytope.box(0.3, dim=2)
        b = Polytope.box(0.6, dim=2)
        c = Polytope.box(1.0, dim=2)
        assert a.is_subset(b) and b.is_subset(c) and a.is_subset(c)


class TestOutputBound:
    def test_unit_box(self):
        assert Polytope.box(1.0, dim=2).output_bound([1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric_set_equals_support(self):
        rng = np.random.default_rng(19)
        a = rng.standard_normal((5, 2))
        b = 0.5 + rng.random(5)
        sym = Polytope(np.vstack([a, -a]), np.concatenate([b, b]))
        for _ in range(10):
            c = rng.standard_normal(2)
            assert sym.output_bound(c) == pytest.approx(sym.support(c), abs=1e-9)

    def test_matches_vertex_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(15):
            poly = random_polytope(rng)
            c = rng.standard_normal(2)
            expected = max(abs(c @ v) for v in polytope_vertices(poly))
            assert poly.output_bound(c) == pytest.approx(expected, abs=1e-8)

    def test_nonnegative_when_origin_inside(self):
        poly = random_polytope(np.random.default_rng(29))
        assert poly.output_bound([1.0, 1.0]) >= 0.0


class TestMisc:
    def test_boundedness_check(self):
        assert Polytope.box(1.0, dim=3).is_bounded()
        assert not Polytope([[1.0, 0.0]], [1.0]).is_bounded()

    def test_from_bounds(self):
        poly = Polytope.from_bounds([-1.0, 0.0], [2.0, 3.0])
        assert poly.contains([2.0, 3.0], tol=1e-12)
        assert not poly.contains([-1.1, 0.0])

    def test_cross_product(self):
        prod = cross(Polytope.box(1.0, dim=1), Polytope.box(2.0, dim=1))
        assert prod.contains([1.0, 2.0], tol=1e-12)
        assert not prod.contains([1.0, 2.1])

    def test_roundtrip_serialization(self):
        poly = random_polytope(np.random.default_rng(1))
        again = Polytope.from_dict(poly.to_dict())
        np.testing.assert_allclose(again.p, poly.p)
        np.testing.assert_allclose(again.q, poly.q)

    def test_intersects(self):
        a = Polytope.box(1.0, dim=2)
        b = Polytope.from_bounds([0.5, 0.5], [2.0, 2.0])
        c = Polytope.from_bounds([1.5, 1.5], [2.0, 2.0])
        assert a.intersects(b)
        assert not a.intersects(c)
