"""H-representation polytope arithmetic.

A polytope is stored as {x | P x <= q} and never converted to vertices at
runtime; support functions (small LPs) carry every geometric query.
"""

from __future__ import annotations

import numpy as np

from .optim import DimensionMismatch, LpProblem, solve_lp


class EmptyPolytope(RuntimeError):
    """The feasibility LP behind a support query was infeasible."""


class Polytope:
    """Convex polytope {x | P x <= q} with rows stored as given."""

    def __init__(self, p, q):
        self.p = np.atleast_2d(np.asarray(p, dtype=float))
        self.q = np.asarray(q, dtype=float).ravel()
        if self.p.shape[0] != self.q.shape[0]:
            raise DimensionMismatch(
                f"{self.p.shape[0]} rows vs {self.q.shape[0]} offsets")

    @property
    def dim(self) -> int:
        return self.p.shape[1]

    @property
    def nrows(self) -> int:
        return self.p.shape[0]

    def __repr__(self):
        return f"Polytope({self.nrows} rows, dim {self.dim})"

    @classmethod
    def box(cls, radius, dim=None):
        """Axis-aligned box |x_i| <= radius_i (scalar radius broadcasts)."""
        r = np.asarray(radius, dtype=float).ravel()
        if r.size == 1 and dim is not None:
            r = np.full(dim, r[0])
        n = r.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([r, r]))

    @classmethod
    def from_bounds(cls, lb, ub):
        lb = np.asarray(lb, dtype=float).ravel()
        ub = np.asarray(ub, dtype=float).ravel()
        n = lb.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([ub, -lb]))

    def support(self, direction) -> float:
        """max direction'x over the polytope; +inf if unbounded that way.

        Raises EmptyPolytope when the set is empty.
        """
        d = np.asarray(direction, dtype=float).ravel()
        if d.shape[0] != self.dim:
            raise DimensionMismatch(f"direction has dim {d.shape[0]}, polytope {self.dim}")
        sol = solve_lp(LpProblem(c=-d, a_ub=self.p, b_ub=self.q))
        if sol.status == "infeasible":
            raise EmptyPolytope("support query on an empty polytope")
        if sol.status == "unbounded":
            return np.inf
        return -sol.value

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.dim:
            raise DimensionMismatch(f"point has dim {x.shape[0]}, polytope {self.dim}")
        return bool(np.all(self.p @ x <= self.q + tol))

    def is_subset(self, outer: "Polytope", tol: float = 1e-9) -> bool:
        """True iff this polytope lies inside `outer` (support test per row)."""
        if outer.dim != self.dim:
            raise DimensionMismatch("ambient dimensions differ")
        for k in range(outer.nrows):
            if self.support(outer.p[k]) > outer.q[k] + tol:
                return False
        return True

    def output_bound(self, c) -> float:
        """max |c'x| over the polytope (two support calls)."""
        c = np.asarray(c, dtype=float).ravel()
        return max(self.support(c), self.support(-c))

    def is_empty(self) -> bool:
        sol = solve_lp(LpProblem(c=np.zeros(self.dim), a_ub=self.p, b_ub=self.q))
        return sol.status == "infeasible"

    def is_bounded(self) -> bool:
        """Support-function finiteness along +/- every axis."""
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            if not np.isfinite(self.support(e)) or not np.isfinite(self.support(-e)):
                return False
        return True

    def intersects(self, other: "Polytope") -> bool:
        if other.dim != self.dim:
            raise DimensionMismatch("ambient dimensions differ")
        stacked = Polytope(np.vstack([self.p, other.p]), np.concatenate([self.q, other.q]))
        return not stacked.is_empty()

    def to_dict(self) -> dict:
        """Dense row-major serialization used by the scenario config format."""
        return {"p": [list(map(float, row)) for row in self.p],
                "q": [float(v) for v in self.q]}

    @classmethod
    def from_dict(cls, data: dict) -> "Polytope":
        return cls(np.array(data["p"], dtype=float), np.array(data["q"], dtype=float))


def cross(a: Polytope, b: Polytope) -> Polytope:
    """Cartesian product of two polytopes (block-diagonal H-rep)."""
    pa, pb = a.p, b.p
    top = np.hstack([pa, np.zeros((pa.shape[0], b.dim))])
    bot = np.hstack([np.zeros((pb.shape[0], a.dim)), pb])
    return Polytope(np.vstack([top, bot]), np.concatenate([a.q, b.q]))
