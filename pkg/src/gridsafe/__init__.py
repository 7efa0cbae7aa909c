"""Network-safe control synthesis toolkit.

Composes per-subsystem robust control invariant sets into a network-wide
invariant through assume-guarantee contracts, enforces the sets online
with discrete-time barrier-function QPs, and recovers from contingencies
with a delay-aware tube MPC.  Demonstrated on reduced-order power-grid
models.
"""

from .optim import LpProblem, QpProblem, Solution, solve_lp, solve_qp
from .polytope import Polytope

__version__ = "0.1.0"

__all__ = [
    "LpProblem",
    "QpProblem",
    "Solution",
    "solve_lp",
    "solve_qp",
    "Polytope",
    "__version__",
]
