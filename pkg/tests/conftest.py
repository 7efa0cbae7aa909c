import numpy as np
import pytest

from gridsafe.grid import discretize
from gridsafe.polytope import Polytope
from gridsafe.rci import DisturbanceSpec, LinearSubsystem, compute_mrci, fan_template


@pytest.fixture(scope="session")
def planar_node():
    """Generator-like 2-D node (discretized swing block: inertia 0.2,
    damping 2, unit line stiffness times two) with one coupled neighbor,
    its disturbance spec, and a converged invariant set.  Session-scoped:
    the synthesis is the slow part."""
    cont = LinearSubsystem(
        a=[[0.0, 1.0], [-10.0, -10.0]],
        b=[[0.0], [-5.0]],
        e1=[[0.0], [10.0]],
        e2=[[0.0], [5.0]],
        c=[1.0, 0.0],
        ts=1.0,
        neighbors=(1,),
    )
    sys = discretize(cont, 0.05)
    spec = DisturbanceSpec(
        w_measured=Polytope.from_bounds([-0.1, -0.05], [0.1, 0.05]),
        w_u_max=[1e-3, 1e-3],
        u_set=Polytope.box(0.3, dim=1),
    )
    p_mat, cap_rows = fan_template(2)
    res = compute_mrci(sys, p_mat, 1e-3 * np.ones(10), spec)
    assert res.converged
    return sys, spec, res
